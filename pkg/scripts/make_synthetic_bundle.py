#!/usr/bin/env python3
"""Generate a deterministic synthetic bundle on disk.

Examples:
    python scripts/make_synthetic_bundle.py --preset mini --out /tmp/mini
    python scripts/make_synthetic_bundle.py --preset bench --out /tmp/bench
    python scripts/make_synthetic_bundle.py --height 7 --width 7 --channels 64 \
        --classes 10 --images-per-class 4 --seed 3 --out /tmp/custom
"""

import argparse

from semcf.bundle import save_bundle
from semcf.synthetic import make_bundle, make_preset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--preset", choices=("mini", "bench"), default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--height", type=int, default=4)
    parser.add_argument("--width", type=int, default=4)
    parser.add_argument("--channels", type=int, default=8)
    parser.add_argument("--embedding-channels", type=int, default=6)
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--images-per-class", type=int, default=2)
    parser.add_argument("--head", choices=("gap_linear", "flatten_mlp"), default="gap_linear")
    args = parser.parse_args()

    if args.preset:
        bundle = make_preset(args.preset, seed=args.seed if args.seed else None)
    else:
        bundle = make_bundle(
            height=args.height,
            width=args.width,
            channels=args.channels,
            embedding_channels=args.embedding_channels,
            num_classes=args.classes,
            images_per_class=args.images_per_class,
            seed=args.seed,
            head_kind=args.head,
        )
    manifest = save_bundle(bundle, args.out)
    print(f"wrote {manifest}")


if __name__ == "__main__":
    main()
