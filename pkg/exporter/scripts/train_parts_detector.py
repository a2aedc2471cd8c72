#!/usr/bin/env python3
"""Train the cell-level parts detector and emit part probability grids.

The output annotations JSON plugs into `cfexport export-bundle
--annotations`; pass --out-weights to also keep the detector state dict.
"""

import argparse

from cfexport.training import train_parts_detector


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--images", required=True, help="image manifest JSON")
    parser.add_argument("--keypoints", required=True, help="annotations JSON with keypoints")
    parser.add_argument("--out-annotations", required=True)
    parser.add_argument("--out-weights", default=None)
    parser.add_argument("--backbone", default="resnet18")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--lr", type=float, default=0.001)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    path = train_parts_detector(
        args.images,
        args.keypoints,
        args.out_annotations,
        backbone=args.backbone,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        out_weights=args.out_weights,
    )
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
