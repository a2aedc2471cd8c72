#!/usr/bin/env python3
"""Train linear part-attribute classifiers on pooled trunk features.

Writes an npz bank (weights, biases, names, parts) consumable by
`cfexport export-bundle --attribute-bank`.
"""

import argparse

from cfexport.training import train_attribute_classifiers


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--images", required=True, help="image manifest JSON")
    parser.add_argument(
        "--attributes",
        required=True,
        help="npz with class_attributes (CxT), names (T), parts (T)",
    )
    parser.add_argument("--out", required=True, help="output bank npz")
    parser.add_argument("--backbone", default="resnet50")
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--lr", type=float, default=0.04)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--weight-decay", type=float, default=1e-6)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    path = train_attribute_classifiers(
        args.images,
        args.attributes,
        args.out,
        backbone=args.backbone,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
