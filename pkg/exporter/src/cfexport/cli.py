"""Command-line surface of the exporter."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExportConfig, ImageManifest
from .confusion import confusion_from_predictions, predict_classes
from .models import build_split
from .pipeline import export_bundle


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfexport", description="Export model features and heads as semcf bundles."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    bundle = sub.add_parser("export-bundle", help="extract features and write a bundle")
    bundle.add_argument("--config", default=None, help="ExportConfig JSON (overrides the flags)")
    bundle.add_argument("--images", default=None, help="image manifest JSON")
    bundle.add_argument("--out", default=None)
    bundle.add_argument("--backbone", default="resnet50")
    bundle.add_argument("--weights", default=None)
    bundle.add_argument("--aux-backbone", default="resnet18")
    bundle.add_argument("--aux-weights", default=None)
    bundle.add_argument("--seed", type=int, default=0)
    bundle.add_argument("--batch-size", type=int, default=16)
    bundle.add_argument("--annotations", default=None)
    bundle.add_argument("--attribute-bank", default=None)
    bundle.add_argument("--class-attributes", default=None)
    bundle.add_argument("--include-confusion", action="store_true")
    bundle.add_argument("--no-grid-check", action="store_true", help="skip the 7x7 grid assertion")

    confusion = sub.add_parser("export-confusion", help="tally a confusion matrix JSON")
    confusion.add_argument("--images", required=True)
    confusion.add_argument("--out", required=True)
    confusion.add_argument("--backbone", default="resnet50")
    confusion.add_argument("--weights", default=None)
    confusion.add_argument("--seed", type=int, default=0)
    confusion.add_argument("--batch-size", type=int, default=16)
    return parser


def _cmd_export_bundle(args: argparse.Namespace) -> int:
    if args.config:
        config = ExportConfig.from_json(args.config)
    else:
        if not args.images or not args.out:
            print("error: pass --config or both --images and --out", file=sys.stderr)
            return 2
        config = ExportConfig(
            image_manifest=args.images,
            out=args.out,
            backbone=args.backbone,
            weights=args.weights,
            aux_backbone=args.aux_backbone,
            aux_weights=args.aux_weights,
            seed=args.seed,
            batch_size=args.batch_size,
            expect_grid=None if args.no_grid_check else (7, 7),
            annotations=args.annotations,
            attribute_bank=args.attribute_bank,
            class_attributes=args.class_attributes,
            include_confusion=args.include_confusion,
        )
    manifest_path = export_bundle(config)
    metadata = json.loads(manifest_path.read_text())["metadata"]
    print(f"wrote {manifest_path}")
    agreement = metadata["consistency_agreement"]
    if agreement is not None:
        print(
            f"consistency: {100 * agreement:.1f}% predicted-class agreement "
            f"over {metadata['consistency_checked']} images"
        )
    return 0


def _cmd_export_confusion(args: argparse.Namespace) -> int:
    manifest = ImageManifest.from_json(args.images)
    if not manifest.images:
        print("error: image manifest lists no images", file=sys.stderr)
        return 1
    split = build_split(
        args.backbone, args.weights, args.seed, num_classes=len(manifest.classes)
    )
    predictions = predict_classes(
        split.full_model, [e.path for e in manifest.images], args.batch_size
    )
    truth = np.array([manifest.class_index(e.class_name) for e in manifest.images])
    matrix = confusion_from_predictions(truth, predictions, len(manifest.classes))
    payload = {"class_names": manifest.classes, "confusion_matrix": matrix.tolist()}
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "export-bundle":
            return _cmd_export_bundle(args)
        return _cmd_export_confusion(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
