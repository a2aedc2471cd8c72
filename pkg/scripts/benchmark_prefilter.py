#!/usr/bin/env python3
"""Prefilter ablation: run the benchmark across several keep fractions.

Prints per-edit head evaluations and wall time per fraction, plus the
speedup relative to no prefiltering.
"""

import argparse
import io
import json
from contextlib import redirect_stdout

from semcf.cli import main as cli_main


def run(bundle, n_distractors, topk, max_edits, distractor_class):
    argv = [
        "benchmark",
        "--bundle",
        bundle,
        "--n-distractors",
        str(n_distractors),
        "--topk",
        str(topk),
    ]
    if max_edits:
        argv += ["--max-edits", str(max_edits)]
    if distractor_class:
        argv += ["--distractor-class", distractor_class]
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli_main(argv)
    if code != 0:
        raise SystemExit(f"benchmark failed with exit code {code}")
    return json.loads(buf.getvalue())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--bundle", required=True)
    parser.add_argument("--n-distractors", type=int, default=5)
    parser.add_argument("--fractions", type=float, nargs="+", default=[0.01, 0.05, 0.1, 0.2, 1.0])
    parser.add_argument("--max-edits", type=int, default=None)
    parser.add_argument("--distractor-class", default=None)
    args = parser.parse_args()

    baseline = run(args.bundle, args.n_distractors, 1.0, args.max_edits, args.distractor_class)
    base_per_edit = baseline["wall_time_s"] / max(baseline["edits"], 1)
    print(f"{'topk':>6} {'evals/edit':>11} {'edits':>6} {'wall_s':>8} {'speedup':>8}")
    for fraction in args.fractions:
        report = run(args.bundle, args.n_distractors, fraction, args.max_edits, args.distractor_class)
        per_edit = report["wall_time_s"] / max(report["edits"], 1)
        print(
            f"{fraction:>6.2f} {report['per_edit_head_evals']:>11d} {report['edits']:>6d} "
            f"{report['wall_time_s']:>8.3f} {base_per_edit / per_edit:>8.2f}x"
        )


if __name__ == "__main__":
    main()
