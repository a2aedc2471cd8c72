#!/usr/bin/env python3
"""Sweep the semantic weight and softmax temperature over a bundle.

For every (weight, temperature) pair, each annotated image is explained
against distractors sampled from its most-confused class, and the mean
Near-KP / Same-KP / edit count is printed as one table row. Useful for
locating the saturation point of the semantic weight on a new dataset.
"""

import argparse

import numpy as np

from semcf import SearchCase, SearchConfig, find_counterfactual, head_forward
from semcf.bundle import load_bundle
from semcf.metrics import aggregate_report, project_keypoints, select_distractor_class


def run_cases(bundle, config, num_distractors, seed):
    rng = np.random.default_rng(seed)
    traces = []
    for query_id in sorted(bundle.images):
        query = bundle.image(query_id)
        predicted = int(np.argmax(head_forward(bundle.head, query.features)))
        try:
            target = select_distractor_class(bundle.confusion_matrix, predicted)
        except Exception:
            continue
        pool = sorted(i for i in bundle.images_of_class(target) if i != query_id)
        if len(pool) < num_distractors:
            continue
        picked = sorted(rng.choice(len(pool), size=num_distractors, replace=False))
        distractor_ids = [pool[i] for i in picked]
        case = SearchCase(
            query_id=query_id,
            query=query.features,
            distractor_ids=distractor_ids,
            distractors=[bundle.image(i).features for i in distractor_ids],
            head=bundle.head,
            target_class=target,
            query_embedding=query.embedding,
            distractor_embeddings=[bundle.image(i).embedding for i in distractor_ids],
        )
        traces.append(find_counterfactual(case, config))
    return traces


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--bundle", required=True)
    parser.add_argument("--weights", type=float, nargs="+", default=[0.0, 0.2, 0.4, 0.8, 1.6])
    parser.add_argument("--temperatures", type=float, nargs="+", default=[0.1])
    parser.add_argument("--topk", type=float, default=1.0)
    parser.add_argument("--num-distractors", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    bundle = load_bundle(args.bundle)
    if bundle.confusion_matrix is None:
        raise SystemExit("bundle carries no confusion matrix; cannot pick distractor classes")
    part_grids = {
        i: project_keypoints(rec.keypoints, bundle.height, bundle.width)
        for i, rec in bundle.images.items()
        if rec.keypoints is not None
    }
    print(f"{'weight':>8} {'tau':>6} {'near_kp':>8} {'same_kp':>8} {'edits':>6} {'failed':>6}")
    for temperature in args.temperatures:
        for weight in args.weights:
            config = SearchConfig(
                semantic_weight=weight,
                temperature=temperature,
                prefilter_fraction=args.topk,
            )
            traces = run_cases(bundle, config, args.num_distractors, args.seed)
            if not traces:
                raise SystemExit("no runnable cases in this bundle")
            report = aggregate_report(traces, part_grids, "all_edits")
            print(
                f"{weight:>8.2f} {temperature:>6.2f} {report.near_kp:>8.4f} "
                f"{report.same_kp:>8.4f} {report.mean_edits:>6.2f} {report.failed:>6d}"
            )


if __name__ == "__main__":
    main()
