"""Command-line surface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 the search finished
without flipping the decision (a legitimate outcome, distinct from I/O
failures).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .attributes import attribute_importance
from .bundle import (
    Bundle,
    TraceDocument,
    load_bundle,
    load_trace,
    save_trace,
)
from .errors import DataError
from .heads import apply_edit
from .metrics import (
    aggregate_report,
    clustering_accuracy,
    format_report,
    project_keypoints,
    select_distractor_class,
    select_distractor_class_by_attributes,
)
from .search import EditTrace, SearchCase, SearchConfig, find_counterfactual
from .semantic import cluster_embeddings

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NO_FLIP = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semcf",
        description="Counterfactual explanation search over exported feature-grid bundles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    explain = sub.add_parser("explain", help="search counterfactual edits for query images")
    explain.add_argument("--bundle", required=True)
    explain.add_argument("--query", action="append", required=True, help="query image id (repeatable)")
    explain.add_argument("--distractor", action="append", default=None, help="distractor image id (repeatable)")
    explain.add_argument("--distractor-class", default=None, help="sample distractors from this class")
    explain.add_argument("--num-distractors", type=int, default=1)
    explain.add_argument("--lambda", dest="semantic_weight", type=float, default=0.4)
    explain.add_argument("--tau", type=float, default=0.1)
    explain.add_argument("--topk", type=float, default=0.10, help="prefilter fraction in (0, 1]")
    explain.add_argument("--mode", choices=("soft", "hard", "none"), default="soft")
    explain.add_argument("--max-edits", type=int, default=None)
    explain.add_argument("--seed", type=int, default=0)
    explain.add_argument("--k-clusters", type=int, default=50, help="cluster count for hard mode")
    explain.add_argument("--jobs", type=int, default=1)
    explain.add_argument("--out", required=True, help="trace file, or a directory for multiple queries")

    evaluate = sub.add_parser("evaluate", help="aggregate keypoint metrics over saved traces")
    evaluate.add_argument("--bundle", required=True)
    evaluate.add_argument("--traces", required=True, help="directory of trace documents")
    evaluate.add_argument("--scope", choices=("single", "all"), default="all")
    evaluate.add_argument("--dilation", type=int, default=0)
    evaluate.add_argument("--out", default=None, help="report file (defaults to stdout)")

    cluster = sub.add_parser("cluster-eval", help="part purity of clustered embedding cells")
    cluster.add_argument("--bundle", required=True)
    cluster.add_argument("--k", type=int, required=True)
    cluster.add_argument("--seed", type=int, default=0)

    attr = sub.add_parser("attr-explain", help="append an attribute ranking to a trace")
    attr.add_argument("--bundle", required=True)
    attr.add_argument("--trace", required=True)
    attr.add_argument("--topk-attrs", type=int, default=5)
    attr.add_argument("--out", default=None, help="output trace file (defaults to rewriting in place)")

    pairs = sub.add_parser("select-pairs", help="list query/distractor class pairs")
    pairs.add_argument("--bundle", required=True)
    pairs.add_argument("--method", choices=("confusion", "attributes"), required=True)
    pairs.add_argument("--out", default=None)

    bench = sub.add_parser("benchmark", help="operation counts and wall time of one search")
    bench.add_argument("--bundle", required=True)
    bench.add_argument("--n-distractors", type=int, required=True)
    bench.add_argument("--topk", type=float, required=True)
    bench.add_argument("--lambda", dest="semantic_weight", type=float, default=0.4)
    bench.add_argument("--tau", type=float, default=0.1)
    bench.add_argument("--max-edits", type=int, default=None)
    bench.add_argument("--query", default=None, help="query image id (defaults to the first id)")
    bench.add_argument(
        "--distractor-class",
        default=None,
        help="target class name (defaults to the most-confused class of the prediction)",
    )
    return parser


def _select_distractors(
    bundle: Bundle, query_id: str, args: argparse.Namespace
) -> tuple[list[str], int]:
    """Resolve distractor ids and the target class from the CLI flags."""
    if args.distractor and args.distractor_class:
        raise ValueError("pass either --distractor ids or --distractor-class, not both")
    if args.distractor:
        ids = list(args.distractor)
        classes = {bundle.image(i).class_index for i in ids}
        if len(classes) != 1:
            raise DataError(f"distractor images span several classes: {sorted(classes)}")
        return ids, classes.pop()
    if not args.distractor_class:
        raise ValueError("pass --distractor ids or --distractor-class")
    target = bundle.class_index(args.distractor_class)
    pool = sorted(i for i in bundle.images_of_class(target) if i != query_id)
    if len(pool) < args.num_distractors:
        raise DataError(
            f"class {args.distractor_class!r} has {len(pool)} usable images, "
            f"need {args.num_distractors}"
        )
    rng = np.random.default_rng(args.seed)
    picked = rng.choice(len(pool), size=args.num_distractors, replace=False)
    return [pool[i] for i in sorted(picked)], target


def _build_case(
    bundle: Bundle,
    query_id: str,
    distractor_ids: list[str],
    target_class: int,
    clusters,
) -> SearchCase:
    query = bundle.image(query_id)
    distractors = [bundle.image(i) for i in distractor_ids]
    return SearchCase(
        query_id=query_id,
        query=query.features,
        distractor_ids=distractor_ids,
        distractors=[d.features for d in distractors],
        head=bundle.head,
        target_class=target_class,
        query_embedding=query.embedding,
        distractor_embeddings=[d.embedding for d in distractors],
        clusters=clusters,
    )


def _explain_case(bundle: Bundle, query_id: str, args: argparse.Namespace, clusters) -> tuple[str, bool]:
    """Run and persist one explain case; returns (query_id, success)."""
    distractor_ids, target = _select_distractors(bundle, query_id, args)
    config = SearchConfig(
        semantic_weight=args.semantic_weight,
        temperature=args.tau,
        prefilter_fraction=args.topk,
        max_edits=args.max_edits,
        constraint_mode=args.mode,
    )
    case = _build_case(bundle, query_id, distractor_ids, target, clusters)
    trace = find_counterfactual(case, config)
    out = Path(args.out)
    path = out / f"{query_id}.json" if len(args.query) > 1 else out
    save_trace(TraceDocument(trace, config), path)
    return query_id, trace.success


def _explain_one(bundle_path: str, query_id: str, args_dict: dict) -> tuple[str, bool]:
    """Worker body: loads the bundle in the worker process."""
    args = argparse.Namespace(**args_dict)
    bundle = load_bundle(bundle_path)
    clusters = _explain_clusters(bundle, args)
    return _explain_case(bundle, query_id, args, clusters)


def _explain_clusters(bundle: Bundle, args: argparse.Namespace):
    if args.mode != "hard":
        return None
    return cluster_embeddings(
        {i: rec.embedding for i, rec in bundle.images.items()}, args.k_clusters, args.seed
    )


def _cmd_explain(args: argparse.Namespace) -> int:
    queries = args.query
    if len(queries) > 1:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    results: list[tuple[str, bool]] = []
    if args.jobs > 1 and len(queries) > 1:
        args_dict = vars(args).copy()
        args_dict.pop("command", None)
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_explain_one, args.bundle, q, args_dict) for q in queries]
            results = [f.result() for f in futures]
    else:
        bundle = load_bundle(args.bundle)
        clusters = _explain_clusters(bundle, args)
        results = [_explain_case(bundle, q, args, clusters) for q in queries]
    failed = [query_id for query_id, success in results if not success]
    for query_id in failed:
        print(f"no decision flip for query {query_id!r} within the edit budget", file=sys.stderr)
    return EXIT_NO_FLIP if failed else EXIT_OK


def _load_trace_dir(path: Path) -> list[TraceDocument]:
    if not path.is_dir():
        raise DataError(f"no trace directory at {path}")
    files = sorted(p for p in path.iterdir() if p.suffix == ".json")
    if not files:
        raise DataError(f"no trace documents in {path}")
    return [load_trace(p) for p in files]


def _cmd_evaluate(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    docs = _load_trace_dir(Path(args.traces))
    traces: list[EditTrace] = [doc.trace for doc in docs]
    referenced: set[str] = set()
    for trace in traces:
        referenced.add(trace.query_id)
        referenced.update(trace.distractor_ids)
    part_grids = {}
    for image_id in sorted(referenced):
        rec = bundle.image(image_id)
        if rec.keypoints is None:
            raise DataError(f"image {image_id!r} has no keypoint annotations")
        part_grids[image_id] = project_keypoints(rec.keypoints, bundle.height, bundle.width)
    masks = None
    if all(bundle.image(i).mask is not None for i in referenced):
        masks = {i: bundle.image(i).mask for i in sorted(referenced)}
    scope = "single_edit" if args.scope == "single" else "all_edits"
    report = aggregate_report(traces, part_grids, scope, masks, args.dilation)
    text = format_report(report)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_cluster_eval(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    assignment = cluster_embeddings(
        {i: rec.embedding for i, rec in bundle.images.items()}, args.k, args.seed
    )
    part_grids = {
        i: project_keypoints(rec.keypoints, bundle.height, bundle.width)
        for i, rec in bundle.images.items()
        if rec.keypoints is not None
    }
    if not part_grids:
        raise DataError("no image in the bundle has keypoint annotations")
    accuracy = clustering_accuracy(assignment, part_grids)
    print(f"k: {args.k}")
    print(f"seed: {args.seed}")
    print(f"inertia: {assignment.inertia:.6f}")
    print(f"clustering_accuracy: {accuracy:.6f}")
    return EXIT_OK


def _cmd_attr_explain(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    if bundle.attribute_bank is None:
        raise DataError("bundle carries no attribute bank")
    doc = load_trace(args.trace)
    trace = doc.trace
    if not trace.edits:
        raise DataError("trace has no edits to explain")
    first = trace.edits[0].candidate
    query = bundle.image(trace.query_id)
    distractor = bundle.image(trace.distractor_ids[first.distractor_image])
    if query.part_probs is None or distractor.part_probs is None:
        raise DataError("attribute explanation needs part probability grids for both images")
    distractor_grids = [bundle.image(d).features for d in trace.distractor_ids]
    edited = apply_edit(query.features, distractor_grids, first)
    ranking = attribute_importance(
        query.features,
        edited,
        bundle.head,
        bundle.attribute_bank,
        trace.target_class,
        first,
        query.part_probs,
        distractor.part_probs,
    )
    bank = bundle.attribute_bank
    doc.attributes = [
        {
            "attribute": item.attribute,
            "name": bank.names[item.attribute],
            "part": bank.parts[item.attribute],
            "s": item.s,
            "s_prime": item.s_prime,
            "delta": item.delta,
        }
        for item in ranking[: args.topk_attrs]
    ]
    out = Path(args.out) if args.out else Path(args.trace)
    save_trace(doc, out)
    return EXIT_OK


def _cmd_select_pairs(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    lines = []
    if args.method == "confusion":
        if bundle.confusion_matrix is None:
            raise DataError("bundle carries no confusion matrix")
        for c in range(len(bundle.class_names)):
            row = bundle.confusion_matrix[c].copy()
            row[c] = 0
            if row.max() <= 0:
                continue
            target = select_distractor_class(bundle.confusion_matrix, c)
            lines.append(f"{bundle.class_names[c]}\t{bundle.class_names[target]}")
    else:
        if bundle.class_attributes is None:
            raise DataError("bundle carries no class attribute matrix")
        for c in range(len(bundle.class_names)):
            target = select_distractor_class_by_attributes(bundle.class_attributes, c)
            lines.append(f"{bundle.class_names[c]}\t{bundle.class_names[target]}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_benchmark(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    ids = sorted(bundle.images)
    query_id = args.query if args.query is not None else ids[0]
    query = bundle.image(query_id)
    # Key the target off the predicted class so the measured search is
    # never vacuous.
    from .heads import head_forward

    predicted = int(np.argmax(head_forward(bundle.head, query.features)))
    if args.distractor_class is not None:
        target = bundle.class_index(args.distractor_class)
    elif bundle.confusion_matrix is not None:
        target = select_distractor_class(bundle.confusion_matrix, predicted)
    else:
        target = None
        for c in range(len(bundle.class_names)):
            if c == predicted:
                continue
            if len([i for i in bundle.images_of_class(c) if i != query_id]) >= args.n_distractors:
                target = c
                break
        if target is None:
            raise DataError(f"no class offers {args.n_distractors} distractor images")
    pool = sorted(i for i in bundle.images_of_class(target) if i != query_id)
    if len(pool) < args.n_distractors:
        raise DataError(
            f"class {bundle.class_names[target]!r} has {len(pool)} usable images, "
            f"need {args.n_distractors}"
        )
    distractor_ids = pool[: args.n_distractors]
    config = SearchConfig(
        semantic_weight=args.semantic_weight,
        temperature=args.tau,
        prefilter_fraction=args.topk,
        max_edits=args.max_edits,
    )
    case = _build_case(bundle, query_id, distractor_ids, target, None)
    start = time.perf_counter()
    trace = find_counterfactual(case, config)
    elapsed = time.perf_counter() - start
    stats = trace.stats
    report = {
        "query": query_id,
        "target_class": bundle.class_names[target],
        "n_distractors": args.n_distractors,
        "topk": args.topk,
        "edits": trace.num_edits,
        "success": trace.success,
        "head_evals": stats.head_evals,
        "candidate_evals": stats.candidate_evals,
        "candidate_evals_per_edit": stats.candidate_evals_per_edit,
        "per_edit_head_evals": stats.candidate_evals_per_edit[0] if stats.candidate_evals_per_edit else 0,
        "dot_products": stats.dot_products,
        "wall_time_s": elapsed,
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


_COMMANDS = {
    "explain": _cmd_explain,
    "evaluate": _cmd_evaluate,
    "cluster-eval": _cmd_cluster_eval,
    "attr-explain": _cmd_attr_explain,
    "select-pairs": _cmd_select_pairs,
    "benchmark": _cmd_benchmark,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
