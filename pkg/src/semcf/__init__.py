"""Counterfactual explanation search over spatial feature grids.

Given exported feature grids of a query image and distractor images of a
confusable class, the engine greedily replaces single grid cells until the
decision head predicts the distractor class, weighting candidate edits by
a semantic-consistency likelihood computed in an auxiliary embedding
space. Evaluation utilities score traces against keypoint annotations and
decompose the decision into part-attribute contributions.
"""

from .attributes import (
    AttributeBank,
    AttributeImportance,
    PartProbGrid,
    attribute_importance,
    denoise_attributes,
    detect_parts_topk,
    discriminative_attributes,
    ibd_decompose,
    top1_discriminative_accuracy,
)
from .bundle import (
    Bundle,
    ImageRecord,
    TraceDocument,
    load_bundle,
    load_trace,
    save_bundle,
    save_trace,
)
from .errors import DataError, NoCandidatesError
from .grids import EmbeddingGrid, FeatureGrid, gap, pairwise_dot, stable_softmax
from .heads import Candidate, DecisionHead, apply_edit, head_forward, score_candidates
from .metrics import (
    Keypoint,
    KeypointSet,
    MetricsReport,
    PartGrid,
    aggregate_report,
    clustering_accuracy,
    foreground_fraction,
    format_report,
    near_kp,
    project_keypoints,
    same_kp,
    select_distractor_class,
    select_distractor_class_by_attributes,
)
from .search import (
    Edit,
    EditTrace,
    SearchCase,
    SearchConfig,
    SearchStats,
    find_counterfactual,
    oracle_best_edit,
    single_best_edit,
)
from .semantic import (
    ClusterAssignment,
    KMeansResult,
    SimilarityTable,
    cluster_embeddings,
    hard_constraint_candidates,
    kmeans_cells,
    prefilter_topk,
    similarity_table,
)

__version__ = "0.1.0"
