"""Multispecies re-identification evaluation and retrieval engine.

Pipeline: annotation catalogs -> identity-aware train/test splits ->
embedding stores -> exact cosine top-k retrieval -> one-vs-all rank-k
evaluation, plus the sub-center ArcFace / GeM numerical kernel and a
desk-scale toy trainer that exercises the whole chain.
"""

__version__ = "0.1.0"

from .catalog import (
    Annotation,
    Catalog,
    IdentityKey,
    SpeciesPolicy,
    catalog_stats,
    derive_identity,
    parse_manifest,
)
from .splitter import SplitAssignment, SplitConfig, assign_split, split_report
from .store import (
    EmbeddingStore,
    RankedMatches,
    build_store,
    pairwise_eval_distances,
    read_embeddings,
    topk,
    topk_capped,
    write_embeddings,
)
from .evaluator import (
    EvalConfig,
    EvalReport,
    SpeciesEval,
    compare_reports,
    curve_by_cap,
    one_vs_all,
)
from .arcface import (
    ArcHead,
    GemPool,
    LrSchedule,
    MarginPolicy,
    arcface_backward,
    arcface_forward,
    dynamic_margins,
    gem_pool,
    lr_at,
)
from .toy import ToyDataset, ToyModel, make_cluster_dataset, toy_train
