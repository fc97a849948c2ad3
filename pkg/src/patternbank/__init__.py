"""patternbank: an experience-pattern repository engine.

Stores dual-form patterns (skills and subagent specs), retrieves them for
incoming tasks with hybrid lexical/semantic search plus MMR diversification,
tracks retrieval/utilization/success counters per pattern, extracts new
patterns from batched trajectories via pluggable providers, and maintains the
repository by utility scoring, percentile pruning, and similarity-gated
merging. A deterministic simulation harness and CLI drive the whole loop
offline.
"""

from .core import (
    DelegationRule,
    DuplicateIdError,
    EngineConfig,
    InvalidConfigError,
    InvariantViolationError,
    Pattern,
    PatternBankError,
    PatternKind,
    PatternMetadata,
    Repository,
    SkillBody,
    SkillForm,
    SubagentBody,
    ToolCall,
    ToolDeclaration,
    TrajectoryRecord,
    TrajectoryStep,
    new_repository,
    seed_patterns,
)
from .embedding import HashFeatureEmbedder, cosine, default_embedder
from .extraction import (
    ClassificationFeatures,
    ExtractionProviderError,
    PatternDraft,
    classify,
    extract_and_install,
    extraction_due,
    recent_batch,
)
from .lifecycle import (
    MaintenanceReport,
    MergeVerdict,
    agglomerative_merge,
    maintenance_due,
    merge_candidates,
    merge_pair,
    prune,
    run_maintenance,
    utility_score,
)
from .persistence import load, replay, save, state_digest
from .retrieval import RankedHit, bm25_score, max_query_sim, mmr_select, retrieve, rrf_fuse
from .tracking import ExecutionContext, IntegrationPlan, begin_task, finish_task, match_score

__version__ = "0.1.0"

__all__ = [
    "ClassificationFeatures",
    "DelegationRule",
    "DuplicateIdError",
    "EngineConfig",
    "ExecutionContext",
    "ExtractionProviderError",
    "HashFeatureEmbedder",
    "IntegrationPlan",
    "InvalidConfigError",
    "InvariantViolationError",
    "MaintenanceReport",
    "MergeVerdict",
    "Pattern",
    "PatternBankError",
    "PatternDraft",
    "PatternKind",
    "PatternMetadata",
    "RankedHit",
    "Repository",
    "SkillBody",
    "SkillForm",
    "SubagentBody",
    "ToolCall",
    "ToolDeclaration",
    "TrajectoryRecord",
    "TrajectoryStep",
    "agglomerative_merge",
    "begin_task",
    "bm25_score",
    "classify",
    "cosine",
    "default_embedder",
    "extract_and_install",
    "extraction_due",
    "finish_task",
    "load",
    "maintenance_due",
    "match_score",
    "max_query_sim",
    "merge_candidates",
    "merge_pair",
    "mmr_select",
    "new_repository",
    "prune",
    "recent_batch",
    "replay",
    "retrieve",
    "rrf_fuse",
    "run_maintenance",
    "save",
    "seed_patterns",
    "state_digest",
    "utility_score",
]
