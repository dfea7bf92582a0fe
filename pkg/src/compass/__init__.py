"""Trace triage engine for agentic workflows.

Parses execution traces, runs a four-stage plan-and-execute analysis over a
pluggable model backend, classifies failures against a hierarchical error
taxonomy, clusters recurring errors across traces into trackable issues,
keeps episodic/semantic memory between runs, and evaluates predictions
against annotated ground truth.
"""

from compass.backend import (
    BackendConfig,
    ChatRequest,
    ChatResult,
    EmbedderConfig,
    Vector,
    chat_complete,
    embed,
    hash_embed,
    scripted_backend,
)
from compass.clustering import (
    ClusteringResult,
    ClusterParams,
    Issue,
    emit_issues,
    featurize_finding,
    hdbscan,
    soft_assign_noise,
)
from compass.evaluation import (
    GroundTruth,
    MatchResult,
    MetricsReport,
    categorization_f1,
    evaluate_run,
    joint_score,
    load_ground_truth,
    localization_accuracy,
    match_predictions,
    pearson,
)
from compass.memory import (
    EpisodicEntry,
    MemoryContext,
    MemoryStore,
    PromotionRules,
    SemanticPattern,
    promote,
    record_episodic,
    retrieve_context,
)
from compass.pipeline import (
    AnalysisReport,
    ErrorFinding,
    PipelineConfig,
    PipelineParams,
    QualityScorecard,
    StagePlan,
    ThemeGroup,
    aggregate_and_prioritize,
    execute_stage,
    plan_stage,
    run_pipeline,
)
from compass.synth import FaultSpec, TraceShape, generate_trace
from compass.taxonomy import (
    ErrorTypeId,
    Taxonomy,
    TaxonomyMapping,
    load_mapping,
    load_taxonomy,
    map_to_external,
    resolve_error_type,
    validate_mapping,
)
from compass.trace_model import (
    OutlineDocument,
    SpanRecord,
    TraceTree,
    build_trace_tree,
    parse_trace_file,
    serialize_outline,
)

__version__ = "0.1.0"

__all__ = [
    "AnalysisReport",
    "BackendConfig",
    "ChatRequest",
    "ChatResult",
    "ClusterParams",
    "ClusteringResult",
    "EmbedderConfig",
    "EpisodicEntry",
    "ErrorFinding",
    "ErrorTypeId",
    "FaultSpec",
    "GroundTruth",
    "Issue",
    "MatchResult",
    "MemoryContext",
    "MemoryStore",
    "MetricsReport",
    "OutlineDocument",
    "PipelineConfig",
    "PipelineParams",
    "PromotionRules",
    "QualityScorecard",
    "SemanticPattern",
    "SpanRecord",
    "StagePlan",
    "Taxonomy",
    "TaxonomyMapping",
    "ThemeGroup",
    "TraceShape",
    "TraceTree",
    "Vector",
    "aggregate_and_prioritize",
    "categorization_f1",
    "chat_complete",
    "embed",
    "emit_issues",
    "evaluate_run",
    "execute_stage",
    "featurize_finding",
    "generate_trace",
    "hash_embed",
    "hdbscan",
    "joint_score",
    "load_ground_truth",
    "load_mapping",
    "load_taxonomy",
    "localization_accuracy",
    "map_to_external",
    "match_predictions",
    "pearson",
    "plan_stage",
    "promote",
    "record_episodic",
    "resolve_error_type",
    "retrieve_context",
    "run_pipeline",
    "scripted_backend",
    "serialize_outline",
    "soft_assign_noise",
    "validate_mapping",
    "parse_trace_file",
    "build_trace_tree",
]
