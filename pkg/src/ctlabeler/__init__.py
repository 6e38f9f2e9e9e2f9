"""Structured abnormality labeling of abdominal CT reports via chat models.

The package turns free-text radiology reports into per-organ, per-finding
labels (presence certainty plus urgency) through a staged sequence of chat
prompts, and evaluates those labels against human annotations.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ContextOverflowError,
    CtLabelerError,
    DataFormatError,
    DegenerateInputError,
    DuplicateReportIdError,
    EmptyReportError,
    ExhaustedRetriesError,
    GatewayError,
    MalformedResponseError,
    PipelineCellError,
    TransientBackendError,
    UnknownTranscriptIdError,
    UnparseableSummaryError,
)
from .schema import (
    AblationFlag,
    FindingType,
    LlmConfig,
    Organ,
    OrganFindingLabel,
    Report,
    UncertaintyCategory,
    UrgencyLevel,
    split_sentences,
)
from .gateway import (
    ChatExchange,
    HttpChatBackend,
    ScriptedBackend,
    TranscriptStore,
    chat,
)
from .prompts import TemplateSet, default_templates
from .pipeline import CellFailure, Labeler, PipelineRun
from .labels_io import (
    ANY_ABNORMALITY_KEYS,
    SUPERVISION_KEYS,
    AnnotatorRecord,
    SupervisionLabel,
    any_abnormality,
    join_organs,
    merge_supervision_targets,
    read_annotations,
    read_labels,
    read_reports,
    write_annotations,
    write_labels,
    write_reports,
    write_supervision,
)
from .evaluation import (
    BootstrapResult,
    ConfusionCounts,
    EvalCell,
    EvalReport,
    GroundTruthCell,
    MetricsRow,
    UrgencyRow,
    bootstrap_ci,
    build_ground_truth,
    confusion_counts,
    evaluate_labels,
    f1_from_vectors,
    kendall_tau_b,
    macro_aggregate,
    majority_vote,
    micro_aggregate,
    min_positive_filter,
    paired_bootstrap,
    prevalence_table,
)
from .scripting import CellPlan, PlannedFinding, ScriptBuilder, build_demo_corpus

__all__ = [
    "__version__",
    # errors
    "CtLabelerError",
    "EmptyReportError",
    "DuplicateReportIdError",
    "DataFormatError",
    "GatewayError",
    "TransientBackendError",
    "ExhaustedRetriesError",
    "MalformedResponseError",
    "ContextOverflowError",
    "UnknownTranscriptIdError",
    "UnparseableSummaryError",
    "PipelineCellError",
    "CheckpointError",
    "DegenerateInputError",
    # schema
    "Organ",
    "FindingType",
    "UncertaintyCategory",
    "UrgencyLevel",
    "AblationFlag",
    "Report",
    "OrganFindingLabel",
    "LlmConfig",
    "split_sentences",
    # gateway
    "ChatExchange",
    "HttpChatBackend",
    "ScriptedBackend",
    "TranscriptStore",
    "chat",
    # prompts
    "TemplateSet",
    "default_templates",
    # pipeline
    "Labeler",
    "PipelineRun",
    "CellFailure",
    # labels io
    "AnnotatorRecord",
    "SupervisionLabel",
    "SUPERVISION_KEYS",
    "ANY_ABNORMALITY_KEYS",
    "merge_supervision_targets",
    "any_abnormality",
    "join_organs",
    "read_reports",
    "write_reports",
    "read_labels",
    "write_labels",
    "read_annotations",
    "write_annotations",
    "write_supervision",
    # evaluation
    "ConfusionCounts",
    "EvalCell",
    "EvalReport",
    "GroundTruthCell",
    "MetricsRow",
    "UrgencyRow",
    "BootstrapResult",
    "confusion_counts",
    "f1_from_vectors",
    "micro_aggregate",
    "macro_aggregate",
    "min_positive_filter",
    "majority_vote",
    "build_ground_truth",
    "kendall_tau_b",
    "paired_bootstrap",
    "bootstrap_ci",
    "prevalence_table",
    "evaluate_labels",
    # scripting
    "ScriptBuilder",
    "CellPlan",
    "PlannedFinding",
    "build_demo_corpus",
]
