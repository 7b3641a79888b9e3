"""promptdistill: compile a teacher model's reasoning into a student system prompt.

The pipeline mines per-example instructions from a teacher over a labeled
train split, clusters them by embedding density, consolidates each cluster
into one rule, repairs the rule set against training errors in a closed loop,
and evaluates a student zero-shot under the resulting prompt.
"""

from .clustering import (
    Cluster,
    ClusterAssignment,
    ClusteringParams,
    EmbeddedInstruction,
    NOISE,
    cluster_instructions,
    cosine_distance,
    dbscan,
)
from .corpus import (
    Dataset,
    LabeledExample,
    TaskSchema,
    load_dataset,
    sample_few_shot,
    save_dataset,
    split_counts,
)
from .evaluation import (
    ABSTAIN,
    EvalConfig,
    EvalReport,
    Prediction,
    evaluate,
    macro_f1,
    parse_label,
)
from .extraction import MicroInstruction, extract_all, parse_teacher_output, render_extraction_prompt
from .gateway import (
    BackendConfig,
    ChatRequest,
    ChatResponse,
    EmbeddingVector,
    complete,
    embed_batch,
    scripted_chat_backend,
)
from .resolution import (
    ConvergenceState,
    ResolutionConfig,
    ResolutionRound,
    apply_revision,
    partition_errors,
    render_resolution_prompt,
    run_resolution_loop,
)
from .runstore import PipelineConfig, RunManifest, init_run, resume
from .synthesis import (
    ConsolidatedRule,
    InstructionSet,
    RuleBranch,
    parse_synthesis_output,
    render_synthesis_prompt,
    render_system_prompt,
    synthesize_all,
)

__version__ = "0.1.0"

__all__ = [
    "ABSTAIN",
    "BackendConfig",
    "ChatRequest",
    "ChatResponse",
    "Cluster",
    "ClusterAssignment",
    "ClusteringParams",
    "ConsolidatedRule",
    "ConvergenceState",
    "Dataset",
    "EmbeddedInstruction",
    "EmbeddingVector",
    "EvalConfig",
    "EvalReport",
    "InstructionSet",
    "LabeledExample",
    "MicroInstruction",
    "NOISE",
    "PipelineConfig",
    "Prediction",
    "ResolutionConfig",
    "ResolutionRound",
    "RuleBranch",
    "RunManifest",
    "TaskSchema",
    "apply_revision",
    "cluster_instructions",
    "complete",
    "cosine_distance",
    "dbscan",
    "embed_batch",
    "evaluate",
    "extract_all",
    "init_run",
    "load_dataset",
    "macro_f1",
    "parse_label",
    "parse_synthesis_output",
    "parse_teacher_output",
    "partition_errors",
    "render_extraction_prompt",
    "render_resolution_prompt",
    "render_synthesis_prompt",
    "render_system_prompt",
    "resume",
    "run_resolution_loop",
    "sample_few_shot",
    "save_dataset",
    "scripted_chat_backend",
    "split_counts",
    "synthesize_all",
]
