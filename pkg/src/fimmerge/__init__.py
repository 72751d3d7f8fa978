"""Fisher-guided layer-adaptive model merging toolkit."""

__version__ = "0.1.0"

from .alphas import (
    AlphaAssignment,
    ImportanceSignal,
    assign_alphas,
    build_signal,
    delta_layer_norms,
)
from .archive import ArchiveError, TensorArchive, archive_digest, load_archive, write_archive
from .fim import FimSchemaError, FimScores, estimate_fim, export_fim, import_fim, reduce_per_layer
from .merge import MergePlan, merge, norm_calibrate, task_vector, trim_task_vector
from .micromodel import (
    MicroModel,
    MicroModelConfig,
    TrainingDiverged,
    make_micro_pair,
    sample_uniform_tokens,
    train_to_convergence,
)
from .numerics import pearson, spearman, spectral_norm
from .theory import (
    BoundCheckResult,
    NlRecord,
    fisher_hessian_check,
    hessian_bound,
    merging_error,
    nl_analysis,
    nl_score,
    quadratic_coefficient_check,
    softmax_toy_check,
    verify_bound,
)
from .topology import ModelTopology, NamingScheme, parse_topology

__all__ = [
    "AlphaAssignment",
    "ArchiveError",
    "BoundCheckResult",
    "FimSchemaError",
    "FimScores",
    "ImportanceSignal",
    "MergePlan",
    "MicroModel",
    "MicroModelConfig",
    "ModelTopology",
    "NamingScheme",
    "NlRecord",
    "TensorArchive",
    "TrainingDiverged",
    "archive_digest",
    "assign_alphas",
    "build_signal",
    "delta_layer_norms",
    "estimate_fim",
    "export_fim",
    "fisher_hessian_check",
    "hessian_bound",
    "import_fim",
    "load_archive",
    "make_micro_pair",
    "merge",
    "merging_error",
    "nl_analysis",
    "nl_score",
    "norm_calibrate",
    "parse_topology",
    "pearson",
    "quadratic_coefficient_check",
    "reduce_per_layer",
    "sample_uniform_tokens",
    "softmax_toy_check",
    "spearman",
    "spectral_norm",
    "task_vector",
    "train_to_convergence",
    "trim_task_vector",
    "verify_bound",
    "write_archive",
]
