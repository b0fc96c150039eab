"""Cross-lingual transfer by structure-adaptive adapter merging."""

from .adapters import (
    AdapterMeta,
    AdapterSet,
    CompatibilityReport,
    Ia3Layer,
    LoraLayer,
    PrefixLayer,
    compose_delta,
    validate_merge_inputs,
)
from .checkpoint import inspect, read_checkpoint, write_checkpoint
from .errors import (
    ErrorCode,
    FormatError,
    NumericError,
    ShapeError,
    SvdConvergenceError,
    SweepError,
    ValidationError,
    XLMergeError,
)
from .merge import MergeConfig, diverge, diverge_lora, merge, merge_ia3, merge_lora, merge_prefix
from .synthetic import ExperimentReport, SyntheticSpec, fit_adapter, generate_world, run_experiment
from .tuning import SweepPlan, SweepResult, sweep_t

__version__ = "0.1.0"
