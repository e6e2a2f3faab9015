"""Micro-expression action unit detection with landmark-guided patch-token
attention, AU dependency modeling, multi-label contrastive training, and
zero-shot emotion recognition."""

__version__ = "0.1.0"

from .core import (
    AUTaskSpec,
    Config,
    ConfigError,
    FlowField,
    MicroAUError,
    Sample,
    TaskSpecError,
    TokenGrid,
    default_task_spec,
    load_config,
    load_task_spec,
    validate_task_spec,
)

__all__ = [
    "AUTaskSpec",
    "Config",
    "ConfigError",
    "FlowField",
    "MicroAUError",
    "Sample",
    "TaskSpecError",
    "TokenGrid",
    "default_task_spec",
    "load_config",
    "load_task_spec",
    "validate_task_spec",
    "__version__",
]
