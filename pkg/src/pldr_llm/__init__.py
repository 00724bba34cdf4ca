"""PLDR-LLM: decoder-only language model built on power law graph attention."""

from .config import (
    AttentionConfig,
    DagCoefficients,
    DataConfig,
    GenerationParams,
    ModelConfig,
    OptimizerConfig,
    RunConfig,
    TelemetryConfig,
)
from .dag import DagReport, dag_inference_report, dag_loss, dag_regularizer
from .model import DeductiveOutputs, ForwardResult, PLDRModel, param_count

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "DagCoefficients",
    "DagReport",
    "DataConfig",
    "DeductiveOutputs",
    "ForwardResult",
    "GenerationParams",
    "ModelConfig",
    "OptimizerConfig",
    "PLDRModel",
    "RunConfig",
    "TelemetryConfig",
    "dag_inference_report",
    "dag_loss",
    "dag_regularizer",
    "param_count",
]
