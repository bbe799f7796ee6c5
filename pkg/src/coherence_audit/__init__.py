"""Coherence auditing of black-box predictors under matched perturbations."""

from .errors import AdapterError, AuditError, AuditIOError, BootstrapError, ValidationError
from .metrics import (
    DEFAULT_GRID,
    MetricKind,
    QuantileGrid,
    ResponseProfile,
    compute_metric,
    contrast,
    qbm,
    ti_wcm,
    wcm,
)
from .stats import BootstrapConfig, auroc, bootstrap_ci

__all__ = [
    "AdapterError", "AuditError", "AuditIOError", "BootstrapError", "ValidationError",
    "DEFAULT_GRID", "MetricKind", "QuantileGrid", "ResponseProfile", "compute_metric",
    "contrast", "qbm", "ti_wcm", "wcm", "BootstrapConfig", "auroc", "bootstrap_ci",
]
