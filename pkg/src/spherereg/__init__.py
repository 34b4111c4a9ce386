"""Regression models for responses on the unit sphere."""

from __future__ import annotations

from . import io
from .distributions import (
    OrientationFrame,
    SvMFParams,
    TransportBase,
    axes_at,
    sample_svmf,
    sample_vmf,
    svmf_log_density,
    vmf_log_density,
    vmf_log_norm_const,
)
from .estimation import (
    Dataset,
    FitConfig,
    FitResult,
    TransformRecord,
    count_dof,
    default_init,
    fit,
    fit_kappa,
    fit_svmf,
    fit_vmf,
    moment_axes,
    multistart_fit,
    preliminary_transform,
)
from .exceptions import (
    AntipodalError,
    ConvergenceError,
    DegenerateError,
    DomainError,
    PoleError,
    SphereRegError,
    ValidationError,
)
from .inference import (
    BootstrapReport,
    DiagnosticsBundle,
    LOOReport,
    aic,
    bootstrap_ci_scales,
    bootstrap_lrt,
    diagnostics,
    loo_cv,
    loo_cv_mse,
)
from .link import (
    LinkParams,
    ReparamLink,
    from_reparam,
    link_eval,
    link_eval_reparam,
    random_link_params,
    to_reparam,
)
from .simulation import Model, generate_covariates, model_from_fit, simulate_responses

__version__ = "0.1.0"

__all__ = [
    "io",
    "OrientationFrame",
    "SvMFParams",
    "TransportBase",
    "axes_at",
    "sample_svmf",
    "sample_vmf",
    "svmf_log_density",
    "vmf_log_density",
    "vmf_log_norm_const",
    "Dataset",
    "FitConfig",
    "FitResult",
    "TransformRecord",
    "count_dof",
    "default_init",
    "fit",
    "fit_kappa",
    "fit_svmf",
    "fit_vmf",
    "moment_axes",
    "multistart_fit",
    "preliminary_transform",
    "AntipodalError",
    "ConvergenceError",
    "DegenerateError",
    "DomainError",
    "PoleError",
    "SphereRegError",
    "ValidationError",
    "BootstrapReport",
    "DiagnosticsBundle",
    "LOOReport",
    "aic",
    "bootstrap_ci_scales",
    "bootstrap_lrt",
    "diagnostics",
    "loo_cv",
    "loo_cv_mse",
    "LinkParams",
    "ReparamLink",
    "from_reparam",
    "link_eval",
    "link_eval_reparam",
    "random_link_params",
    "to_reparam",
    "Model",
    "generate_covariates",
    "model_from_fit",
    "simulate_responses",
]
