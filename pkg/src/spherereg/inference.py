"""Model comparison and uncertainty quantification for fitted models."""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from .distributions import TransportBase, rotated_residual
from .estimation import (
    Dataset,
    FitConfig,
    FitResult,
    fit_svmf,
    fit_vmf,
    moment_axes,
)
from .exceptions import SphereRegError, ValidationError
from .geometry import ANTIPODAL_TOL
from .simulation import model_from_fit, simulate_responses

__all__ = [
    "BootstrapReport",
    "LOOReport",
    "DiagnosticsBundle",
    "aic",
    "bootstrap_lrt",
    "bootstrap_ci_scales",
    "loo_cv",
    "loo_cv_mse",
    "diagnostics",
]

FAILURE_LIMIT = 0.1


@dataclass(frozen=True)
class BootstrapReport:
    statistic: str
    B: int
    seed: int
    values: tuple = ()
    observed: float | None = None
    p_value: float | None = None
    lower: float | None = None
    upper: float | None = None
    level: float | None = None
    failures: int = 0
    method: str = ""
    messages: tuple = ()

    @property
    def unreliable(self) -> bool:
        return self.failures > FAILURE_LIMIT * self.B

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "B": self.B,
            "seed": self.seed,
            "values": list(self.values),
            "observed": self.observed,
            "p_value": self.p_value,
            "lower": self.lower,
            "upper": self.upper,
            "level": self.level,
            "failures": self.failures,
            "unreliable": self.unreliable,
            "method": self.method,
            "messages": list(self.messages),
        }


def aic(fit: FitResult) -> float:
    return 2.0 * fit.dof - 2.0 * fit.loglik


def _run(fn, tasks: list, n_jobs: int) -> list:
    """Evaluate ``fn`` on each task; results keep task order."""
    if n_jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=n_jobs, mp_context=ctx) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * n_jobs))))


def _resample(data: Dataset, fit: FitResult, seed) -> Dataset:
    y = simulate_responses(model_from_fit(fit), data.xs, data.xe, seed)
    return Dataset(y, data.xs, data.xe, data.weights)


def _lrt_task(args):
    data, null_fit, alt_fit, seed = args
    try:
        d = _resample(data, null_fit, seed)
        v = fit_vmf(d, null_fit.config, init=null_fit)
        s = fit_svmf(d, alt_fit.config, init=alt_fit, init_vmf=v)
        return 2.0 * (s.loglik - v.loglik), None
    except (SphereRegError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def bootstrap_lrt(data: Dataset, config: FitConfig | None = None, B: int = 99, seed: int = 0,
                  *, n_jobs: int = 1, null_fit: FitResult | None = None,
                  alt_fit: FitResult | None = None) -> BootstrapReport:
    """Parametric bootstrap likelihood-ratio test of vMF against SvMF errors.

    The statistic is ``2 (loglik_SvMF - loglik_vMF)``.  Resamples are drawn
    from the fitted vMF model at the observed covariates and both models
    are refitted (warm-started from the observed-data fits).  The p-value
    is ``(1 + #{T_b >= T}) / (B_ok + 1)`` over the successful resamples.
    """
    if B < 1:
        raise ValidationError("B must be at least 1")
    cfg = config or FitConfig()
    null_fit = null_fit or fit_vmf(data, replace(cfg, model="vmf"))
    alt_fit = alt_fit or fit_svmf(data, replace(cfg, model="svmf"), init_vmf=null_fit)
    observed = 2.0 * (alt_fit.loglik - null_fit.loglik)
    seeds = np.random.SeedSequence(seed).spawn(B)
    out = _run(_lrt_task, [(data, null_fit, alt_fit, s) for s in seeds], n_jobs)
    values = [v for v, _ in out if v is not None]
    msgs = [m for _, m in out if m is not None]
    exceed = sum(v >= observed for v in values)
    return BootstrapReport(
        statistic="lrt",
        B=B,
        seed=seed,
        values=tuple(values),
        observed=observed,
        p_value=(1.0 + exceed) / (len(values) + 1.0),
        failures=B - len(values),
        method="parametric bootstrap, add-one p-value",
        messages=tuple(msgs),
    )


def _ci_task(args):
    data, fit, seed = args
    try:
        d = _resample(data, fit, seed)
        f = fit_svmf(d, fit.config, init=fit)
        return np.asarray(f.error.scales[1:]), None
    except (SphereRegError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def bootstrap_ci_scales(fit: FitResult, data: Dataset, B: int = 199, level: float = 0.95,
                        seed: int = 0, *, n_jobs: int = 1) -> list[BootstrapReport]:
    """Percentile intervals for the scales ``a_2..a_p`` by parametric bootstrap."""
    if fit.model != "svmf":
        raise ValidationError("scale intervals need an SvMF fit")
    if B < 1:
        raise ValidationError("B must be at least 1")
    if not 0.0 <= level < 1.0:
        raise ValidationError("level must lie in [0, 1)")
    seeds = np.random.SeedSequence(seed).spawn(B)
    out = _run(_ci_task, [(data, fit, s) for s in seeds], n_jobs)
    good = [v for v, _ in out if v is not None]
    msgs = tuple(m for _, m in out if m is not None)
    draws = np.array(good).reshape(len(good), -1)
    reports = []
    lo_q, hi_q = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    for j in range(fit.error.p - 1):
        col = draws[:, j] if len(good) else np.array([])
        lo = hi = None
        if col.size:
            lo, hi = (float(x) for x in np.quantile(col, [lo_q, hi_q]))
        reports.append(BootstrapReport(
            statistic=f"a{j + 2}",
            B=B,
            seed=seed,
            values=tuple(float(x) for x in col),
            observed=float(fit.error.scales[j + 1]),
            lower=lo,
            upper=hi,
            level=level,
            failures=B - len(good),
            method="parametric bootstrap, percentile interval",
            messages=msgs,
        ))
    return reports


@dataclass(frozen=True)
class LOOReport:
    mse: float
    errors: NDArray
    skipped: tuple = ()
    messages: tuple = ()


def _loo_task(args):
    data, full, i = args
    w = data.w.copy()
    w[i] = 0.0
    try:
        d = data.with_weights(w)
        if full.model == "svmf":
            f = fit_svmf(d, full.config, init=full)
        else:
            f = fit_vmf(d, full.config, init=full)
        xs = None if data.xs is None else data.xs[i]
        xe = None if data.xe is None else data.xe[i]
        mu = f.predict(xs, xe)
        return float(np.sum((data.y[i] - mu) ** 2)), None
    except (SphereRegError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return None, f"case {i}: {type(exc).__name__}: {exc}"


def loo_cv(data: Dataset, config: FitConfig | None = None, *, fit: FitResult | None = None,
           n_jobs: int = 1) -> LOOReport:
    """Leave-one-out squared chordal prediction error of the mean link.

    Each case is dropped by giving it zero weight and the model is refitted
    from the full-data fit.  Failed refits are skipped and listed.
    """
    cfg = config or FitConfig()
    if fit is None:
        fit = fit_svmf(data, cfg) if cfg.model == "svmf" else fit_vmf(data, cfg)
    out = _run(_loo_task, [(data, fit, i) for i in range(data.n)], n_jobs)
    errors = np.array([np.nan if v is None else v for v, _ in out])
    skipped = tuple(i for i, (v, _) in enumerate(out) if v is None)
    ok = ~np.isnan(errors)
    if not ok.any():
        raise ValidationError("every leave-one-out refit failed")
    return LOOReport(float(np.mean(errors[ok])), errors, skipped,
                     tuple(m for _, m in out if m is not None))


def loo_cv_mse(data: Dataset, config: FitConfig | None = None, **kwargs) -> float:
    return loo_cv(data, config, **kwargs).mse


@dataclass(frozen=True)
class DiagnosticsBundle:
    """Rotated residuals at the base location and their scaled distances."""

    gamma01: NDArray
    axes: NDArray
    rotated_residuals: NDArray
    axis_components: NDArray
    scaled_distance: NDArray
    predicted_means: NDArray
    flagged: NDArray = field(default_factory=lambda: np.zeros(0, dtype=int))


def diagnostics(fit: FitResult, data: Dataset) -> DiagnosticsBundle:
    """Rotated residuals, their components on the fitted axes and scaled distances.

    For a vMF fit the residuals are carried to the sample mean direction
    and expressed on their own principal axes with unit scales.
    """
    mu = np.atleast_2d(fit.predict(data.xs, data.xe))
    if fit.base is not None:
        base = fit.base
        scales = fit.error.scales[1:]
    else:
        m = data.w @ data.y
        g = m / np.linalg.norm(m)
        base = TransportBase(g, moment_axes(data.y, mu, g, data.w).axes)
        scales = np.ones(data.p - 1)
    g = base.gamma01
    flagged = np.flatnonzero(1.0 + mu @ g <= ANTIPODAL_TOL)
    v = np.full(data.y.shape, np.nan)
    ok = np.ones(data.n, dtype=bool)
    ok[flagged] = False
    v[ok] = rotated_residual(data.y[ok], mu[ok], g)
    # remove rounding drift off the tangent space
    v[ok] -= np.outer(v[ok] @ g, g)
    comps = v @ base.axes
    dist = np.linalg.norm(comps / scales, axis=1)
    return DiagnosticsBundle(g, base.axes, v, comps, dist, mu, flagged)
