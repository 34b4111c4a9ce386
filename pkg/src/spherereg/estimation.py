"""Maximum-likelihood fitting of the spherical regression model.

The pipeline is: a preliminary rotation of the data to a well-conditioned
working frame, a fit of the mean link by maximising ``sum_i y_i^T mu(x_i)``,
the concentration by a one-dimensional score equation, moment estimates of
the SvMF axes and scales, and finally a joint constrained fit of every
parameter.  All optimisation happens in the working frame; results are
reported in the original coordinates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize

from . import _objective as jo
from .distributions import (
    SvMFParams,
    TransportBase,
    as_generator,
    axes_at,
    rotated_residual,
    vmf_log_norm_const,
    vmf_mean_resultant,
)
from .exceptions import AntipodalError, ConvergenceError, ValidationError
from .geometry import amaral_rotation, cayley, gram_schmidt, skew_from_params, transport_matrix
from .link import (
    LinkParams,
    ReparamLink,
    canonicalize,
    commutator_residual,
    from_reparam,
    link_eval_reparam,
    proj_constraint,
    to_reparam,
)

__all__ = [
    "Dataset",
    "TransformRecord",
    "FitConfig",
    "FitResult",
    "MomentAxes",
    "ObjectivePoint",
    "preliminary_transform",
    "default_init",
    "fit",
    "fit_vmf",
    "fit_svmf",
    "fit_kappa",
    "moment_axes",
    "count_dof",
    "multistart_fit",
    "objective_point",
    "loglik_gradient",
]

UNIT_TOL = 1e-8
KAPPA_CEILING = 1e7
_PAD = 32


def _e1(p: int) -> NDArray:
    e = np.zeros(p)
    e[0] = 1.0
    return e


def _readonly(a):
    if a is not None:
        a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Data containers


@dataclass(frozen=True)
class Dataset:
    """Responses ``y`` (n x p) with optional covariates and case weights."""

    y: NDArray
    xs: NDArray | None = None
    xe: NDArray | None = None
    weights: NDArray | None = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] < 2:
            raise ValidationError("responses must be an n x p array with n >= 1, p >= 2")
        n = y.shape[0]
        out = {"y": y}
        for name in ("xs", "xe"):
            v = getattr(self, name)
            if v is None or np.size(v) == 0:
                out[name] = None
                continue
            v = np.array(v, dtype=float)
            if v.ndim == 1:
                v = v[:, None]
            if v.shape[0] != n:
                raise ValidationError(f"{name} has {v.shape[0]} rows, expected {n}")
            out[name] = v
        if out["xs"] is None and out["xe"] is None:
            raise ValidationError("at least one covariate block is required")
        for name in ("y", "xs"):
            v = out[name]
            if v is not None:
                if not np.all(np.isfinite(v)):
                    raise ValidationError(f"{name} contains non-finite values")
                dev = np.max(np.abs(np.linalg.norm(v, axis=1) - 1.0))
                if dev > UNIT_TOL:
                    raise ValidationError(f"{name} rows must be unit vectors (max deviation {dev:.3g})")
        if out["xe"] is not None and not np.all(np.isfinite(out["xe"])):
            raise ValidationError("xe contains non-finite values")
        w = None
        if self.weights is not None:
            w = np.array(self.weights, dtype=float).reshape(-1)
            if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValidationError("weights must be n finite nonnegative numbers")
            if w.sum() <= 0:
                raise ValidationError("weights must not all be zero")
        out["weights"] = w
        for k, v in out.items():
            object.__setattr__(self, k, _readonly(v))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def q_s(self) -> int:
        return 0 if self.xs is None else self.xs.shape[1]

    @property
    def q_e(self) -> int:
        return 0 if self.xe is None else self.xe.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.p, self.q_s, self.q_e)

    @property
    def w(self) -> NDArray:
        return np.ones(self.n) if self.weights is None else self.weights

    def with_weights(self, weights) -> Dataset:
        return replace(self, weights=weights)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.y[idx], pick(self.xs), pick(self.xe), pick(self.weights))


def _mean_direction(x: NDArray, w: NDArray) -> NDArray | None:
    m = w @ x
    norm = np.linalg.norm(m)
    if norm <= 1e-12 * w.sum():
        return None
    return m / norm


def _rotation_to_e1(m: NDArray) -> NDArray:
    """Rotation ``Q`` with ``Q m = e1``."""
    p = m.shape[0]
    try:
        return amaral_rotation(_e1(p), m)
    except AntipodalError:
        Q = np.eye(p)
        Q[0, 0] = Q[1, 1] = -1.0
        return Q


@dataclass(frozen=True)
class TransformRecord:
    """Linear maps from original to working coordinates.

    ``y_w = Qy y``, ``xs_w = Qs xs`` and ``xe_w = L xe``.  When the
    Euclidean covariates include a constant column, ``L`` also centres the
    other columns (exact on any input whose constant column keeps its value).
    """

    Qy: NDArray
    Qs: NDArray | None = None
    L: NDArray | None = None
    center: NDArray | None = None
    flags: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("Qy", "Qs", "L", "center"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _readonly(np.array(v, dtype=float)))

    @classmethod
    def identity(cls, dims) -> TransformRecord:
        p, q_s, q_e = dims
        return cls(
            np.eye(p),
            np.eye(q_s) if q_s else None,
            np.eye(q_e) if q_e else None,
            np.zeros(q_e) if q_e else None,
            {},
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return (
            self.Qy.shape[0],
            0 if self.Qs is None else self.Qs.shape[0],
            0 if self.L is None else self.L.shape[0],
        )

    def covariates(self, xs=None, xe=None):
        xs_w = None if xs is None else np.asarray(xs, dtype=float) @ self.Qs.T
        xe_w = None if xe is None else np.asarray(xe, dtype=float) @ self.L.T
        return xs_w, xe_w

    def apply(self, data: Dataset) -> Dataset:
        xs, xe = self.covariates(data.xs, data.xe)
        return Dataset(data.y @ self.Qy.T, xs, xe, data.weights)

    def invert(self, data: Dataset) -> Dataset:
        xs = None if data.xs is None else data.xs @ self.Qs
        xe = None if data.xe is None else np.linalg.solve(self.L, data.xe.T).T
        return Dataset(data.y @ self.Qy, xs, xe, data.weights)

    def link_to_original(self, rp: ReparamLink) -> ReparamLink:
        blocks = []
        if rp.q_s:
            blocks.append(rp.Omega_s @ self.Qs)
        if rp.q_e:
            blocks.append(rp.Omega_e @ self.L)
        return ReparamLink(
            b01=self.Qy.T @ rp.b01,
            rs1=None if rp.rs1 is None else self.Qs.T @ rp.rs1,
            Omega=self.Qy.T @ np.hstack(blocks),
            q_s=rp.q_s,
            q_e=rp.q_e,
        )

    def link_to_working(self, rp: ReparamLink) -> ReparamLink:
        blocks = []
        if rp.q_s:
            blocks.append(rp.Omega_s @ self.Qs.T)
        if rp.q_e:
            blocks.append(np.linalg.solve(self.L.T, rp.Omega_e.T).T)
        b01 = self.Qy @ rp.b01
        rs1 = None if rp.rs1 is None else self.Qs @ rp.rs1
        return ReparamLink(
            b01=b01 / np.linalg.norm(b01),
            rs1=None if rs1 is None else rs1 / np.linalg.norm(rs1),
            Omega=self.Qy @ np.hstack(blocks),
            q_s=rp.q_s,
            q_e=rp.q_e,
        )

    def base_to_original(self, base: TransportBase) -> TransportBase:
        return TransportBase(self.Qy.T @ base.gamma01, self.Qy.T @ base.axes)

    def base_to_working(self, base: TransportBase) -> TransportBase:
        return TransportBase(self.Qy @ base.gamma01, self.Qy @ base.axes)


def _euclidean_map(xe: NDArray, w: NDArray, allow_center: bool):
    q = xe.shape[1]
    W = w.sum()
    mean = w @ xe / W
    spread = np.sqrt(w @ (xe - mean) ** 2 / W)
    const = spread <= 1e-12 * (1.0 + np.abs(mean))
    intercept = next((j for j in range(q) if const[j] and abs(mean[j]) > 1e-12), None)
    nc = np.flatnonzero(~const)
    center = np.zeros(q)
    centered = allow_center and intercept is not None and nc.size > 0
    if centered:
        center[nc] = mean[nc]
    Z = xe[:, nc] - (mean[nc] if intercept is not None else 0.0)
    Ve = np.eye(q)
    if nc.size > 1:
        S = (Z * w[:, None]).T @ Z / W
        vals, vecs = np.linalg.eigh(S)
        vecs = vecs[:, np.argsort(vals)[::-1]]
        sign = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(nc.size)])
        vecs = vecs * sign
        Ve[np.ix_(nc, nc)] = vecs.T
    L = Ve.copy()
    if centered:
        L = Ve @ (np.eye(q) - np.outer(center, _unit_vec(q, intercept)) / mean[intercept])
    return L, center, {"euclidean_centered": centered, "euclidean_rotated": nc.size > 1}


def _unit_vec(q, j):
    e = np.zeros(q)
    e[j] = 1.0
    return e


def preliminary_transform(data: Dataset) -> tuple[Dataset, TransformRecord]:
    """Rotate responses and spherical covariates so their mean directions are e1.

    Non-constant Euclidean covariates are rotated to their principal axes,
    and centred when a constant (intercept) column is present and there
    are no spherical covariates.  With spherical covariates present the
    centring is skipped, since a shift would not preserve the commutator
    constraint of the link.
    """
    if data.n < data.p:
        raise ValidationError("need at least p observations")
    w = data.w
    flags = {}
    m = _mean_direction(data.y, w)
    flags["response_rotated"] = m is not None
    Qy = np.eye(data.p) if m is None else _rotation_to_e1(m)
    Qs = None
    if data.q_s:
        ms = _mean_direction(data.xs, w)
        flags["spherical_rotated"] = ms is not None
        Qs = np.eye(data.q_s) if ms is None else _rotation_to_e1(ms)
    L = center = None
    if data.q_e:
        L, center, f = _euclidean_map(data.xe, w, allow_center=data.q_s == 0)
        flags.update(f)
    record = TransformRecord(Qy, Qs, L, center, flags)
    return record.apply(data), record


def default_init(dims) -> LinkParams:
    """``B0 = I``, ``Bs = Be = 0.9 I``, ``Rs = (I_p, 0)^T``, ``Re = (I_{p-1}, 0)^T``."""
    p, q_s, q_e = dims
    return LinkParams(
        B0=np.eye(p),
        bs=np.full(p - 1, 0.9) if q_s else np.zeros(p - 1),
        be=np.full(p - 1, 0.9) if q_e else np.zeros(p - 1),
        Rs=np.eye(q_s, p) if q_s else None,
        Re=np.eye(q_e, p - 1) if q_e else None,
    )


@dataclass(frozen=True)
class FitConfig:
    model: str = "svmf"
    a1: float = 1.0
    gamma01: str = "estimated"
    ftol: float = 1e-12
    ctol: float = 1e-8
    gtol: float = 1e-6
    max_iter: int = 2000
    n_starts: int = 1
    seed: int = 0
    perturb_sd: float = 0.3
    kappa_ceiling: float = KAPPA_CEILING
    transform: bool = True

    def __post_init__(self):
        if self.model not in ("vmf", "svmf"):
            raise ValidationError("model must be 'vmf' or 'svmf'")
        if self.gamma01 not in jo.GAMMA_MODES:
            raise ValidationError(f"gamma01 must be one of {jo.GAMMA_MODES}")
        if min(self.ftol, self.ctol, self.gtol) <= 0 or self.a1 <= 0:
            raise ValidationError("tolerances and a1 must be positive")
        if self.n_starts < 1 or self.max_iter < 1:
            raise ValidationError("n_starts and max_iter must be at least 1")


@dataclass(frozen=True)
class FitResult:
    """A fitted model, reported in the original coordinates of the data."""

    model: str
    link: LinkParams
    link_reparam: ReparamLink
    error: SvMFParams
    base: TransportBase | None
    loglik: float
    dof: int
    converged: bool
    iterations: int
    grad_norm: float
    constraint_residual: float
    starts: tuple = ()
    transform: TransformRecord | None = None
    config: FitConfig = field(default_factory=FitConfig)
    n: int = 0
    stages: dict = field(default_factory=dict)
    notes: tuple = ()

    @property
    def aic(self) -> float:
        return 2.0 * self.dof - 2.0 * self.loglik

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.link_reparam.dims

    @property
    def kappa(self) -> float:
        return self.error.kappa

    def predict(self, xs=None, xe=None) -> NDArray:
        """Fitted mean directions at new covariates."""
        return link_eval_reparam(self.link_reparam, xs, xe)


# ---------------------------------------------------------------------------
# Concentration and moment estimates


def _solve_kappa(rbar: float, p: int, ceiling: float) -> tuple[float, bool]:
    if not rbar > 0:
        return 0.0, False
    if rbar >= vmf_mean_resultant(p, ceiling):
        return float(ceiling), True
    f = lambda k: vmf_mean_resultant(p, k) - rbar
    hi = 1.0
    while f(hi) < 0:
        hi *= 4.0
    k = optimize.brentq(f, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(k), False


def fit_kappa(y, mu, p: int | None = None, weights=None, *, ceiling: float = KAPPA_CEILING,
              return_info: bool = False):
    """vMF maximum-likelihood concentration given fitted mean directions.

    Solves the score equation ``A_p(kappa) = rbar`` with a bracketing root
    finder, where ``rbar`` is the weighted mean of ``y_i^T mu_i``.  A
    nonpositive ``rbar`` gives ``kappa = 0``; a value beyond the ceiling is
    capped and flagged when ``return_info`` is set.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    if mu.shape != y.shape:
        raise ValidationError("mu must have one row per observation")
    p = y.shape[1] if p is None else p
    w = np.ones(y.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    rbar = float(w @ np.sum(y * mu, axis=1) / w.sum())
    kappa, capped = _solve_kappa(rbar, p, ceiling)
    if return_info:
        return kappa, {"rbar": rbar, "capped": capped}
    return kappa


@dataclass(frozen=True)
class MomentAxes:
    axes: NDArray
    eigenvalues: NDArray
    scales: NDArray
    normal_eigenvalue: float
    rejected: NDArray


def moment_axes(y, mu, gamma01, weights=None) -> MomentAxes:
    """Axes and preliminary scales from the rotated residuals.

    The residuals ``y_i - (y_i^T mu_i) mu_i`` are transported to
    ``gamma01``; their (weighted) scatter matrix restricted to the tangent
    space gives the axes (eigenvalues in decreasing order).  The scales are
    the per-axis root mean squares normalised to product one.  Observations
    whose mean is antipodal to ``gamma01`` are dropped and listed in
    ``rejected``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    g = np.asarray(gamma01, dtype=float)
    w = np.ones(y.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    bad = 1.0 + mu @ g <= 1e-8
    keep = ~bad
    v = rotated_residual(y[keep], mu[keep], g)
    wk = w[keep]
    S = (v * wk[:, None]).T @ v / wk.sum()
    P = gram_schmidt([g])[:, 1:]
    vals, vecs = np.linalg.eigh(P.T @ S @ P)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    axes = P @ vecs
    if axes.shape[1] == 1:
        axes = axes * np.sign(axes[np.argmax(np.abs(axes[:, 0])), 0])
    sd = np.sqrt(np.maximum(vals, 1e-300))
    scales = sd / np.exp(np.mean(np.log(sd)))
    return MomentAxes(axes, vals, scales, float(g @ S @ g), np.flatnonzero(bad))


def count_dof(dims, model: str = "svmf", gamma01: str = "estimated") -> int:
    """Number of free parameters of the model."""
    p, q_s, q_e = dims
    if q_s and q_s < p:
        raise ValidationError("q_s must be at least p")
    if q_e and q_e < p - 1:
        raise ValidationError("q_e must be at least p - 1")
    if q_s == 0 and q_e == 0:
        raise ValidationError("at least one covariate block is required")
    dof = p * (p - 1) // 2 + 1
    if q_s:
        dof += (p - 1) + q_s * p - p * (p + 1) // 2
    if q_e:
        dof += (p - 1) + q_e * (p - 1) - (p - 1) * p // 2
    if model == "svmf":
        dof += (p - 2) + (p - 1) * (p - 2) // 2
        if gamma01 == "estimated":
            dof += p - 1
    elif model != "vmf":
        raise ValidationError("model must be 'vmf' or 'svmf'")
    return dof


# ---------------------------------------------------------------------------
# Objective plumbing


def _pad(n: int) -> int:
    return -(-n // _PAD) * _PAD


class _Problem:
    """Working-frame data, layout and context for one optimisation."""

    def __init__(self, data: Dataset, layout: jo.Layout, ctx: dict):
        self.data = data
        self.layout = layout
        self.fns = jo.compiled(layout)
        n, m = data.n, _pad(data.n)
        idx = np.concatenate([np.arange(n), np.zeros(m - n, dtype=int)])
        w = np.concatenate([data.w, np.zeros(m - n)])
        zero = np.zeros((m, 0))
        self.arrays = (
            data.y[idx],
            zero if data.xs is None else data.xs[idx],
            zero if data.xe is None else data.xe[idx],
            w,
        )
        self.W = float(data.w.sum())
        self.ctx = {k: np.asarray(v, dtype=float) for k, v in ctx.items()}
        self.nfev = 0

    def value_and_grad(self, theta):
        self.nfev += 1
        v, g = self.fns.obj(theta, self.arrays, self.ctx)
        return float(v), np.asarray(g)

    def cons(self, theta):
        return np.asarray(self.fns.cons(theta, self.ctx))

    def cons_jac(self, theta):
        return np.asarray(self.fns.cons_jac(theta, self.ctx)).reshape(-1, theta.shape[0])

    def loglik(self, theta, kappa=None) -> float:
        k = 0.0 if kappa is None else float(kappa)
        return float(self.fns.loglik(theta, self.arrays, self.ctx, k))

    def loglik_grad(self, theta, kappa=None) -> NDArray:
        k = 0.0 if kappa is None else float(kappa)
        return np.asarray(self.fns.loglik_grad(theta, self.arrays, self.ctx, k))

    def lagrangian_hessian(self, theta, lam) -> NDArray:
        H = np.asarray(self.fns.hess(theta, self.arrays, self.ctx))
        return H - np.asarray(self.fns.cons_hess(theta, self.ctx, lam))

    def projected_grad_norm(self, theta) -> float:
        _, g = self.value_and_grad(theta)
        J = self.cons_jac(theta)
        lam, *_ = np.linalg.lstsq(J.T, g, rcond=None)
        return float(np.linalg.norm(g - J.T @ lam))


def _tangent_basis(v: NDArray) -> NDArray:
    return gram_schmidt([v])[:, 1:]


def _context(layout: jo.Layout, rp: ReparamLink, a1: float, base: TransportBase | None):
    ctx = {"b_ref": rp.b01, "T_ref": _tangent_basis(rp.b01), "a1": a1}
    if base is None:
        g = rp.b01
        ctx.update(g_init=g, G_init=_tangent_basis(g))
    else:
        ctx.update(g_init=base.gamma01, G_init=base.axes)
    return ctx


def _theta(layout: jo.Layout, rp: ReparamLink, error: SvMFParams | None = None) -> NDArray:
    parts = [rp.b01]
    if layout.q_s:
        parts.append(rp.rs1)
    parts.append(rp.Omega.ravel())
    if layout.model == "svmf":
        parts += [[np.log(max(error.kappa, 1e-8))], error.free_log_scales]
        if layout.gamma_mode == "estimated":
            parts.append(np.zeros(layout.p - 1))
        parts.append(np.zeros((layout.p - 1) * (layout.p - 2) // 2))
    return np.concatenate([np.asarray(x, dtype=float).ravel() for x in parts])


def _unpack(theta: NDArray, layout: jo.Layout, ctx: dict):
    """Numpy reconstruction of ``(ReparamLink, SvMFParams | None, TransportBase | None)``."""
    s = layout.slices
    b = theta[s["b"]] / np.linalg.norm(theta[s["b"]])
    r = None
    if layout.q_s:
        r = theta[s["r"]] / np.linalg.norm(theta[s["r"]])
    M = theta[s["M"]].reshape(layout.p, layout.q)
    rp = ReparamLink(b, r, proj_constraint(M, b, r, layout.q_s), layout.q_s, layout.q_e)
    if layout.model == "vmf":
        return rp, None, None
    kappa = float(np.exp(theta[s["logk"]][0]))
    error = SvMFParams.from_log_scales(kappa, theta[s["ls"]], float(ctx["a1"]))
    g0, G0 = np.asarray(ctx["g_init"]), np.asarray(ctx["G_init"])
    if layout.gamma_mode == "estimated":
        gam = g0 + G0 @ theta[s["d"]]
        gam = gam / np.linalg.norm(gam)
    elif layout.gamma_mode == "tied-to-b01":
        gam = b
    else:
        gam = g0
    axes = transport_matrix(g0, gam) @ G0 @ cayley(skew_from_params(theta[s["S"]], layout.p - 1))
    # tidy the rounding so the frame passes the orthonormality check
    Q, R = np.linalg.qr(np.column_stack([gam, axes]))
    Q = Q * np.sign(np.diag(R))
    return rp, error, TransportBase(Q[:, 0], Q[:, 1:])


def _rebase(theta: NDArray, layout: jo.Layout, ctx: dict):
    """Re-centre the frame charts at the current point (fresh context, zero offsets)."""
    rp, error, base = _unpack(theta, layout, ctx)
    new_ctx = _context(layout, rp, float(ctx["a1"]), base)
    if layout.gamma_mode == "tied-to-mean":
        new_ctx["g_init"] = np.asarray(ctx["g_init"])
    return _theta(layout, rp, error), new_ctx


# ---------------------------------------------------------------------------
# Constrained solver


@dataclass
class _SolveInfo:
    theta: NDArray
    objective: float
    iterations: int
    success: bool
    constraint: float
    grad_norm: float
    message: str


def _solve(prob: _Problem, theta0: NDArray, cfg: FitConfig) -> _SolveInfo:
    """SLSQP on the equality-constrained problem with a penalty fallback.

    The commutator constraint has a vanishing Jacobian wherever one of the
    two Gram matrices is a multiple of the identity on the tangent space
    (the default start is such a point), which makes the SQP subproblem
    singular.  In that case a quadratic-penalty continuation (weight doubled
    until the constraints hold) moves the iterate to a regular point and
    SLSQP polishes from there.
    """
    cons = [{"type": "eq", "fun": prob.cons, "jac": prob.cons_jac}]
    iters = 0

    def viol(t):
        return float(np.max(np.abs(prob.cons(t)))) if np.all(np.isfinite(t)) else np.inf

    def value(t):
        return prob.value_and_grad(t)[0] if np.all(np.isfinite(t)) else np.inf

    def slsqp(t0):
        nonlocal iters
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize.minimize(
                prob.value_and_grad, t0, jac=True, method="SLSQP", constraints=cons,
                options={"maxiter": cfg.max_iter, "ftol": cfg.ftol},
            )
        iters += res.nit
        return res

    def penalty(t0):
        nonlocal iters
        theta, weight = t0, 10.0
        for _ in range(40):
            def pen(t, weight=weight):
                v, g = prob.value_and_grad(t)
                c = prob.cons(t)
                return v + 0.5 * weight * c @ c, g + weight * prob.cons_jac(t).T @ c

            r = optimize.minimize(pen, theta, jac=True, method="L-BFGS-B",
                                  options={"maxiter": cfg.max_iter, "ftol": 1e-15, "gtol": 1e-11})
            iters += r.nit
            if np.all(np.isfinite(r.x)):
                theta = r.x
            if viol(theta) < cfg.ctol:
                break
            weight *= 2.0
        return theta

    res = slsqp(theta0)
    theta, message = res.x, res.message
    if not (res.success and viol(theta) <= cfg.ctol):
        start = theta if value(theta) < value(theta0) and viol(theta) < 1e-3 else theta0
        theta = penalty(start)
        message = "penalty continuation"
    # polish (repeated SLSQP passes tighten the stationarity residual)
    for _ in range(3):
        res = slsqp(theta)
        if not _acceptable(prob, theta, res.x, cfg):
            break
        improved = value(theta) - value(res.x)
        theta, message = res.x, res.message
        if res.success and improved <= cfg.ftol:
            break
    theta = _newton_polish(prob, theta, cfg)
    c = viol(theta)
    gn = prob.projected_grad_norm(theta)
    success = c <= cfg.ctol and gn <= cfg.gtol
    return _SolveInfo(theta, value(theta), iters, success, c, gn, str(message))


def _acceptable(prob: _Problem, old: NDArray, new: NDArray, cfg: FitConfig) -> bool:
    """Whether ``new`` is at least as good as ``old``.

    Constraints may not get worse (beyond ``ctol``) and the objective may
    rise only by the first-order price of restoring feasibility.
    """
    if not np.all(np.isfinite(new)):
        return False
    c_old = prob.cons(old)
    c_new = float(np.max(np.abs(prob.cons(new))))
    if c_new > max(cfg.ctol, float(np.max(np.abs(c_old)))):
        return False
    f_old, g = prob.value_and_grad(old)
    f_new = prob.value_and_grad(new)[0]
    lam, *_ = np.linalg.lstsq(prob.cons_jac(old).T, g, rcond=None)
    slack = 10.0 * float(np.abs(lam) @ np.abs(c_old)) + 1e-13 * max(1.0, abs(f_old))
    return f_new <= f_old + slack


def _newton_polish(prob: _Problem, theta: NDArray, cfg: FitConfig, steps: int = 8) -> NDArray:
    """Newton steps on the KKT system with the exact Lagrangian Hessian.

    A step is kept only if it reduces the projected gradient without
    worsening the constraints or the objective beyond rounding.  Flat
    directions (for example axis rotations when two scales coincide) are
    handled by the minimum-norm least-squares solution.
    """
    if not np.all(np.isfinite(theta)):
        return theta
    gn = prob.projected_grad_norm(theta)
    for _ in range(steps):
        f, g = prob.value_and_grad(theta)
        c = prob.cons(theta)
        J = prob.cons_jac(theta)
        lam, *_ = np.linalg.lstsq(J.T, g, rcond=None)
        H = prob.lagrangian_hessian(theta, lam)
        m = J.shape[0]
        K = np.block([[H, J.T], [J, np.zeros((m, m))]])
        rhs = -np.concatenate([g - J.T @ lam, c])
        step = np.linalg.lstsq(K, rhs, rcond=1e-13)[0][: theta.shape[0]]
        cand = theta + step
        if not np.all(np.isfinite(cand)):
            break
        gn_new = prob.projected_grad_norm(cand)
        c_new = float(np.max(np.abs(prob.cons(cand))))
        if not (gn_new < gn and _acceptable(prob, theta, cand, cfg)):
            break
        theta, gn = cand, gn_new
        if gn < 1e-12:
            break
    return theta


def _clean_theta(theta: NDArray, layout: jo.Layout) -> NDArray:
    """Normalise ``b``, ``r`` and project ``M``; leaves the likelihood unchanged."""
    s = layout.slices
    theta = theta.copy()
    b = theta[s["b"]] / np.linalg.norm(theta[s["b"]])
    theta[s["b"]] = b
    r = None
    if layout.q_s:
        r = theta[s["r"]] / np.linalg.norm(theta[s["r"]])
        theta[s["r"]] = r
    M = theta[s["M"]].reshape(layout.p, layout.q)
    theta[s["M"]] = proj_constraint(M, b, r, layout.q_s).ravel()
    return theta


# ---------------------------------------------------------------------------
# Result assembly


def _natural(rp: ReparamLink, notes: list) -> LinkParams:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        link = from_reparam(rp)
    for w in caught:
        notes.append(str(w.message))
    return link


def _vmf_loglik(data: Dataset, mu: NDArray, kappa: float) -> float:
    w = data.w
    return float(kappa * (w @ np.sum(data.y * mu, axis=1)) - w.sum() * vmf_log_norm_const(data.p, kappa))


def _prepare(data: Dataset, cfg: FitConfig, init: FitResult | None):
    if init is not None and init.transform is not None:
        record = init.transform
        return record.apply(data), record
    if cfg.transform:
        return preliminary_transform(data)
    record = TransformRecord.identity(data.dims)
    return data, record


def _perturbed_link(dims, rng: np.random.Generator, sd: float) -> ReparamLink:
    """Default initial link perturbed in its natural coordinates."""
    p, q_s, q_e = dims
    base = default_init(dims)

    def polar(A):
        U, _, Vt = np.linalg.svd(A, full_matrices=False)
        return U @ Vt

    S = skew_from_params(rng.normal(scale=sd, size=p * (p - 1) // 2), p)
    B0 = base.B0 @ cayley(S)
    Rs = polar(base.Rs + rng.normal(scale=sd, size=base.Rs.shape)) if q_s else None
    Re = polar(base.Re + rng.normal(scale=sd, size=base.Re.shape)) if q_e else None
    bs = base.bs * np.exp(rng.normal(scale=sd, size=p - 1)) if q_s else np.zeros(p - 1)
    be = base.be * np.exp(rng.normal(scale=sd, size=p - 1)) if q_e else np.zeros(p - 1)
    return to_reparam(canonicalize(B0, bs, be, Rs, Re))


def _fit_link_vmf(work: Dataset, rp0: ReparamLink, cfg: FitConfig):
    layout = jo.Layout(work.p, work.q_s, work.q_e, "vmf")
    prob = _Problem(work, layout, _context(layout, rp0, cfg.a1, None))
    info = _solve(prob, _theta(layout, rp0), cfg)
    theta = _clean_theta(info.theta, layout)
    rp, _, _ = _unpack(theta, layout, prob.ctx)
    return rp, info


def _single_vmf(data: Dataset, work: Dataset, record: TransformRecord, cfg: FitConfig,
                rp0: ReparamLink) -> tuple[FitResult, ReparamLink, _SolveInfo]:
    rp_w, info = _fit_link_vmf(work, rp0, cfg)
    mu = link_eval_reparam(rp_w, work.xs, work.xe)
    kappa, kinfo = fit_kappa(work.y, mu, work.p, work.w, ceiling=cfg.kappa_ceiling, return_info=True)
    notes = []
    if kinfo["capped"]:
        notes.append("kappa capped at the configured ceiling")
    if not info.success:
        notes.append(f"optimizer did not meet tolerances: {info.message}")
    if info.constraint > 1e-6:
        raise ConvergenceError(f"constraint violation {info.constraint:.3g} at exit")
    rp_o = record.link_to_original(rp_w)
    ll = _vmf_loglik(work, mu, kappa)
    result = FitResult(
        model="vmf",
        link=_natural(rp_o, notes),
        link_reparam=rp_o,
        error=SvMFParams.isotropic(kappa, data.p, 1.0),
        base=None,
        loglik=ll,
        dof=count_dof(data.dims, "vmf"),
        converged=info.success,
        iterations=info.iterations,
        grad_norm=info.grad_norm,
        constraint_residual=max(info.constraint, commutator_residual(rp_w)),
        transform=record,
        config=cfg,
        n=data.n,
        stages={"vmf": ll},
        notes=tuple(notes),
    )
    return result, rp_w, info


def fit_vmf(data: Dataset, config: FitConfig | None = None, *, init: FitResult | None = None) -> FitResult:
    """Fit the mean link by maximising ``sum_i w_i y_i^T mu(x_i)``, then kappa.

    With ``init`` the optimisation starts from that fit (in its working
    frame) and a single start is used.
    """
    cfg = replace(config or FitConfig(), model="vmf")
    work, record = _prepare(data, cfg, init)
    if init is not None:
        starts = [record.link_to_working(init.link_reparam)]
    else:
        rngs = [as_generator(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.n_starts)]
        starts = [to_reparam(default_init(data.dims))]
        starts += [_perturbed_link(data.dims, rngs[k], cfg.perturb_sd) for k in range(1, cfg.n_starts)]
    best, table = None, []
    for k, rp0 in enumerate(starts):
        try:
            res, _, _ = _single_vmf(data, work, record, cfg, rp0)
        except (ConvergenceError, ValidationError, np.linalg.LinAlgError) as exc:
            table.append((k, float("nan"), str(exc)))
            continue
        table.append((k, res.loglik, "ok" if res.converged else "not converged"))
        if best is None or res.loglik > best.loglik:
            best = res
    if best is None:
        raise ConvergenceError("every start failed")
    return replace(best, starts=tuple(table))


# ---------------------------------------------------------------------------
# SvMF


def _svmf_u(y: NDArray, mu: NDArray, base: TransportBase, error: SvMFParams) -> NDArray:
    """``(y^T mu / a1) / sqrt(J)`` per observation; the kappa score is its mean."""
    frame = axes_at(mu, base)
    z = np.einsum("np,npk->nk", y, frame.matrix)
    a = error.scales
    J = np.sum((z / a) ** 2, axis=1)
    return (z[:, 0] / a[0]) / np.sqrt(J)


def _svmf_layout(work: Dataset, cfg: FitConfig) -> jo.Layout:
    return jo.Layout(work.p, work.q_s, work.q_e, "svmf", cfg.gamma01)


def _svmf_candidates(work, cfg, rp_w, kappa_v, init_w):
    """Candidate starting points ``(name, rp, error, base)`` in the working frame."""
    p = work.p
    w = work.w
    mu = link_eval_reparam(rp_w, work.xs, work.xe)
    ybar = _mean_direction(work.y, w)
    if cfg.gamma01 == "tied-to-b01" or ybar is None:
        gamma = rp_w.b01
    else:
        gamma = ybar
    mom = moment_axes(work.y, mu, gamma, w)
    base = TransportBase(gamma, mom.axes)
    iso = SvMFParams.isotropic(max(kappa_v, 1e-6), p, cfg.a1)
    out = [("isotropic", rp_w, iso, base)]
    scales = np.concatenate([[cfg.a1], mom.scales])
    if np.all(np.isfinite(scales)) and np.all(scales > 0):
        trial = SvMFParams(max(kappa_v, 1e-6), scales)
        k, _ = _solve_kappa(float(w @ _svmf_u(work.y, mu, base, trial) / w.sum()), p, cfg.kappa_ceiling)
        out.append(("moment", rp_w, SvMFParams(max(k, 1e-6), scales), base))
    if init_w is not None:
        out.append(("warm", *init_w))
    return out


def _svmf_from_candidate(work, cfg, cand):
    name, rp, error, base = cand
    layout = _svmf_layout(work, cfg)
    if layout.gamma_mode == "tied-to-b01":
        # the base location follows b01, so anchor the chart there
        base = TransportBase(rp.b01, transport_matrix(base.gamma01, rp.b01) @ base.axes)
    ctx = _context(layout, rp, cfg.a1, base)
    prob = _Problem(work, layout, ctx)
    theta = _theta(layout, rp, error)
    return prob, theta


def _single_svmf(data, work, record, cfg, vmf_res, rp_w, init_w):
    p = work.p
    notes = list(vmf_res.notes)
    cands = _svmf_candidates(work, cfg, rp_w, vmf_res.kappa, init_w)
    scored = []
    for cand in cands:
        prob, theta = _svmf_from_candidate(work, cfg, cand)
        scored.append((prob.loglik(theta), cand[0], prob, theta))
    scored.sort(key=lambda t: -t[0])
    start_ll, start_name, prob, theta0 = scored[0]
    stages = {"vmf": vmf_res.loglik, "start": start_ll, "start_name": start_name}
    if "moment" in [s[1] for s in scored]:
        stages["moment"] = next(s[0] for s in scored if s[1] == "moment")

    info = _solve(prob, theta0, cfg)
    theta = _clean_theta(info.theta, prob.layout)
    # refresh the charts at the solution and polish once more
    theta_r, ctx_r = _rebase(theta, prob.layout, prob.ctx)
    prob_r = _Problem(work, prob.layout, ctx_r)
    if prob_r.loglik(theta_r) >= prob.loglik(theta) - 1e-9 * max(1.0, abs(prob.loglik(theta))):
        info_r = _solve(prob_r, theta_r, cfg)
        theta_rr = _clean_theta(info_r.theta, prob.layout)
        if prob_r.loglik(theta_rr) >= prob.loglik(theta) and info_r.constraint <= max(info.constraint, cfg.ctol):
            prob, theta = prob_r, theta_rr
            info = replace(info_r, iterations=info.iterations + info_r.iterations)
    if info.constraint > 1e-6:
        raise ConvergenceError(f"constraint violation {info.constraint:.3g} at exit")
    ll = prob.loglik(theta)
    if not np.isfinite(ll) or ll < start_ll:
        theta, ll = theta0, start_ll
        notes.append("joint optimisation did not improve on its start")
    rp, error, base = _unpack(theta, prob.layout, prob.ctx)
    if p != 3:
        mu = link_eval_reparam(rp, work.xs, work.xe)
        w = work.w
        k, _ = _solve_kappa(float(w @ _svmf_u(work.y, mu, base, error) / w.sum()), p, cfg.kappa_ceiling)
        refined = SvMFParams(k, error.scales)
        theta_k = theta.copy()
        theta_k[prob.layout.slices["logk"]] = np.log(max(k, 1e-300))
        ll_k = prob.loglik(theta_k)
        if ll_k >= ll:
            error, ll, theta = refined, ll_k, theta_k
    if not info.success:
        notes.append(f"optimizer did not meet tolerances: {info.message}")
    stages["final"] = ll
    rp_o = record.link_to_original(rp)
    result = FitResult(
        model="svmf",
        link=_natural(rp_o, notes),
        link_reparam=rp_o,
        error=error,
        base=record.base_to_original(base),
        loglik=ll,
        dof=count_dof(data.dims, "svmf", cfg.gamma01),
        converged=info.success,
        iterations=info.iterations + vmf_res.iterations,
        grad_norm=info.grad_norm,
        constraint_residual=max(info.constraint, commutator_residual(rp)),
        transform=record,
        config=cfg,
        n=data.n,
        stages=stages,
        notes=tuple(notes),
    )
    return result


def fit_svmf(data: Dataset, config: FitConfig | None = None, *, init: FitResult | None = None,
             init_vmf: FitResult | None = None) -> FitResult:
    """Joint maximum-likelihood fit of the link and SvMF error parameters.

    Stages: vMF link fit, moment estimates of axes and scales, then a joint
    constrained optimisation started from the better of the isotropic and
    moment starting points (and ``init`` if given).  The reported
    log-likelihood never falls below the starting value.
    """
    cfg = replace(config or FitConfig(), model="svmf")
    if data.p < 3:
        raise ValidationError("the SvMF model needs p >= 3")
    warm = init if init is not None else init_vmf
    work, record = _prepare(data, cfg, warm)
    init_w = None
    if init is not None and init.model == "svmf":
        init_w = (record.link_to_working(init.link_reparam), init.error, record.base_to_working(init.base))
    if init is not None or init_vmf is not None:
        vcfg = replace(cfg, model="vmf", n_starts=1)
        rp0 = record.link_to_working((init_vmf or init).link_reparam)
        vres, rp_w, _ = _single_vmf(data, work, record, vcfg, rp0)
        res = _single_svmf(data, work, record, cfg, vres, rp_w, init_w)
        return replace(res, starts=((0, res.loglik, "ok" if res.converged else "not converged"),))
    rngs = [as_generator(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.n_starts)]
    best, table = None, []
    for k in range(cfg.n_starts):
        rp0 = to_reparam(default_init(data.dims)) if k == 0 else _perturbed_link(data.dims, rngs[k], cfg.perturb_sd)
        try:
            vres, rp_w, _ = _single_vmf(data, work, record, replace(cfg, model="vmf"), rp0)
            res = _single_svmf(data, work, record, cfg, vres, rp_w, None)
        except (ConvergenceError, ValidationError, AntipodalError, np.linalg.LinAlgError) as exc:
            table.append((k, float("nan"), str(exc)))
            continue
        table.append((k, res.loglik, "ok" if res.converged else "not converged"))
        if best is None or res.loglik > best.loglik:
            best = res
    if best is None:
        raise ConvergenceError("every start failed")
    return replace(best, starts=tuple(table))


def fit(data: Dataset, config: FitConfig | None = None, **kwargs) -> FitResult:
    cfg = config or FitConfig()
    return (fit_svmf if cfg.model == "svmf" else fit_vmf)(data, cfg, **kwargs)


def multistart_fit(data: Dataset, config: FitConfig | None = None, n_starts: int = 10,
                   seed: int = 0) -> FitResult:
    """Best of ``n_starts`` fits; start 0 is the default initial link.

    The per-start final log-likelihoods are in ``result.starts``.
    """
    cfg = replace(config or FitConfig(), n_starts=n_starts, seed=seed)
    return fit(data, cfg)


# ---------------------------------------------------------------------------
# Direct access to the objective


@dataclass
class ObjectivePoint:
    """Log-likelihood of a fit's working-frame data as a function of ``theta``."""

    theta: NDArray
    data: Dataset
    layout: jo.Layout
    ctx: dict
    kappa: float | None = None
    _prob: _Problem | None = field(default=None, repr=False)

    @property
    def problem(self) -> _Problem:
        if self._prob is None:
            self._prob = _Problem(self.data, self.layout, self.ctx)
        return self._prob

    def loglik(self, theta=None) -> float:
        t = self.theta if theta is None else np.asarray(theta, dtype=float)
        return self.problem.loglik(t, self.kappa)

    def unpack(self, theta=None):
        t = self.theta if theta is None else np.asarray(theta, dtype=float)
        return _unpack(t, self.layout, self.problem.ctx)

    def with_theta(self, theta) -> ObjectivePoint:
        return replace(self, theta=np.asarray(theta, dtype=float), _prob=self._prob)


def objective_point(fit_result: FitResult, data: Dataset) -> ObjectivePoint:
    """Internal coordinates of ``fit_result`` on ``data`` (in the fit's working frame)."""
    record = fit_result.transform or TransformRecord.identity(data.dims)
    work = record.apply(data)
    rp = record.link_to_working(fit_result.link_reparam)
    if fit_result.model == "vmf":
        layout = jo.Layout(work.p, work.q_s, work.q_e, "vmf")
        ctx = _context(layout, rp, 1.0, None)
        return ObjectivePoint(_theta(layout, rp), work, layout, ctx, fit_result.kappa)
    layout = _svmf_layout(work, fit_result.config)
    base = record.base_to_working(fit_result.base)
    ctx = _context(layout, rp, float(fit_result.error.scales[0]), base)
    return ObjectivePoint(_theta(layout, rp, fit_result.error), work, layout, ctx)


def loglik_gradient(point: ObjectivePoint, theta=None) -> NDArray:
    """Gradient of the joint log-likelihood in the internal coordinates.

    Raises ``DomainError`` if some spherical covariate sits at the pole of
    the link (``x_s = -rs1``).
    """
    from .exceptions import PoleError

    t = point.theta if theta is None else np.asarray(theta, dtype=float)
    layout = point.layout
    if layout.q_s:
        r = t[layout.slices["r"]]
        r = r / np.linalg.norm(r)
        d = point.data.xs + r
        if np.any(0.5 * np.sum(d * d, axis=1) < jo.POLE_EPS):
            raise PoleError("a spherical covariate is at the pole of the link")
    return point.problem.loglik_grad(t, point.kappa)
