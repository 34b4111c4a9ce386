"""Error distributions on the sphere and their orientation frames.

The scaled von Mises-Fisher (SvMF) distribution with mean ``mu``, frame
``(mu, gamma_2, ..., gamma_p)``, concentration ``kappa`` and scales
``a_1, ..., a_p`` (``prod_{j>=2} a_j = 1``) has log-density

    -log c_p(kappa) - log a_1 - (p/2) log J + kappa (y^T mu / a_1) / sqrt(J),
    J = (y^T mu / a_1)^2 + sum_{j>=2} (y^T gamma_j / a_j)^2.

It is the law of ``A z / |A z|`` for ``z ~ vMF(e1, kappa)`` written in frame
coordinates with ``A = diag(a)``, which is also how it is sampled.  With all
``a_j = 1`` it is the von Mises-Fisher distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from .exceptions import AntipodalError, ValidationError
from .geometry import ANTIPODAL_TOL

BESSEL_SWITCH = 50.0
_SERIES_TERMS = 400
_ASYMP_TERMS = 30

__all__ = [
    "OrientationFrame",
    "SvMFParams",
    "TransportBase",
    "FamilyKernel",
    "vmf_log_norm_const",
    "log_bessel_iv",
    "vmf_mean_resultant",
    "vmf_log_density",
    "svmf_log_density",
    "family_log_density",
    "vmf_kernel",
    "svmf_kernel",
    "kent_kernel",
    "sample_vmf",
    "sample_svmf",
    "axes_at",
    "rotated_residual",
    "as_generator",
]


def as_generator(seed) -> np.random.Generator:
    """Accept an integer seed, a ``SeedSequence`` or a ``Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Normalising constants


def _log_iv_scaled_series(nu: float, kappa: NDArray) -> NDArray:
    """``log I_nu(k) - nu log k`` from the power series (finite at k = 0)."""
    k = np.arange(_SERIES_TERMS)[:, None]
    base = -nu * np.log(2.0) - special.gammaln(k + 1) - special.gammaln(k + nu + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lk = np.log(kappa / 2.0)
        terms = np.where(k == 0, base, base + 2 * k * lk)
    return special.logsumexp(terms, axis=0)


def _log_iv_asymptotic(nu: float, kappa: NDArray) -> NDArray:
    """``log I_nu(k)`` from the large-argument expansion."""
    mu = 4.0 * nu * nu
    total = np.ones_like(kappa)
    term = np.ones_like(kappa)
    for k in range(1, _ASYMP_TERMS):
        term = term * -(mu - (2 * k - 1) ** 2) / (k * 8.0 * kappa)
        total = total + term
        if np.all(term == 0):
            break
    return kappa - 0.5 * np.log(2 * np.pi * kappa) + np.log(total)


def log_bessel_iv(nu: float, kappa: ArrayLike) -> NDArray:
    """``log I_nu(kappa)``: power series below 50, asymptotic series above."""
    kappa = np.asarray(kappa, dtype=float)
    small = kappa < BESSEL_SWITCH
    out = np.empty_like(kappa)
    ks = np.where(small, kappa, 1.0)
    kl = np.where(small, BESSEL_SWITCH, kappa)
    with np.errstate(divide="ignore"):
        series = _log_iv_scaled_series(nu, np.atleast_1d(ks)).reshape(kappa.shape) + nu * np.log(ks)
    out = np.where(small, series, _log_iv_asymptotic(nu, kl))
    return out


def vmf_log_norm_const(p: int, kappa: ArrayLike) -> NDArray | float:
    """``log c_p(kappa)`` with ``c_p = (2 pi)^{p/2} I_{p/2-1}(kappa) / kappa^{p/2-1}``.

    ``p = 3`` uses ``2 pi (e^k - e^-k) / k`` directly.  At ``kappa = 0`` the
    value is the log surface area of the sphere.
    """
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa < 0):
        raise ValidationError("kappa must be nonnegative")
    if p == 3:
        tiny = kappa < 1e-4
        kk = np.where(tiny, 1.0, kappa)
        exact = np.log(2 * np.pi) + kk + np.log1p(-np.exp(-2 * kk)) - np.log(kk)
        series = np.log(4 * np.pi) + kappa**2 / 6.0 - kappa**4 / 180.0
        out = np.where(tiny, series, exact)
    else:
        nu = p / 2.0 - 1.0
        small = kappa < BESSEL_SWITCH
        ks = np.atleast_1d(np.where(small, kappa, 1.0))
        kl = np.where(small, BESSEL_SWITCH, kappa)
        ser = _log_iv_scaled_series(nu, ks).reshape(kappa.shape)
        asy = _log_iv_asymptotic(nu, kl) - nu * np.log(kl)
        out = 0.5 * p * np.log(2 * np.pi) + np.where(small, ser, asy)
    return float(out) if out.ndim == 0 else out


def vmf_mean_resultant(p: int, kappa: ArrayLike) -> NDArray | float:
    """Mean resultant length ``A_p(kappa) = I_{p/2}(kappa) / I_{p/2-1}(kappa)``."""
    kappa = np.asarray(kappa, dtype=float)
    nu = p / 2.0 - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        r = special.ive(nu + 1, kappa) / special.ive(nu, kappa)
        if p == 3:
            big = kappa > 1e-3
            kk = np.where(big, kappa, 1.0)
            r = np.where(big, 1.0 / np.tanh(kk) - 1.0 / kk, kappa / 3.0 - kappa**3 / 45.0)
    r = np.where(kappa == 0, 0.0, r)
    return float(r) if r.ndim == 0 else r


# ---------------------------------------------------------------------------
# Parameter containers


def _check_orthonormal(M: NDArray, tol: float = 1e-10):
    G = np.swapaxes(M, -1, -2) @ M
    eye = np.eye(M.shape[-1])
    if not np.allclose(G, eye, atol=tol, rtol=0):
        raise ValidationError("frame vectors are not orthonormal")


@dataclass(frozen=True)
class OrientationFrame:
    """Mean direction ``mu`` and orthonormal axes ``gammas`` (as columns).

    Shapes are ``(p,)`` and ``(p, p-1)``, or ``(n, p)`` and ``(n, p, p-1)``
    for a batch of frames.
    """

    mu: NDArray
    gammas: NDArray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        g = np.asarray(self.gammas, dtype=float)
        if g.shape != mu.shape + (mu.shape[-1] - 1,):
            raise ValidationError("gammas must have shape mu.shape + (p - 1,)")
        _check_orthonormal(np.concatenate([mu[..., :, None], g], axis=-1))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "gammas", g)

    @property
    def p(self) -> int:
        return self.mu.shape[-1]

    @property
    def matrix(self) -> NDArray:
        """``[mu, gamma_2, ..., gamma_p]`` as columns."""
        return np.concatenate([self.mu[..., :, None], self.gammas], axis=-1)

    def rotate(self, Q: ArrayLike) -> OrientationFrame:
        Q = np.asarray(Q, dtype=float)
        return OrientationFrame(self.mu @ Q.T, Q @ self.gammas)


@dataclass(frozen=True)
class SvMFParams:
    """Concentration and scales ``a_1..a_p``; ``prod_{j>=2} a_j = 1``."""

    kappa: float
    scales: NDArray

    def __post_init__(self):
        a = np.asarray(self.scales, dtype=float).reshape(-1)
        if a.shape[0] < 2:
            raise ValidationError("need at least two scales")
        if self.kappa < 0 or not np.isfinite(self.kappa):
            raise ValidationError("kappa must be finite and nonnegative")
        if np.any(a <= 0):
            raise ValidationError("scales must be positive")
        if abs(np.sum(np.log(a[1:]))) > 1e-10:
            raise ValidationError("scales a_2..a_p must multiply to one")
        a.setflags(write=False)
        object.__setattr__(self, "scales", a)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def p(self) -> int:
        return self.scales.shape[0]

    @classmethod
    def from_log_scales(cls, kappa: float, free: ArrayLike, a1: float = 1.0) -> SvMFParams:
        """Build from the ``p - 2`` free logs of ``a_2..a_{p-1}``."""
        free = np.asarray(free, dtype=float).reshape(-1)
        logs = np.concatenate([free, [-free.sum()]])
        return cls(kappa, np.concatenate([[a1], np.exp(logs)]))

    @classmethod
    def isotropic(cls, kappa: float, p: int, a1: float = 1.0) -> SvMFParams:
        return cls(kappa, np.concatenate([[a1], np.ones(p - 1)]))

    @property
    def free_log_scales(self) -> NDArray:
        return np.log(self.scales[1:-1])


@dataclass(frozen=True)
class TransportBase:
    """Base location ``gamma01`` and base axes (columns, tangent at ``gamma01``)."""

    gamma01: NDArray
    axes: NDArray

    def __post_init__(self):
        g = np.asarray(self.gamma01, dtype=float).reshape(-1)
        A = np.asarray(self.axes, dtype=float)
        if A.shape != (g.shape[0], g.shape[0] - 1):
            raise ValidationError("axes must be p x (p - 1)")
        _check_orthonormal(np.column_stack([g, A]))
        g.setflags(write=False)
        A.setflags(write=False)
        object.__setattr__(self, "gamma01", g)
        object.__setattr__(self, "axes", A)

    @property
    def p(self) -> int:
        return self.gamma01.shape[0]


# ---------------------------------------------------------------------------
# Densities


def _frame_coords(y: NDArray, frame: OrientationFrame) -> NDArray:
    return np.einsum("...p,...pk->...k", y, frame.matrix)


def vmf_log_density(y: ArrayLike, mu: ArrayLike, kappa: float) -> NDArray:
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    p = y.shape[-1]
    return kappa * np.sum(y * mu, axis=-1) - vmf_log_norm_const(p, kappa)


def svmf_log_density(y: ArrayLike, frame: OrientationFrame, params: SvMFParams) -> NDArray:
    """Log-density of the scaled von Mises-Fisher distribution."""
    y = np.asarray(y, dtype=float)
    p = y.shape[-1]
    if params.p != p or frame.p != p:
        raise ValidationError("dimension mismatch between y, frame and params")
    z = _frame_coords(y, frame) / params.scales
    J = np.sum(z * z, axis=-1)
    assert np.all(J > 0), "J vanishes only for y = 0"
    return (
        -vmf_log_norm_const(p, params.kappa)
        - np.sum(np.log(params.scales))
        - 0.5 * p * np.log(J)
        + params.kappa * z[..., 0] / np.sqrt(J)
    )


@dataclass(frozen=True)
class FamilyKernel:
    """Kernel ``g(u, v)`` of an elliptically symmetric family, on the log scale.

    ``log_normalizer(p, kappa, lam)`` returns ``log c_{g,p}(kappa, lam)`` or
    is ``None`` when no closed form is implemented.
    """

    name: str
    log_g: Callable[[NDArray, NDArray], NDArray]
    lambda_constraint: str
    log_normalizer: Callable[[int, float, NDArray], float] | None = None

    @property
    def normalized(self) -> bool:
        return self.log_normalizer is not None


def vmf_kernel() -> FamilyKernel:
    return FamilyKernel(
        "vmf",
        lambda u, v: u,
        "sum-zero",
        lambda p, kappa, lam: vmf_log_norm_const(p, kappa),
    )


def svmf_kernel(p: int, a1: float = 1.0) -> FamilyKernel:
    """SvMF kernel with ``lambda_j = a_j^{-2}``.

    ``log g(u, v) = -(p/2) log v + u / (a1 sqrt(v))`` where ``u = kappa mu^T y``.
    """

    def log_g(u, v):
        return -0.5 * p * np.log(v) + u / (a1 * np.sqrt(v))

    def log_norm(p_, kappa, lam):
        return vmf_log_norm_const(p_, kappa) + np.log(a1)

    return FamilyKernel("svmf", log_g, "product-one", log_norm)


def kent_kernel() -> FamilyKernel:
    return FamilyKernel("kent", lambda u, v: u + v, "sum-zero", None)


def family_log_density(
    y: ArrayLike,
    frame: OrientationFrame,
    kernel: FamilyKernel,
    kappa: float,
    lam: ArrayLike,
    normalized: bool = True,
) -> NDArray:
    """``log g(kappa mu^T y, sum_j lam_j (y^T gamma_j)^2)`` minus the normaliser.

    ``lam`` has length ``p`` with ``lam[0]`` multiplying ``(y^T mu)^2``.
    Asking for a normalised value from a kernel without a normaliser raises.
    """
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    z = _frame_coords(y, frame)
    u = kappa * z[..., 0]
    v = np.sum(lam * z * z, axis=-1)
    out = kernel.log_g(u, v)
    if normalized:
        if not kernel.normalized:
            raise ValidationError(f"no normalising constant available for the {kernel.name} kernel")
        out = out - kernel.log_normalizer(y.shape[-1], kappa, lam)
    return out


# ---------------------------------------------------------------------------
# Samplers


def _wood_w(rng: np.random.Generator, p: int, kappa: float, n: int) -> NDArray:
    """Component along the mean direction of ``vMF(e1, kappa)`` draws."""
    if p == 3:
        u = rng.uniform(size=n)
        if kappa == 0:
            return 2 * u - 1
        return 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    d = p - 1
    b = d / (2.0 * kappa + np.sqrt(4.0 * kappa**2 + d * d))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + d * np.log(1.0 - x0 * x0)
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        m = todo.size
        z = rng.beta(d / 2.0, d / 2.0, size=m)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=m)
        ok = kappa * w + d * np.log(1.0 - x0 * w) - c >= np.log(u)
        out[todo[ok]] = w[ok]
        todo = todo[~ok]
    return out


def _vmf_e1(rng: np.random.Generator, p: int, kappa: float, n: int) -> NDArray:
    w = _wood_w(rng, p, kappa, n)
    v = rng.normal(size=(n, p - 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.column_stack([w, np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v])


def _e1_to(mu: NDArray, z: NDArray) -> NDArray:
    """Reflect coordinates relative to ``e1`` so that ``e1`` lands on ``mu``."""
    u = -mu.copy()
    u[..., 0] += 1.0
    uu = np.sum(u * u, axis=-1, keepdims=True)
    safe = np.where(uu > 1e-30, uu, 1.0)
    proj = np.sum(u * z, axis=-1, keepdims=True)
    return np.where(uu > 1e-30, z - 2.0 * u * proj / safe, z)


def sample_vmf(mu: ArrayLike, kappa: float, n: int | None = None, seed=None) -> NDArray:
    """Draw from ``vMF(mu, kappa)``.

    With a single ``mu`` of shape ``(p,)`` returns ``(n, p)``; with ``mu`` of
    shape ``(m, p)`` returns one draw per row.
    """
    rng = as_generator(seed)
    mu = np.asarray(mu, dtype=float)
    if kappa < 0:
        raise ValidationError("kappa must be nonnegative")
    p = mu.shape[-1]
    m = n if mu.ndim == 1 else mu.shape[0]
    if m is None or m < 1:
        raise ValidationError("n must be a positive integer")
    z = _vmf_e1(rng, p, kappa, m)
    return _e1_to(mu, z)


def sample_svmf(frame: OrientationFrame, params: SvMFParams, n: int | None = None, seed=None) -> NDArray:
    """Draw from the SvMF distribution by scaling and renormalising vMF draws.

    A single frame gives ``n`` draws; a batch of frames gives one per frame.
    """
    rng = as_generator(seed)
    p = frame.p
    m = n if frame.mu.ndim == 1 else frame.mu.shape[0]
    if m is None or m < 1:
        raise ValidationError("n must be a positive integer")
    z = _vmf_e1(rng, p, params.kappa, m) * params.scales
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return np.einsum("...pk,...k->...p", frame.matrix, z)


# ---------------------------------------------------------------------------
# Parallel-transport frames


def _transport_apply(gamma01: NDArray, mu: NDArray, V: NDArray) -> NDArray:
    """Apply ``R_{gamma01, mu}`` to the columns of ``V`` (batched over ``mu``)."""
    c = 1.0 + mu @ gamma01
    if np.any(c <= ANTIPODAL_TOL):
        raise AntipodalError("mean direction is antipodal to the base location")
    s = mu + gamma01
    return V - s[..., :, None] * (np.einsum("...p,...pk->...k", s, V) / c[..., None])[..., None, :]


def axes_at(mu_x: ArrayLike, base: TransportBase) -> OrientationFrame:
    """Frame at ``mu_x`` obtained by transporting the base axes from ``gamma01``."""
    mu = np.asarray(mu_x, dtype=float)
    V = np.broadcast_to(base.axes, mu.shape[:-1] + base.axes.shape)
    return OrientationFrame(mu, _transport_apply(base.gamma01, mu, V))


def rotated_residual(y: ArrayLike, mu_x: ArrayLike, gamma01: ArrayLike) -> NDArray:
    """Tangent residual at ``mu_x`` carried back to the base location."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu_x, dtype=float)
    g = np.asarray(gamma01, dtype=float)
    r = y - mu * np.sum(mu * y, axis=-1, keepdims=True)
    return _transport_apply(g, np.broadcast_to(mu, r.shape), r[..., :, None])[..., 0]
