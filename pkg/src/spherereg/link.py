"""The scaled Moebius mean link and its reparameterisation.

The link maps a covariate vector ``x = (x_e, x_s)`` (Euclidean block and
spherical block) to a unit vector

    mu(x) = B0 S^{-1}( Bs S(Rs^T x_s) + Be Re^T x_e ),

where ``S`` is stereographic projection.  :func:`link_eval` evaluates the
closed form, :func:`link_eval_literal` the composition above, and
:func:`link_eval_reparam` the unconstrained-friendly form in terms of
``(b01, rs1, Omega)``.

Covariates are passed as keyword arrays ``x_s`` and ``x_e``; each may be a
single vector or an ``(n, q)`` array, and the output has matching shape.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import DegenerateError, DomainError, PoleError, ValidationError
from .geometry import (
    ExtendedPoint,
    gram_schmidt,
    householder,
    mobius_sphere,
    stereo_inverse,
    stereo_project,
)

ORTHO_TOL = 1e-10
POLE_TOL = 1e-12
ZERO_SCALE_REL = 1e-9
REPEAT_REL = 1e-8

__all__ = [
    "LinkParams",
    "ReparamLink",
    "link_eval",
    "link_eval_literal",
    "t_transform",
    "image_dimension",
    "downs_link",
    "fisher_lee_link",
    "hybrid_link",
    "downs_params",
    "fisher_lee_params",
    "hybrid_params",
    "mobius_link_form",
    "compose_links",
    "canonicalize",
    "to_reparam",
    "from_reparam",
    "link_eval_reparam",
    "proj_constraint",
    "commutator_residual",
    "commutator_matrix",
    "wrap_angle",
    "constraint_residuals",
    "random_link_params",
]


def wrap_angle(theta):
    """Reduce angles to ``[-pi, pi)``."""
    return np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi


def _rot2(angle: float) -> NDArray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass(frozen=True)
class LinkParams:
    """Natural parameters ``(B0, Bs, Be, Rs, Re)`` of the mean link.

    ``bs`` and ``be`` hold the diagonals ``beta_{s2..sp}`` and
    ``beta_{e2..ep}``; an absent block has ``R = None`` and zero scales.
    """

    B0: NDArray
    bs: NDArray
    be: NDArray
    Rs: NDArray | None = None
    Re: NDArray | None = None

    def __post_init__(self):
        B0 = np.array(self.B0, dtype=float)
        p = B0.shape[0]
        if p < 2 or B0.shape != (p, p):
            raise ValidationError("B0 must be square with p >= 2")
        bs = np.zeros(p - 1) if self.bs is None else np.array(self.bs, dtype=float).reshape(-1)
        be = np.zeros(p - 1) if self.be is None else np.array(self.be, dtype=float).reshape(-1)
        Rs = None if self.Rs is None else np.array(self.Rs, dtype=float)
        Re = None if self.Re is None else np.array(self.Re, dtype=float)
        if Rs is None and Re is None:
            raise ValidationError("at least one covariate block is required")
        if bs.shape != (p - 1,) or be.shape != (p - 1,):
            raise ValidationError("scale vectors must have length p - 1")
        if np.any(bs < 0) or np.any(be < 0):
            raise ValidationError("scales must be nonnegative")
        if not np.allclose(B0.T @ B0, np.eye(p), atol=ORTHO_TOL, rtol=0):
            raise ValidationError("B0 is not orthogonal")
        if abs(np.linalg.det(B0) - 1.0) > 1e-8:
            raise ValidationError("B0 must have determinant +1")
        if Rs is not None:
            if Rs.ndim != 2 or Rs.shape[1] != p or Rs.shape[0] < p:
                raise ValidationError("Rs must be q_s x p with q_s >= p")
            if not np.allclose(Rs.T @ Rs, np.eye(p), atol=ORTHO_TOL, rtol=0):
                raise ValidationError("Rs columns are not orthonormal")
        elif np.any(bs != 0):
            raise ValidationError("Bs must vanish without a spherical block")
        if Re is not None:
            if Re.ndim != 2 or Re.shape[1] != p - 1 or Re.shape[0] < p - 1:
                raise ValidationError("Re must be q_e x (p - 1) with q_e >= p - 1")
            if not np.allclose(Re.T @ Re, np.eye(p - 1), atol=ORTHO_TOL, rtol=0):
                raise ValidationError("Re columns are not orthonormal")
        elif np.any(be != 0):
            raise ValidationError("Be must vanish without a Euclidean block")
        tot = bs**2 + be**2
        if np.any(np.diff(tot) > 1e-12 * max(1.0, tot.max(initial=0.0))):
            raise ValidationError("scales must satisfy the ordering beta_2 >= ... >= beta_p")
        for name, val in (("B0", B0), ("bs", bs), ("be", be), ("Rs", Rs), ("Re", Re)):
            if val is not None:
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def p(self) -> int:
        return self.B0.shape[0]

    @property
    def q_s(self) -> int:
        return 0 if self.Rs is None else self.Rs.shape[0]

    @property
    def q_e(self) -> int:
        return 0 if self.Re is None else self.Re.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.p, self.q_s, self.q_e)

    @property
    def b01(self) -> NDArray:
        return self.B0[:, 0]

    @property
    def rs1(self) -> NDArray | None:
        return None if self.Rs is None else self.Rs[:, 0]

    def scaled(self, factor: float) -> LinkParams:
        """Multiply both scale blocks by a nonnegative factor."""
        return replace(self, bs=self.bs * factor, be=self.be * factor)


@dataclass(frozen=True)
class ReparamLink:
    """The ``(b01, rs1, Omega)`` form of the link.

    ``Omega`` is ``p x (q_s + q_e)``, spherical columns first.  ``meta`` is
    free-form bookkeeping (for instance the repeated-singular-value flag set
    by :func:`from_reparam`) and does not affect evaluation.
    """

    b01: NDArray
    rs1: NDArray | None
    Omega: NDArray
    q_s: int
    q_e: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        b01 = np.array(self.b01, dtype=float).reshape(-1)
        Om = np.array(self.Omega, dtype=float)
        p = b01.shape[0]
        if Om.shape != (p, self.q_s + self.q_e):
            raise ValidationError("Omega must be p x (q_s + q_e)")
        if abs(np.linalg.norm(b01) - 1) > 1e-10:
            raise ValidationError("b01 must be a unit vector")
        rs1 = None
        if self.q_s > 0:
            if self.rs1 is None:
                raise ValidationError("rs1 required when q_s > 0")
            rs1 = np.array(self.rs1, dtype=float).reshape(-1)
            if rs1.shape != (self.q_s,) or abs(np.linalg.norm(rs1) - 1) > 1e-10:
                raise ValidationError("rs1 must be a unit vector of length q_s")
            rs1.setflags(write=False)
        b01.setflags(write=False)
        Om.setflags(write=False)
        object.__setattr__(self, "b01", b01)
        object.__setattr__(self, "rs1", rs1)
        object.__setattr__(self, "Omega", Om)

    @property
    def p(self) -> int:
        return self.b01.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.p, self.q_s, self.q_e)

    @property
    def Omega_s(self) -> NDArray:
        return self.Omega[:, : self.q_s]

    @property
    def Omega_e(self) -> NDArray:
        return self.Omega[:, self.q_s :]


# ---------------------------------------------------------------------------
# Evaluation


def _prep(x, q: int, name: str):
    if q == 0:
        if x is not None and np.size(x) > 0:
            raise ValidationError(f"{name} given but the block is absent")
        return None, None
    if x is None:
        raise ValidationError(f"{name} is required")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != q:
        raise ValidationError(f"{name} has {x2.shape[1]} columns, expected {q}")
    return x2, single


def _stack(params_dims, x_s, x_e):
    p, q_s, q_e = params_dims
    xs, s1 = _prep(x_s, q_s, "x_s")
    xe, s2 = _prep(x_e, q_e, "x_e")
    single = s1 if s1 is not None else s2
    if xs is not None and xe is not None and xs.shape[0] != xe.shape[0]:
        raise ValidationError("x_s and x_e have different numbers of rows")
    if xs is not None and np.any(np.abs(np.linalg.norm(xs, axis=1) - 1) > 1e-8):
        raise ValidationError("spherical covariates must be unit vectors")
    n = xs.shape[0] if xs is not None else xe.shape[0]
    return xs, xe, n, single


def _pole_denominator(xs: NDArray, r: NDArray) -> NDArray:
    # 1 + r^T x = |x + r|^2 / 2 for unit vectors; the right side keeps full
    # relative accuracy next to the pole x = -r.
    d = xs + r
    return 0.5 * np.sum(d * d, axis=1), np.max(np.abs(d), axis=1) < POLE_TOL


def _t_raw(params: LinkParams, xs, xe, n):
    p = params.p
    t = np.zeros((n, p - 1))
    pole = np.zeros(n, dtype=bool)
    if xs is not None:
        den, pole = _pole_denominator(xs, params.rs1)
        num = xs @ params.Rs[:, 1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            t += np.where(pole[:, None], 0.0, num / np.where(pole, 1.0, den)[:, None]) * params.bs
    if xe is not None:
        t += (xe @ params.Re) * params.be
    return t, pole


def _mu_from_t(t: NDArray, b01: NDArray, rest: NDArray) -> NDArray:
    s = np.sum(t * t, axis=1, keepdims=True)
    return ((1.0 - s) * b01 + 2.0 * t @ rest.T) / (1.0 + s)


def _finish(out, single):
    return out[0] if single else out


def t_transform(params: LinkParams, x_s=None, x_e=None) -> NDArray:
    """Stereographic coordinates ``t(x)`` of the link before ``B0 S^{-1}``."""
    xs, xe, n, single = _stack(params.dims, x_s, x_e)
    t, pole = _t_raw(params, xs, xe, n)
    if np.any(pole):
        raise PoleError("x_s = -rs1 is a pole of t(x)")
    return _finish(t, single)


def link_eval(params: LinkParams, x_s=None, x_e=None) -> NDArray:
    """Mean direction ``mu(x)`` via the closed form in ``t(x)``.

    At the pole ``x_s = -rs1`` the value is ``-b01`` when ``Bs != 0`` and
    ``b01`` otherwise.
    """
    xs, xe, n, single = _stack(params.dims, x_s, x_e)
    t, pole = _t_raw(params, xs, xe, n)
    mu = _mu_from_t(t, params.B0[:, 0], params.B0[:, 1:])
    if np.any(pole):
        sign = -1.0 if np.any(params.bs != 0) else 1.0
        mu[pole] = sign * params.B0[:, 0]
    return _finish(mu, single)


def link_eval_literal(params: LinkParams, x_s=None, x_e=None) -> NDArray:
    """Reference evaluation by literally composing the stereographic maps."""
    xs, xe, n, single = _stack(params.dims, x_s, x_e)
    p = params.p
    out = np.empty((n, p))
    for i in range(n):
        z = ExtendedPoint.finite(np.zeros(p - 1))
        if xs is not None:
            z = stereo_project(params.Rs.T @ xs[i]).transform(np.diag(params.bs))
        if xe is not None:
            z = z + np.diag(params.be) @ (params.Re.T @ xe[i])
        out[i] = params.B0 @ stereo_inverse(z)
    return _finish(out, single)


def image_dimension(params: LinkParams) -> int:
    """Dimension ``k - 1`` of the image sphere of the link."""
    tot = params.bs**2 + params.be**2
    nz = np.nonzero(tot > 0)[0]
    if nz.size == 0:
        return 0
    return int(nz[-1] + 1)


# ---------------------------------------------------------------------------
# Circular special cases


def downs_link(theta, beta0: float, eta: float, delta: int, beta_s2: float):
    """Circular Moebius link ``beta0 + 2 arctan(delta beta_s2 tan((theta - eta)/2))``."""
    theta = np.asarray(theta, dtype=float)
    half = wrap_angle(theta - eta) / 2.0
    at_pole = np.isclose(np.abs(half), np.pi / 2, rtol=0, atol=1e-15)
    with np.errstate(over="ignore"):
        tn = np.tan(np.where(at_pole, 0.0, half))
    val = beta0 + 2.0 * np.arctan(delta * beta_s2 * tn)
    pole_val = beta0 + (np.pi if beta_s2 != 0 else 0.0)
    return wrap_angle(np.where(at_pole, pole_val, val))


def fisher_lee_link(x_e, beta0: float, gamma):
    """Circular link ``beta0 + 2 arctan(gamma^T x_e)``."""
    x_e = np.asarray(x_e, dtype=float)
    return wrap_angle(beta0 + 2.0 * np.arctan(x_e @ np.asarray(gamma, dtype=float)))


def hybrid_link(theta, x_e, beta0: float, eta: float, delta: int, beta_s2: float, gamma):
    """Circular link with both a circular and a Euclidean covariate."""
    theta = np.asarray(theta, dtype=float)
    half = wrap_angle(theta - eta) / 2.0
    at_pole = np.isclose(np.abs(half), np.pi / 2, rtol=0, atol=1e-15)
    tn = np.tan(np.where(at_pole, 0.0, half))
    lin = np.asarray(x_e, dtype=float) @ np.asarray(gamma, dtype=float)
    val = beta0 + 2.0 * np.arctan(delta * beta_s2 * tn + lin)
    pole_val = beta0 + (np.pi if beta_s2 != 0 else 2.0 * np.arctan(lin))
    return wrap_angle(np.where(at_pole, pole_val, val))


def downs_params(beta0: float, eta: float, delta: int, beta_s2: float) -> LinkParams:
    """Embed the circular Moebius link as a general link with ``p = q_s = 2``."""
    if delta not in (-1, 1):
        raise DomainError("delta must be +1 or -1")
    return LinkParams(
        B0=_rot2(beta0), bs=[beta_s2], be=[0.0], Rs=_rot2(eta) @ np.diag([1.0, delta])
    )


def fisher_lee_params(beta0: float, gamma) -> LinkParams:
    gamma = np.asarray(gamma, dtype=float)
    g = float(np.linalg.norm(gamma))
    direction = gamma / g if g > 0 else np.eye(gamma.shape[0])[0]
    return LinkParams(B0=_rot2(beta0), bs=[0.0], be=[g], Re=direction[:, None])


def hybrid_params(beta0: float, eta: float, delta: int, beta_s2: float, gamma) -> LinkParams:
    gamma = np.asarray(gamma, dtype=float)
    g = float(np.linalg.norm(gamma))
    direction = gamma / g if g > 0 else np.eye(gamma.shape[0])[0]
    return LinkParams(
        B0=_rot2(beta0),
        bs=[beta_s2],
        be=[g],
        Rs=_rot2(eta) @ np.diag([1.0, delta]),
        Re=direction[:, None],
    )


# ---------------------------------------------------------------------------
# Moebius form and closure


def _isotropic_scale(params: LinkParams) -> float:
    p, q_s, q_e = params.dims
    if q_s != p or q_e != 0:
        raise DomainError("requires a spherical-only link with q_s = p")
    beta = float(params.bs[0])
    if not np.allclose(params.bs, beta, rtol=1e-12, atol=0):
        raise DomainError("requires an isotropic scale matrix Bs = beta I")
    if beta <= 0:
        raise DomainError("requires beta > 0")
    return beta


def mobius_link_form(params: LinkParams) -> tuple[NDArray, float, NDArray]:
    """Return ``(R0, phi, rs1)`` with ``mu(x) = mobius_sphere(x, R0, phi rs1)``."""
    beta = _isotropic_scale(params)
    phi = (1.0 - beta) / (1.0 + beta)
    return params.B0 @ params.Rs.T, phi, params.Rs[:, 0].copy()


def canonicalize(B0, bs, be, Rs, Re) -> LinkParams:
    """Sort scale pairs into decreasing order and make ``B0`` a rotation.

    Jointly permuting (or negating) ``b0j``, ``r_sj`` and ``r_{e,j-1}``
    leaves the link unchanged, so both operations are free.
    """
    B0 = np.array(B0, dtype=float)
    bs = np.asarray(bs, dtype=float)
    be = np.asarray(be, dtype=float)
    Rs = None if Rs is None else np.array(Rs, dtype=float)
    Re = None if Re is None else np.array(Re, dtype=float)
    order = np.argsort(-(bs**2 + be**2), kind="stable")
    B0[:, 1:] = B0[:, 1:][:, order]
    bs, be = bs[order], be[order]
    if Rs is not None:
        Rs[:, 1:] = Rs[:, 1:][:, order]
    if Re is not None:
        Re = Re[:, order]
    if np.linalg.det(B0) < 0:
        B0[:, -1] *= -1
        if Rs is not None:
            Rs[:, -1] *= -1
        if Re is not None:
            Re[:, -1] *= -1
    return LinkParams(B0=B0, bs=bs, be=be, Rs=Rs, Re=Re)


def _mobius_to_link(Rt: NDArray, psi: NDArray) -> LinkParams:
    p = psi.shape[0]
    s = float(np.linalg.norm(psi))
    if s >= 1.0:
        raise DegenerateError("composed Moebius parameter lies outside the unit ball")
    beta = (1.0 - s) / (1.0 + s)
    if s > 0:
        Rp = gram_schmidt([psi / s], p)
    else:
        Rp = np.eye(p)
    if np.sign(np.linalg.det(Rp)) != np.sign(np.linalg.det(Rt)):
        Rp[:, -1] *= -1
    B0 = Rt @ Rp
    return LinkParams(B0=B0, bs=np.full(p - 1, beta), be=np.zeros(p - 1), Rs=Rp)


def compose_links(inner: LinkParams, outer: LinkParams) -> LinkParams:
    """Single link equal to ``x -> outer(inner(x))``.

    Case (i): ``outer.Rs`` equals ``inner.B0``; the scales multiply.
    Case (ii): both links are isotropic, spherical-only with ``q_s = p``.
    """
    p = inner.p
    if outer.dims != (p, p, 0):
        raise DomainError("outer link must be spherical-only with q_s = p")
    if np.allclose(outer.Rs, inner.B0, atol=1e-10, rtol=0):
        return canonicalize(
            outer.B0, inner.bs * outer.bs, inner.be * outer.bs, inner.Rs, inner.Re
        )
    try:
        beta1 = _isotropic_scale(inner)
        beta2 = _isotropic_scale(outer)
    except DomainError as exc:
        raise DomainError("links satisfy neither closure case") from exc
    R1t, phi1, r1 = mobius_link_form(inner)
    R2t, phi2, r2 = mobius_link_form(outer)
    psi1, psi2 = phi1 * r1, phi2 * r2
    # pure rotations compose trivially; the general formula divides by |psi|
    if np.linalg.norm(psi2) == 0.0:
        return _mobius_to_link(R2t @ R1t, psi1)
    if np.linalg.norm(psi1) == 0.0:
        return _mobius_to_link(R2t @ R1t, R1t.T @ psi2)
    B01, B02, R1, R2 = inner.B0, outer.B0, inner.Rs, outer.Rs
    m = mobius_sphere(R1 @ B01.T @ psi2, np.eye(p), psi1)
    psi_t = m / float(m @ m)
    mid = B01 @ R1.T @ psi1 / float(psi1 @ psi1) + psi2 / float(psi2 @ psi2)
    Rt = (
        B02
        @ R2.T
        @ householder(psi2)
        @ householder(mid)
        @ B01
        @ R1.T
        @ householder(psi1)
        @ householder(psi_t)
    )
    del beta1, beta2
    return _mobius_to_link(Rt, psi_t)


# ---------------------------------------------------------------------------
# Reparameterisation


def to_reparam(params: LinkParams) -> ReparamLink:
    """Map natural parameters to ``(b01, rs1, Omega)``."""
    blocks = []
    if params.Rs is not None:
        blocks.append(np.diag(params.bs) @ params.Rs[:, 1:].T)
    if params.Re is not None:
        blocks.append(np.diag(params.be) @ params.Re.T)
    Omega = params.B0[:, 1:] @ np.hstack(blocks)
    return ReparamLink(
        b01=params.B0[:, 0].copy(),
        rs1=None if params.Rs is None else params.Rs[:, 0].copy(),
        Omega=Omega,
        q_s=params.q_s,
        q_e=params.q_e,
    )


def link_eval_reparam(rp: ReparamLink, x_s=None, x_e=None) -> NDArray:
    """Mean direction from ``(b01, rs1, Omega)``."""
    xs, xe, n, single = _stack(rp.dims, x_s, x_e)
    u = np.zeros((n, rp.p))
    pole = np.zeros(n, dtype=bool)
    if xs is not None:
        den, pole = _pole_denominator(xs, rp.rs1)
        u += (xs / np.where(pole, 1.0, den)[:, None]) @ rp.Omega_s.T
    if xe is not None:
        u += xe @ rp.Omega_e.T
    s = np.sum(u * u, axis=1, keepdims=True)
    mu = ((1.0 - s) * rp.b01 + 2.0 * u) / (1.0 + s)
    if np.any(pole):
        sign = -1.0 if np.any(rp.Omega_s != 0) else 1.0
        mu[pole] = sign * rp.b01
    return _finish(mu, single)


def proj_constraint(M: ArrayLike, b01: ArrayLike, rs1: ArrayLike | None, q_s: int) -> NDArray:
    """Project ``M`` onto the linear constraints ``b01^T M = 0``, ``M I_s rs1 = 0``."""
    M = np.asarray(M, dtype=float)
    b01 = np.asarray(b01, dtype=float)
    out = M - np.outer(b01, b01 @ M)
    if q_s > 0:
        r = np.zeros(M.shape[1])
        r[:q_s] = np.asarray(rs1, dtype=float)
        out = out - np.outer(out @ r, r)
    return out


def commutator_matrix(Omega: NDArray, q_s: int) -> NDArray:
    Os, Oe = Omega[:, :q_s], Omega[:, q_s:]
    A = Os @ Os.T
    B = Oe @ Oe.T
    return A @ B - B @ A


def commutator_residual(rp: ReparamLink) -> float:
    """Frobenius norm of ``[Omega_s Omega_s^T, Omega_e Omega_e^T]``."""
    if rp.q_s == 0 or rp.q_e == 0:
        return 0.0
    return float(np.linalg.norm(commutator_matrix(rp.Omega, rp.q_s)))


def constraint_residuals(rp: ReparamLink) -> dict[str, float]:
    out = {"b01": float(np.max(np.abs(rp.b01 @ rp.Omega), initial=0.0))}
    if rp.q_s > 0:
        out["rs1"] = float(np.max(np.abs(rp.Omega_s @ rp.rs1)))
    out["commutator"] = commutator_residual(rp)
    return out


def _orient(v: NDArray) -> float:
    nz = np.nonzero(np.abs(v) > 1e-14 * max(np.max(np.abs(v)), 1e-300))[0]
    if nz.size == 0:
        return 1.0
    return 1.0 if v[nz[0]] > 0 else -1.0


def from_reparam(rp: ReparamLink, *, tol: float = 1e-6) -> LinkParams:
    """Recover natural parameters from ``(b01, rs1, Omega)`` via an SVD.

    Sets ``rp.meta['repeated_singular_values']`` and emits a warning when
    two nonzero singular values coincide (relative tolerance 1e-8); in that
    case the common eigenspaces are split using ``Omega_s Omega_s^T``.
    """
    p, q_s, q_e = rp.dims
    res = constraint_residuals(rp)
    scale = max(1.0, float(np.linalg.norm(rp.Omega)) ** 2)
    if res["b01"] > tol or res.get("rs1", 0.0) > tol or res["commutator"] > tol * scale:
        raise ValidationError(f"reparameterised link violates its constraints: {res}")
    Om = rp.Omega
    U, sv, Vt = np.linalg.svd(Om, full_matrices=False)
    k = min(p - 1, sv.shape[0])
    U, sv, Vt = U[:, :k], sv[:k], Vt[:k]
    smax = sv[0] if sv.size else 0.0
    nonzero = sv > ZERO_SCALE_REL * smax if smax > 0 else np.zeros(k, dtype=bool)
    nz = int(nonzero.sum())
    U, sv, Vt = U[:, :nz], sv[:nz], Vt[:nz]

    repeated = False
    if nz > 1:
        i = 0
        A = rp.Omega_s @ rp.Omega_s.T if q_s > 0 else None
        while i < nz:
            j = i + 1
            while j < nz and abs(sv[j] - sv[i]) <= REPEAT_REL * sv[i]:
                j += 1
            if j - i > 1:
                repeated = True
                if A is not None:
                    Uc = U[:, i:j]
                    w, Q = np.linalg.eigh(Uc.T @ A @ Uc)
                    Q = Q[:, ::-1]
                    U[:, i:j] = Uc @ Q
                    Vt[i:j] = (U[:, i:j].T @ Om) / sv[i:j, None]
            i = j
    if repeated:
        rp.meta["repeated_singular_values"] = True
        warnings.warn("repeated singular values; recovered axes are not unique", RuntimeWarning)

    for j in range(nz):
        s = _orient(Vt[j])
        Vt[j] *= s
        U[:, j] *= s

    Vs, Ve = Vt[:, :q_s], Vt[:, q_s:]
    bs_nz = sv * np.linalg.norm(Vs, axis=1) if q_s > 0 else np.zeros(nz)
    be_nz = sv * np.linalg.norm(Ve, axis=1) if q_e > 0 else np.zeros(nz)

    B0 = gram_schmidt([rp.b01] + [U[:, j] for j in range(nz)], p)
    bs = np.zeros(p - 1)
    be = np.zeros(p - 1)
    bs[:nz] = bs_nz
    be[:nz] = be_nz
    small = ZERO_SCALE_REL * max(smax, 1e-300)
    bs[bs < small] = 0.0
    be[be < small] = 0.0

    Rs = Re = None
    if q_s > 0:
        cols = [rp.rs1] + [Vs[j] / np.linalg.norm(Vs[j]) for j in range(nz) if bs[j] > 0]
        idx = [j for j in range(nz) if bs[j] > 0]
        Rs = _complete_columns(cols, [0] + [j + 1 for j in idx], q_s, p)
    if q_e > 0:
        idx = [j for j in range(nz) if be[j] > 0]
        cols = [Ve[j] / np.linalg.norm(Ve[j]) for j in idx]
        Re = _complete_columns(cols, idx, q_e, p - 1)

    if np.linalg.det(B0) < 0:
        B0[:, -1] *= -1
        if Rs is not None:
            Rs[:, -1] *= -1
        if Re is not None:
            Re[:, -1] *= -1
    return LinkParams(B0=B0, bs=bs, be=be, Rs=Rs, Re=Re)


def _complete_columns(cols, positions, q, k) -> NDArray:
    """Place orthonormalised ``cols`` at ``positions`` and fill the rest."""
    basis = gram_schmidt(cols, q) if cols else np.eye(q)
    out = np.empty((q, k))
    used = set(positions)
    filler = iter(range(len(cols), q))
    for c, pos in zip(range(len(cols)), positions):
        out[:, pos] = basis[:, c]
    for pos in range(k):
        if pos not in used:
            out[:, pos] = basis[:, next(filler)]
    return out


def random_link_params(
    dims: tuple[int, int, int],
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.2, 2.0),
) -> LinkParams:
    """Draw a valid parameter set with Haar-distributed rotations.

    Scales are drawn uniformly from ``scale_range`` and sorted so the
    ordering constraint holds.
    """
    p, q_s, q_e = dims

    def haar(q, k):
        Q, R = np.linalg.qr(rng.normal(size=(q, q)))
        return (Q * np.sign(np.diag(R)))[:, :k]

    B0 = haar(p, p)
    if np.linalg.det(B0) < 0:
        B0[:, -1] *= -1
    lo, hi = scale_range
    bs = rng.uniform(lo, hi, p - 1) if q_s else np.zeros(p - 1)
    be = rng.uniform(lo, hi, p - 1) if q_e else np.zeros(p - 1)
    return canonicalize(
        B0, bs, be, haar(q_s, p) if q_s else None, haar(q_e, p - 1) if q_e else None
    )
