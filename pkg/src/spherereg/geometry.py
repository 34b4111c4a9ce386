"""Geometric primitives on the sphere and on compactified Euclidean space.

Everything here is a pure function of its inputs.  Points of the compactified
space are represented by :class:`ExtendedPoint`, which carries an explicit
infinity flag instead of a sentinel value so the arithmetic conventions
``inf + c = inf`` and ``B inf = inf`` (for ``B != 0``) stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import AntipodalError, DegenerateError, DomainError, PoleError

BALL_TOL = 1e-10
POLE_TOL = 1e-12
ANTIPODAL_TOL = 1e-10
RANK_TOL = 1e-10

__all__ = [
    "ExtendedPoint",
    "MobiusParams",
    "stereo_project",
    "stereo_inverse",
    "mobius_sphere",
    "mobius_extended",
    "mobius_extended_compose",
    "transport_matrix",
    "amaral_rotation",
    "gram_schmidt",
    "cayley",
    "inverse_cayley",
    "skew_from_params",
    "skew_to_params",
    "householder",
    "unit",
]


def unit(x: ArrayLike) -> NDArray:
    """Return ``x / ||x||``; raises on the zero vector."""
    x = np.asarray(x, dtype=float)
    nrm = np.linalg.norm(x)
    if nrm == 0.0:
        raise DegenerateError("cannot normalise the zero vector")
    return x / nrm


# ---------------------------------------------------------------------------
# Compactified Euclidean space


@dataclass(frozen=True)
class ExtendedPoint:
    """A point of R^k together with the single point at infinity.

    Exactly one of the two variants is active: ``value`` holds the finite
    coordinates, or ``is_infinite`` is set and ``value`` is ``None``.
    """

    dim: int
    value: NDArray | None = None
    is_infinite: bool = False

    def __post_init__(self):
        if self.is_infinite == (self.value is not None):
            raise ValueError("ExtendedPoint must be either finite or infinite")
        if self.value is not None:
            v = np.array(self.value, dtype=float).reshape(-1)
            if v.shape[0] != self.dim:
                raise ValueError("dimension mismatch")
            v.setflags(write=False)
            object.__setattr__(self, "value", v)

    @classmethod
    def finite(cls, v: ArrayLike) -> ExtendedPoint:
        v = np.asarray(v, dtype=float).reshape(-1)
        return cls(dim=v.shape[0], value=v)

    @classmethod
    def infinity(cls, dim: int) -> ExtendedPoint:
        return cls(dim=dim, is_infinite=True)

    def __add__(self, other) -> ExtendedPoint:
        if isinstance(other, ExtendedPoint):
            if self.is_infinite or other.is_infinite:
                return ExtendedPoint.infinity(self.dim)
            other = other.value
        if self.is_infinite:
            return self
        return ExtendedPoint.finite(self.value + np.asarray(other, dtype=float))

    __radd__ = __add__

    def transform(self, B: ArrayLike) -> ExtendedPoint:
        """Apply a matrix; ``B inf = inf`` unless ``B`` is the zero matrix."""
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if self.is_infinite:
            if np.any(B != 0.0):
                return ExtendedPoint.infinity(B.shape[0])
            return ExtendedPoint.finite(np.zeros(B.shape[0]))
        return ExtendedPoint.finite(B @ self.value)

    def allclose(self, other: ExtendedPoint, atol: float = 1e-12) -> bool:
        if self.is_infinite or other.is_infinite:
            return self.is_infinite and other.is_infinite
        return bool(np.allclose(self.value, other.value, rtol=0.0, atol=atol))


def _as_extended(y) -> ExtendedPoint:
    if isinstance(y, ExtendedPoint):
        return y
    return ExtendedPoint.finite(y)


# ---------------------------------------------------------------------------
# Stereographic projection


def stereo_project(x: ArrayLike) -> ExtendedPoint:
    """Stereographic projection of a point of the closed unit ball.

    Returns ``(x_2, ..., x_p) / (1 + x_1)``; the south pole ``-e1`` maps to
    infinity.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] < 2:
        raise DomainError("need p >= 2")
    if np.linalg.norm(x) > 1.0 + BALL_TOL:
        raise DomainError("point lies outside the closed unit ball")
    south = np.zeros_like(x)
    south[0] = -1.0
    if np.max(np.abs(x - south)) < POLE_TOL:
        return ExtendedPoint.infinity(x.shape[0] - 1)
    return ExtendedPoint.finite(x[1:] / _one_plus_first(x))


def _one_plus_first(x: NDArray) -> float:
    # 1 + x_1 cancels near the south pole; on the sphere it equals
    # |x_{2:}|^2 / (1 - x_1) which has no cancellation there.
    if x[0] < 0.0 and abs(float(x @ x) - 1.0) < 1e-12:
        tail = float(x[1:] @ x[1:])
        return tail / (1.0 - x[0])
    return 1.0 + x[0]


def stereo_inverse(y) -> NDArray:
    """Inverse stereographic projection onto the unit sphere; ``inf -> -e1``."""
    y = _as_extended(y)
    out = np.zeros(y.dim + 1)
    if y.is_infinite:
        out[0] = -1.0
        return out
    v = y.value
    s = float(v @ v)
    out[0] = (1.0 - s) / (1.0 + s)
    out[1:] = 2.0 * v / (1.0 + s)
    return out


# ---------------------------------------------------------------------------
# Moebius transformations


def mobius_sphere(x: ArrayLike, R: ArrayLike, psi: ArrayLike) -> NDArray:
    """Moebius map ``R{(1-|psi|^2)(x+psi)/|x+psi|^2 + psi}``.

    Maps the sphere onto itself whenever ``|psi| != 1``.  ``x`` may be a
    single vector or an ``(n, p)`` array.
    """
    x = np.asarray(x, dtype=float)
    R = np.asarray(R, dtype=float)
    psi = np.asarray(psi, dtype=float)
    npsi2 = float(psi @ psi)
    if abs(np.sqrt(npsi2) - 1.0) <= 1e-10:
        raise DomainError("|psi| must differ from 1")
    d = x + psi
    d2 = np.sum(d * d, axis=-1, keepdims=True)
    if np.any(d2 <= 1e-300):
        raise PoleError("x = -psi is a pole of the Moebius map")
    inner = (1.0 - npsi2) * d / d2 + psi
    return inner @ R.T


@dataclass(frozen=True)
class MobiusParams:
    """Parameters ``(A, gamma, a, b, eps)`` of ``A(gamma (x+a)/|x+a|^eps + b)``."""

    A: NDArray
    gamma: float
    a: NDArray
    b: NDArray
    eps: int

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(-1))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(-1))
        if self.eps not in (0, 2):
            raise DomainError("eps must be 0 or 2")
        if self.gamma == 0:
            raise DomainError("gamma must be nonzero")


def mobius_extended(x, params: MobiusParams) -> ExtendedPoint:
    """Moebius transformation of the compactified Euclidean space.

    For ``eps = 0`` infinity is fixed.  For ``eps = 2`` the point ``-a`` is
    sent to infinity and infinity is sent to ``A b``.
    """
    x = _as_extended(x)
    A, g, a, b = params.A, params.gamma, params.a, params.b
    if params.eps == 0:
        if x.is_infinite:
            return ExtendedPoint.infinity(x.dim)
        return ExtendedPoint.finite(A @ (g * (x.value + a) + b))
    if x.is_infinite:
        return ExtendedPoint.finite(A @ b)
    d = x.value + a
    d2 = float(d @ d)
    if d2 == 0.0:
        return ExtendedPoint.infinity(x.dim)
    return ExtendedPoint.finite(A @ (g * d / d2 + b))


def mobius_extended_compose(p1: MobiusParams, p2: MobiusParams) -> MobiusParams:
    """Parameters of ``x -> M(M(x; p1); p2)`` when both maps have ``eps = 2``."""
    if p1.eps != 2 or p2.eps != 2:
        raise DomainError("closed-form composition needs eps1 = eps2 = 2")
    v = p1.A.T @ p2.a + p1.b
    v2 = float(v @ v)
    if v2 <= 1e-24:
        raise DegenerateError("v = A1^T a2 + b1 vanishes; composition is not of eps=2 type")
    H = householder(v)
    A = p2.A @ p1.A @ H
    gamma = p1.gamma * p2.gamma / v2
    a = p1.a + p1.gamma * v / v2
    b = H @ (p2.gamma * v / v2 + p1.A.T @ p2.b)
    return MobiusParams(A=A, gamma=gamma, a=a, b=b, eps=2)


# ---------------------------------------------------------------------------
# Parallel transport


def transport_matrix(a: ArrayLike, b: ArrayLike) -> NDArray:
    """Transport matrix ``I - (a+b)(a+b)^T / (1 + b^T a)``.

    Symmetric and involutory; sends tangent vectors at ``a`` to tangent
    vectors at ``b`` isometrically, and sends ``a`` to ``-b``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = 1.0 + float(b @ a)
    if c <= ANTIPODAL_TOL:
        raise AntipodalError("transport is undefined for antipodal points")
    s = a + b
    return np.eye(a.shape[0]) - np.outer(s, s) / c


def amaral_rotation(a: ArrayLike, b: ArrayLike) -> NDArray:
    """Rotation ``Q`` in the plane of ``a`` and ``b`` with ``Q^T a = b``.

    For a tangent vector ``xi`` at ``a``, ``Q^T xi`` coincides with
    ``transport_matrix(a, b) @ xi``.  Written without dividing by ``sin t``
    so that nearly equal inputs stay well conditioned.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = float(b @ a)
    if 1.0 + c <= ANTIPODAL_TOL:
        raise AntipodalError("rotation between antipodal points is not unique")
    w = b - c * a  # equals sin(t) u
    Q = (
        np.eye(a.shape[0])
        + np.outer(a, w)
        - np.outer(w, a)
        + (c - 1.0) * np.outer(a, a)
        - np.outer(w, w) / (1.0 + c)
    )
    return Q


# ---------------------------------------------------------------------------
# Orthonormal bases and rotation parameterisations


def gram_schmidt(seed: Sequence[ArrayLike] | NDArray, p: int | None = None) -> NDArray:
    """Orthonormalise seed vectors and complete with canonical axes.

    Modified Gram-Schmidt with one re-orthogonalisation pass.  Returns a
    ``p x p`` matrix whose leading columns span the seeds in order.
    """
    if isinstance(seed, np.ndarray) and seed.ndim == 2:
        vecs = [seed[:, j] for j in range(seed.shape[1])]
    else:
        vecs = [np.asarray(v, dtype=float).reshape(-1) for v in seed]
    if p is None:
        if not vecs:
            raise DomainError("need at least one seed vector or an explicit p")
        p = vecs[0].shape[0]
    basis: list[NDArray] = []

    def _orth(v):
        w = np.array(v, dtype=float)
        for _ in range(2):
            for q in basis:
                w -= (q @ w) * q
        return w

    for v in vecs:
        nv = np.linalg.norm(v)
        w = _orth(v)
        if nv == 0.0 or np.linalg.norm(w) <= RANK_TOL * max(nv, 1.0):
            raise DegenerateError("seed vectors are linearly dependent")
        basis.append(w / np.linalg.norm(w))
    if len(basis) > p:
        raise DegenerateError("more seeds than dimensions")
    for j in range(p):
        if len(basis) == p:
            break
        e = np.zeros(p)
        e[j] = 1.0
        w = _orth(e)
        if np.linalg.norm(w) > 1e-6:
            basis.append(w / np.linalg.norm(w))
    return np.column_stack(basis)


def cayley(S: ArrayLike) -> NDArray:
    """Cayley transform ``(I - S)(I + S)^{-1}`` of a skew-symmetric matrix."""
    S = np.asarray(S, dtype=float)
    eye = np.eye(S.shape[0])
    return np.linalg.solve((eye + S).T, (eye - S).T).T


def inverse_cayley(R: ArrayLike) -> NDArray:
    """Skew matrix ``S`` with ``cayley(S) = R``; the map is its own inverse."""
    R = np.asarray(R, dtype=float)
    eye = np.eye(R.shape[0])
    M = eye + R
    if np.linalg.cond(M) > 1e12:
        raise DegenerateError("rotation has an eigenvalue -1; Cayley chart excludes it")
    S = np.linalg.solve(M.T, (eye - R).T).T
    return 0.5 * (S - S.T)


def skew_from_params(theta: ArrayLike, k: int) -> NDArray:
    """Build a ``k x k`` skew matrix from its strictly upper triangle."""
    theta = np.asarray(theta, dtype=float)
    S = np.zeros((k, k))
    iu = np.triu_indices(k, 1)
    S[iu] = theta
    return S - S.T


def skew_to_params(S: ArrayLike) -> NDArray:
    S = np.asarray(S, dtype=float)
    return S[np.triu_indices(S.shape[0], 1)].copy()


def householder(v: ArrayLike) -> NDArray:
    """Householder reflection ``I - 2 v v^T / |v|^2``."""
    v = np.asarray(v, dtype=float)
    v2 = float(v @ v)
    if np.sqrt(v2) <= 1e-12:
        raise DegenerateError("Householder vector must be nonzero")
    return np.eye(v.shape[0]) - 2.0 * np.outer(v, v) / v2
