"""Differentiable log-likelihoods in the internal optimisation coordinates.

The parameter vector ``theta`` is laid out as

    b (p) | r (q_s) | M (p * (q_s + q_e)) | log kappa | free log scales (p - 2)
          | gamma01 retraction (p - 1) | base-axes skew parameters

where everything after ``M`` is present only for the SvMF model and the
retraction block only when ``gamma01`` is estimated.  ``b`` and ``r`` are
normalised inside the objective and ``M`` is projected onto the linear
constraints, so the only nonlinear equality constraints left are the unit
norms and the commutator condition.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp
from scipy import special

jax.config.update("jax_enable_x64", True)

POLE_EPS = 1e-8
ANTIPODAL_EPS = 1e-10
PENALTY = 1e6
GAMMA_MODES = ("estimated", "tied-to-b01", "tied-to-mean")


@dataclass(frozen=True)
class Layout:
    p: int
    q_s: int
    q_e: int
    model: str = "vmf"
    gamma_mode: str = "estimated"

    def __post_init__(self):
        if self.model not in ("vmf", "svmf"):
            raise ValueError("model must be 'vmf' or 'svmf'")
        if self.gamma_mode not in GAMMA_MODES:
            raise ValueError(f"gamma01 mode must be one of {GAMMA_MODES}")

    @property
    def q(self) -> int:
        return self.q_s + self.q_e

    @cached_property
    def slices(self) -> dict[str, slice]:
        p = self.p
        sizes = [("b", p), ("r", self.q_s), ("M", p * self.q)]
        if self.model == "svmf":
            sizes += [("logk", 1), ("ls", p - 2)]
            sizes += [("d", p - 1 if self.gamma_mode == "estimated" else 0)]
            sizes += [("S", (p - 1) * (p - 2) // 2)]
        out, i = {}, 0
        for name, k in sizes:
            out[name] = slice(i, i + k)
            i += k
        out["_size"] = slice(0, i)
        return out

    @property
    def size(self) -> int:
        return self.slices["_size"].stop

    @property
    def n_commutator(self) -> int:
        if self.q_s == 0 or self.q_e == 0:
            return 0
        return (self.p - 1) * (self.p - 2) // 2

    @property
    def n_constraints(self) -> int:
        return 1 + (1 if self.q_s else 0) + self.n_commutator


# ---------------------------------------------------------------------------
# Normalising constant (jax version of distributions.vmf_log_norm_const)


def _asymptotic_coeffs(nu: float, terms: int = 30) -> np.ndarray:
    mu = 4.0 * nu * nu
    c = [1.0]
    for k in range(1, terms):
        c.append(c[-1] * -(mu - (2 * k - 1) ** 2) / (k * 8.0))
    return np.array(c)


def log_cp(p: int, kappa):
    if p == 3:
        small = kappa < 1e-4
        ks = jnp.where(small, 1.0, kappa)
        exact = jnp.log(2 * jnp.pi) + ks + jnp.log1p(-jnp.exp(-2 * ks)) - jnp.log(ks)
        series = jnp.log(4 * jnp.pi) + kappa**2 / 6.0 - kappa**4 / 180.0
        return jnp.where(small, series, exact)
    nu = p / 2.0 - 1.0
    k = np.arange(400)
    base = -nu * np.log(2.0) - special.gammaln(k + 1) - special.gammaln(k + nu + 1)
    small = kappa < 50.0
    ks = jnp.where(small & (kappa > 0), kappa, 1.0)
    ser = logsumexp(base + 2 * k * jnp.log(ks / 2.0))
    ser = jnp.where(kappa > 0, ser, base[0])
    kl = jnp.where(small, 50.0, kappa)
    coeffs = _asymptotic_coeffs(nu)
    total = jnp.sum(coeffs * kl ** -np.arange(coeffs.shape[0]))
    asy = kl - 0.5 * jnp.log(2 * jnp.pi * kl) + jnp.log(total) - nu * jnp.log(kl)
    return 0.5 * p * np.log(2 * np.pi) + jnp.where(small, ser, asy)


# ---------------------------------------------------------------------------
# Building blocks


def _normalise(v):
    return v / jnp.linalg.norm(v)


def link_parts(theta, L: Layout):
    s = L.slices
    b = _normalise(theta[s["b"]])
    M = theta[s["M"]].reshape(L.p, L.q)
    Om = M - jnp.outer(b, b @ M)
    r = None
    if L.q_s:
        r = _normalise(theta[s["r"]])
        rt = jnp.concatenate([r, jnp.zeros(L.q_e)])
        Om = Om - jnp.outer(Om @ rt, rt)
    return b, r, Om, M


def mean_directions(b, r, Om, XS, XE, L: Layout):
    """Mean directions and a per-observation pole indicator."""
    n = XS.shape[0] if L.q_s else XE.shape[0]
    u = jnp.zeros((n, L.p))
    pole = jnp.zeros(n, dtype=bool)
    if L.q_s:
        d = XS + r
        den = 0.5 * jnp.sum(d * d, axis=1)
        pole = den < POLE_EPS
        u = u + (XS / jnp.where(pole, 1.0, den)[:, None]) @ Om[:, : L.q_s].T
    if L.q_e:
        u = u + XE @ Om[:, L.q_s :].T
    ss = jnp.sum(u * u, axis=1)
    mu = ((1.0 - ss)[:, None] * b + 2.0 * u) / (1.0 + ss)[:, None]
    return mu, pole


def cayley(S):
    eye = jnp.eye(S.shape[0])
    return jnp.linalg.solve((eye + S).T, (eye - S).T).T


def skew(v, k):
    S = jnp.zeros((k, k))
    if k > 1:
        iu = np.triu_indices(k, 1)
        S = S.at[iu].set(v)
    return S - S.T


def base_frame(theta, b, ctx, L: Layout):
    """Base location and base axes (columns) for the SvMF model."""
    s = L.slices
    g0, G0 = ctx["g_init"], ctx["G_init"]
    if L.gamma_mode == "estimated":
        gam = _normalise(g0 + G0 @ theta[s["d"]])
    elif L.gamma_mode == "tied-to-b01":
        gam = b
    else:
        gam = g0
    # transport the initial axes from g0 to gam, then rotate within the tangent space
    T = G0 - jnp.outer(g0 + gam, gam @ G0) / (1.0 + gam @ g0)
    S = skew(theta[s["S"]], L.p - 1)
    return gam, T @ cayley(S)


def scales_from(theta, a1, L: Layout):
    free = theta[L.slices["ls"]]
    logs = jnp.concatenate([free, -jnp.sum(free, keepdims=True)])
    return jnp.concatenate([jnp.array([a1]), jnp.exp(logs)])


# ---------------------------------------------------------------------------
# Per-observation log-likelihood terms


def vmf_terms(theta, data, ctx, L: Layout):
    """``y_i^T mu(x_i)`` and the invalid-observation mask."""
    Y, XS, XE, w = data
    b, r, Om, _ = link_parts(theta, L)
    mu, pole = mean_directions(b, r, Om, XS, XE, L)
    return jnp.sum(Y * mu, axis=1), pole


def svmf_terms(theta, data, ctx, L: Layout):
    Y, XS, XE, w = data
    b, r, Om, _ = link_parts(theta, L)
    mu, pole = mean_directions(b, r, Om, XS, XE, L)
    gam, G = base_frame(theta, b, ctx, L)
    kappa = jnp.exp(theta[L.slices["logk"]][0])
    a = scales_from(theta, ctx["a1"], L)
    c = 1.0 + mu @ gam
    bad = pole | (c < ANTIPODAL_EPS)
    c = jnp.where(bad, 1.0, c)
    z1 = jnp.sum(Y * mu, axis=1)
    yG = Y @ G
    muG = mu @ G
    zt = yG - ((Y @ gam) + z1)[:, None] * muG / c[:, None]
    J = (z1 / a[0]) ** 2 + jnp.sum((zt / a[1:]) ** 2, axis=1)
    ll = (
        -log_cp(L.p, kappa)
        - jnp.log(a[0])
        - 0.5 * L.p * jnp.log(J)
        + kappa * z1 / (a[0] * jnp.sqrt(J))
    )
    return ll, bad


def total_loglik(theta, data, ctx, L: Layout, kappa_vmf=None):
    """Weighted log-likelihood with invalid observations penalised."""
    w = data[3]
    if L.model == "vmf":
        terms, bad = vmf_terms(theta, data, ctx, L)
        p = L.p
        terms = kappa_vmf * terms - log_cp(p, kappa_vmf)
    else:
        terms, bad = svmf_terms(theta, data, ctx, L)
    active = w > 0
    terms = jnp.where(active & ~bad, terms, 0.0)
    return jnp.sum(w * terms) - PENALTY * jnp.sum(jnp.where(active & bad, w, 0.0))


def solver_objective(theta, data, ctx, L: Layout):
    """Quantity minimised by the solver (mean negative fit criterion).

    For the vMF model this is ``-mean w_i y_i^T mu_i``; for SvMF the mean
    negative log-likelihood.  A small quadratic pins the directions of
    ``M`` that the projection removes.
    """
    w = data[3]
    W = jnp.sum(w)
    active = w > 0
    if L.model == "vmf":
        terms, bad = vmf_terms(theta, data, ctx, L)
    else:
        terms, bad = svmf_terms(theta, data, ctx, L)
    terms = jnp.where(active & ~bad, terms, 0.0)
    val = -jnp.sum(w * terms) / W + PENALTY * jnp.sum(jnp.where(active & bad, w, 0.0)) / W
    b, r, Om, M = link_parts(theta, L)
    return val + 0.5 * jnp.sum((M - Om) ** 2)


def constraints(theta, ctx, L: Layout):
    s = L.slices
    out = [jnp.sum(theta[s["b"]] ** 2) - 1.0]
    if L.q_s:
        out.append(jnp.sum(theta[s["r"]] ** 2) - 1.0)
    if L.n_commutator:
        b, r, Om, _ = link_parts(theta, L)
        Os, Oe = Om[:, : L.q_s], Om[:, L.q_s :]
        A, B = Os @ Os.T, Oe @ Oe.T
        C = A @ B - B @ A
        # express the commutator in a basis of the tangent space at b, where it lives
        b0, T0 = ctx["b_ref"], ctx["T_ref"]
        P = T0 - jnp.outer(b0 + b, b @ T0) / (1.0 + b @ b0)
        Ct = P.T @ C @ P
        iu = np.triu_indices(L.p - 1, 1)
        out.append(Ct[iu])
    return jnp.concatenate([jnp.atleast_1d(v) for v in out])


class Compiled:
    """Jitted objective, gradient and constraint functions for one layout."""

    def __init__(self, L: Layout):
        self.L = L
        self.obj = jax.jit(jax.value_and_grad(lambda t, d, c: solver_objective(t, d, c, L)))
        self.cons = jax.jit(lambda t, c: constraints(t, c, L))
        self.cons_jac = jax.jit(jax.jacfwd(lambda t, c: constraints(t, c, L)))
        self.hess = jax.jit(jax.hessian(lambda t, d, c: solver_objective(t, d, c, L)))
        self.cons_hess = jax.jit(jax.hessian(lambda t, c, lam: lam @ constraints(t, c, L)))
        self.loglik = jax.jit(lambda t, d, c, k: total_loglik(t, d, c, L, k))
        self.loglik_grad = jax.jit(jax.grad(lambda t, d, c, k: total_loglik(t, d, c, L, k)))
        self.terms = jax.jit(
            lambda t, d, c: (vmf_terms if L.model == "vmf" else svmf_terms)(t, d, c, L)
        )


_CACHE: dict[Layout, Compiled] = {}


def compiled(L: Layout) -> Compiled:
    if L not in _CACHE:
        _CACHE[L] = Compiled(L)
    return _CACHE[L]
