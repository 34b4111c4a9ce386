"""Covariate generators and response simulation from a fitted or true model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .distributions import (
    SvMFParams,
    TransportBase,
    as_generator,
    axes_at,
    sample_svmf,
    sample_vmf,
)
from .exceptions import ValidationError
from .link import LinkParams, ReparamLink, link_eval, link_eval_reparam

__all__ = ["Model", "generate_covariates", "simulate_responses", "model_from_fit"]


@dataclass(frozen=True)
class Model:
    """A complete generative model: link, error parameters and (SvMF) base."""

    link: LinkParams | ReparamLink
    error: SvMFParams
    base: TransportBase | None = None

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.link.dims

    def mean(self, xs=None, xe=None) -> NDArray:
        if isinstance(self.link, ReparamLink):
            return link_eval_reparam(self.link, xs, xe)
        return link_eval(self.link, xs, xe)


def model_from_fit(fit) -> Model:
    return Model(fit.link_reparam, fit.error, fit.base)


def generate_covariates(n: int, dims, seed=None, *, kappa_s: float = 5.0,
                        center=None, intercept: bool = False, sd: float = 1.0):
    """Draw spherical covariates from vMF(center, kappa_s) and Euclidean ones from N(0, sd^2 I).

    With ``intercept`` the first Euclidean column is a column of ones and
    the remaining ``q_e - 1`` columns are Gaussian.
    """
    p, q_s, q_e = dims
    rng = as_generator(seed)
    xs = xe = None
    if q_s:
        c = np.zeros(q_s)
        c[0] = 1.0
        if center is not None:
            c = np.asarray(center, dtype=float) / np.linalg.norm(center)
        xs = sample_vmf(c, kappa_s, n, seed=rng)
    if q_e:
        k = q_e - 1 if intercept else q_e
        z = rng.normal(scale=sd, size=(n, k))
        xe = np.hstack([np.ones((n, 1)), z]) if intercept else z
    return xs, xe


def simulate_responses(model: Model, xs=None, xe=None, seed=None) -> NDArray:
    """One response per covariate row from the model's error distribution."""
    mu = model.mean(xs, xe)
    mu = np.atleast_2d(mu)
    if model.base is None:
        if np.any(model.error.scales[1:] != 1.0):
            raise ValidationError("anisotropic errors need a transport base")
        return sample_vmf(mu, model.error.kappa, seed=seed)
    return sample_svmf(axes_at(mu, model.base), model.error, seed=seed)
