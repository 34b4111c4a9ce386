from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spherereg.exceptions import DomainError, PoleError, ValidationError
from spherereg.geometry import mobius_sphere
from spherereg.link import (
    LinkParams,
    ReparamLink,
    canonicalize,
    commutator_residual,
    compose_links,
    downs_link,
    downs_params,
    fisher_lee_link,
    fisher_lee_params,
    from_reparam,
    hybrid_link,
    hybrid_params,
    image_dimension,
    link_eval,
    link_eval_literal,
    link_eval_reparam,
    mobius_link_form,
    proj_constraint,
    random_link_params,
    t_transform,
    to_reparam,
)

CONFIGS = [(2, 2, 0), (2, 0, 1), (3, 3, 2), (3, 4, 3), (5, 0, 5), (3, 3, 0), (4, 5, 4)]


def rand_unit(rng, q, n):
    x = rng.normal(size=(n, q))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def covariates(rng, dims, n):
    p, q_s, q_e = dims
    xs = rand_unit(rng, q_s, n) if q_s else None
    xe = rng.normal(size=(n, q_e)) if q_e else None
    return xs, xe


def haar(rng, q):
    Q, R = np.linalg.qr(rng.normal(size=(q, q)))
    return Q * np.sign(np.diag(R))


def rotation(rng, p):
    Q = haar(rng, p)
    if np.linalg.det(Q) < 0:
        Q[:, -1] *= -1
    return Q


class TestLinkEval:
    @pytest.mark.parametrize("dims", CONFIGS)
    def test_closed_form_matches_composition(self, dims):
        rng = np.random.default_rng(sum(dims))
        for _ in range(10):
            P = random_link_params(dims, rng)
            xs, xe = covariates(rng, dims, 20)
            mu = link_eval(P, x_s=xs, x_e=xe)
            assert np.allclose(mu, link_eval_literal(P, x_s=xs, x_e=xe), atol=1e-12, rtol=0)
            assert np.allclose(np.linalg.norm(mu, axis=1), 1.0, atol=1e-12)

    def test_constant_when_scales_zero(self):
        rng = np.random.default_rng(0)
        P = random_link_params((3, 3, 2), rng)
        P0 = P.scaled(0.0)
        xs, xe = covariates(rng, P.dims, 30)
        assert np.allclose(link_eval(P0, x_s=xs, x_e=xe), P.b01)

    def test_identity_map(self):
        rng = np.random.default_rng(1)
        R = rotation(rng, 3)
        P = LinkParams(B0=R, bs=np.ones(2), be=np.zeros(2), Rs=R)
        xs = rand_unit(rng, 3, 40)
        assert np.allclose(link_eval(P, x_s=xs), xs, atol=1e-12)

    def test_pole_branch(self):
        rng = np.random.default_rng(2)
        P = random_link_params((3, 3, 2), rng)
        xe = rng.normal(size=2)
        mu = link_eval(P, x_s=-P.rs1, x_e=xe)
        assert np.allclose(mu, -P.b01)
        lit = link_eval_literal(P, x_s=-P.rs1, x_e=xe)
        assert np.allclose(lit, -P.b01)
        P0 = LinkParams(B0=P.B0, bs=np.zeros(2), be=np.zeros(2), Rs=P.Rs, Re=P.Re)
        assert np.allclose(link_eval(P0, x_s=-P.rs1, x_e=xe), P.b01)
        rp = to_reparam(P)
        assert np.allclose(link_eval_reparam(rp, x_s=-P.rs1, x_e=xe), -P.b01)
        with pytest.raises(PoleError):
            t_transform(P, x_s=-P.rs1, x_e=xe)

    def test_dimension_mismatch(self):
        P = random_link_params((3, 3, 2), np.random.default_rng(3))
        with pytest.raises(ValidationError):
            link_eval(P, x_s=np.eye(4)[0], x_e=np.zeros(2))
        with pytest.raises(ValidationError):
            link_eval(P, x_s=np.eye(3)[0])

    def test_t_transform(self):
        rng = np.random.default_rng(4)
        P = random_link_params((3, 3, 2), rng)
        assert np.allclose(t_transform(P, x_s=P.rs1, x_e=np.zeros(2)), 0.0)
        xs, xe = covariates(rng, P.dims, 10)
        t = t_transform(P, x_s=xs, x_e=xe)
        for i in range(10):
            for j in range(2):
                ref = P.bs[j] * (P.Rs[:, j + 1] @ xs[i]) / (1 + P.rs1 @ xs[i])
                ref += P.be[j] * (P.Re[:, j] @ xe[i])
                assert abs(t[i, j] - ref) < 1e-12
        Pe = random_link_params((3, 0, 2), rng)
        assert np.allclose(t_transform(Pe, x_e=xe), (xe @ Pe.Re) * Pe.be)

    def test_invalid_params(self):
        with pytest.raises(ValidationError):
            LinkParams(B0=np.eye(3), bs=[1.0, 2.0], be=[0.0, 0.0], Rs=np.eye(3))
        with pytest.raises(ValidationError):
            LinkParams(B0=np.eye(3), bs=[1.0, 1.0], be=[0.0, 0.0], Rs=np.eye(4)[:, :2])
        with pytest.raises(ValidationError):
            LinkParams(B0=np.diag([1.0, 1.0, -1.0]), bs=[1.0, 1.0], be=[0, 0], Rs=np.eye(3))

    @pytest.mark.parametrize("dims", [(3, 3, 2), (5, 0, 5), (2, 2, 0)])
    def test_monotone_attraction(self, dims):
        rng = np.random.default_rng(5)
        P = random_link_params(dims, rng)
        xs, xe = covariates(rng, dims, 5)
        grid = np.concatenate([[0.0], np.arange(0.1, 10.01, 0.1)])
        for i in range(5):
            kw = dict(
                x_s=None if xs is None else xs[i], x_e=None if xe is None else xe[i]
            )
            tn2 = float(np.sum(t_transform(P, **kw) ** 2))
            f = np.array([P.b01 @ link_eval(P.scaled(b), **kw) for b in grid])
            assert f[0] == pytest.approx(1.0, abs=1e-14)
            assert np.all(np.diff(f) < 0)
            ref = (1 - grid**2 * tn2) / (1 + grid**2 * tn2)
            assert np.allclose(f, ref, atol=1e-12)


class TestImage:
    def test_image_dimension(self):
        rng = np.random.default_rng(6)
        P = random_link_params((3, 3, 2), rng)
        assert image_dimension(P) == 2
        assert image_dimension(P.scaled(0.0)) == 0
        P1 = LinkParams(B0=P.B0, bs=[0.7, 0.0], be=[0.4, 0.0], Rs=P.Rs, Re=P.Re)
        assert image_dimension(P1) == 1
        xs, xe = covariates(rng, P.dims, 10_000)
        mu = link_eval(P1, x_s=xs, x_e=xe)
        off_plane = mu @ P.B0[:, 2]
        assert np.max(np.abs(off_plane)) < 1e-8


class TestCircular:
    def test_downs_examples(self):
        assert downs_link(np.pi / 2, 0.0, 0.0, 1, 1.0) == pytest.approx(np.pi / 2)
        assert downs_link(0.7, 0.3, 0.7, -1, 2.0) == pytest.approx(0.3)

    def test_downs_vs_general(self):
        rng = np.random.default_rng(7)
        thetas = np.linspace(-np.pi, np.pi, 64, endpoint=False)
        for _ in range(20):
            b0, eta = rng.uniform(-np.pi, np.pi, 2)
            delta = int(rng.choice([-1, 1]))
            bs2 = rng.uniform(0.05, 5)
            P = downs_params(b0, eta, delta, bs2)
            xs = np.column_stack([np.cos(thetas), np.sin(thetas)])
            mu = link_eval(P, x_s=xs)
            ang = np.arctan2(mu[:, 1], mu[:, 0])
            err = np.abs(np.angle(np.exp(1j * (ang - downs_link(thetas, b0, eta, delta, bs2)))))
            assert err.max() < 1e-10

    def test_downs_pole(self):
        P = downs_params(0.4, 0.2, 1, 1.5)
        theta = 0.2 + np.pi
        mu = link_eval(P, x_s=[np.cos(theta), np.sin(theta)])
        ang = np.arctan2(mu[1], mu[0])
        assert abs(np.angle(np.exp(1j * (ang - downs_link(theta, 0.4, 0.2, 1, 1.5))))) < 1e-10

    def test_fisher_lee(self):
        assert fisher_lee_link([1.0, 1.0], 0.0, [0.0, 1.0]) == pytest.approx(np.pi / 2)
        assert fisher_lee_link([1.0, -1.0], 0.5, [1.0, 1.0]) == pytest.approx(0.5)
        rng = np.random.default_rng(8)
        for _ in range(50):
            b0 = rng.uniform(-np.pi, np.pi)
            g = rng.normal(size=3)
            xe = rng.normal(size=(10, 3))
            mu = link_eval(fisher_lee_params(b0, g), x_e=xe)
            ang = np.arctan2(mu[:, 1], mu[:, 0])
            err = np.abs(np.angle(np.exp(1j * (ang - fisher_lee_link(xe, b0, g)))))
            assert err.max() < 1e-10

    def test_hybrid(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            b0, eta = rng.uniform(-np.pi, np.pi, 2)
            delta = int(rng.choice([-1, 1]))
            bs2 = rng.uniform(0.1, 3)
            g = rng.normal(size=2)
            th = rng.uniform(-np.pi, np.pi, 10)
            xe = rng.normal(size=(10, 2))
            h = hybrid_link(th, xe, b0, eta, delta, bs2, g)
            mu = link_eval(
                hybrid_params(b0, eta, delta, bs2, g),
                x_s=np.column_stack([np.cos(th), np.sin(th)]),
                x_e=xe,
            )
            ang = np.arctan2(mu[:, 1], mu[:, 0])
            assert np.abs(np.angle(np.exp(1j * (ang - h)))).max() < 1e-10
            z = hybrid_link(th, xe, b0, eta, delta, bs2, np.zeros(2))
            assert np.allclose(z, downs_link(th, b0, eta, delta, bs2))
            z = hybrid_link(th, xe, b0, eta, delta, 0.0, g)
            assert np.allclose(z, fisher_lee_link(xe, b0, g))
            root = eta + 2 * np.arctan(-(xe[0] @ g) / (delta * bs2))
            assert abs(hybrid_link(root, xe[0], 0.0, eta, delta, bs2, g)) < 1e-10


class TestMobiusForm:
    def test_random(self):
        rng = np.random.default_rng(10)
        for p in (2, 3, 4):
            for beta in (0.2, 0.6, 1.0, 1.7):
                P = LinkParams(B0=rotation(rng, p), bs=np.full(p - 1, beta), be=np.zeros(p - 1), Rs=haar(rng, p))
                R0, phi, r = mobius_link_form(P)
                assert phi == pytest.approx((1 - beta) / (1 + beta))
                x = rand_unit(rng, p, 100)
                assert np.allclose(mobius_sphere(x, R0, phi * r), link_eval(P, x_s=x), atol=1e-12)

    def test_rotation_cases(self):
        rng = np.random.default_rng(11)
        B0 = rotation(rng, 3)
        P = LinkParams(B0=B0, bs=np.ones(2), be=np.zeros(2), Rs=np.eye(3))
        R0, phi, _ = mobius_link_form(P)
        assert phi == 0.0
        assert np.allclose(R0, B0)
        x = rand_unit(rng, 3, 10)
        assert np.allclose(link_eval(P, x_s=x), x @ B0.T)

    def test_anisotropic_rejected(self):
        P = LinkParams(B0=np.eye(3), bs=[1.0, 0.5], be=[0, 0], Rs=np.eye(3))
        with pytest.raises(DomainError):
            mobius_link_form(P)


class TestClosure:
    def test_case_one(self):
        rng = np.random.default_rng(12)
        for dims in [(3, 3, 0), (3, 4, 2), (2, 2, 1)]:
            inner = random_link_params(dims, rng)
            p = dims[0]
            outer = LinkParams(
                B0=rotation(rng, p), bs=rng.uniform(0.2, 2, p - 1), be=np.zeros(p - 1), Rs=inner.B0
            ) if p == 2 else None
            if outer is None:
                b2 = np.sort(rng.uniform(0.2, 2, p - 1))[::-1]
                outer = LinkParams(B0=rotation(rng, p), bs=b2, be=np.zeros(p - 1), Rs=inner.B0)
            comp = compose_links(inner, outer)
            xs, xe = covariates(rng, dims, 100)
            lhs = link_eval(outer, x_s=link_eval(inner, x_s=xs, x_e=xe))
            assert np.allclose(link_eval(comp, x_s=xs, x_e=xe), lhs, atol=1e-10)
            assert np.allclose(np.sort(comp.bs), np.sort(inner.bs * outer.bs))

    def test_case_two(self):
        rng = np.random.default_rng(13)
        for p in (2, 3, 4):
            for _ in range(10):
                b1, b2 = rng.uniform(0.1, 1.0, 2)
                inner = LinkParams(B0=rotation(rng, p), bs=np.full(p - 1, b1), be=np.zeros(p - 1), Rs=haar(rng, p))
                outer = LinkParams(B0=rotation(rng, p), bs=np.full(p - 1, b2), be=np.zeros(p - 1), Rs=haar(rng, p))
                comp = compose_links(inner, outer)
                x = rand_unit(rng, p, 100)
                lhs = link_eval(outer, x_s=link_eval(inner, x_s=x))
                assert np.allclose(link_eval(comp, x_s=x), lhs, atol=1e-10)

    def test_identity_outer(self):
        rng = np.random.default_rng(14)
        inner = LinkParams(B0=rotation(rng, 3), bs=np.full(2, 0.4), be=np.zeros(2), Rs=haar(rng, 3))
        outer = LinkParams(B0=np.eye(3), bs=np.ones(2), be=np.zeros(2), Rs=np.eye(3))
        comp = compose_links(inner, outer)
        x = rand_unit(rng, 3, 100)
        assert np.allclose(link_eval(comp, x_s=x), link_eval(inner, x_s=x), atol=1e-12)
        comp = compose_links(outer, inner)
        assert np.allclose(link_eval(comp, x_s=x), link_eval(inner, x_s=x), atol=1e-12)

    def test_neither_case(self):
        rng = np.random.default_rng(15)
        inner = LinkParams(B0=rotation(rng, 3), bs=[1.0, 0.5], be=[0, 0], Rs=haar(rng, 3))
        outer = LinkParams(B0=rotation(rng, 3), bs=[1.0, 0.5], be=[0, 0], Rs=haar(rng, 3))
        with pytest.raises(DomainError):
            compose_links(inner, outer)


class TestReparam:
    @pytest.mark.parametrize("dims", CONFIGS)
    def test_constraints_and_round_trip(self, dims):
        rng = np.random.default_rng(100 + sum(dims))
        for _ in range(20):
            P = random_link_params(dims, rng)
            rp = to_reparam(P)
            assert np.max(np.abs(rp.b01 @ rp.Omega)) < 1e-12
            if dims[1]:
                assert np.max(np.abs(rp.Omega_s @ rp.rs1)) < 1e-12
            assert commutator_residual(rp) < 1e-10
            sv = np.linalg.svd(rp.Omega, compute_uv=False)[: dims[0] - 1]
            assert np.allclose(sv, np.sqrt(P.bs**2 + P.be**2), atol=1e-12)
            xs, xe = covariates(rng, dims, 100)
            mu = link_eval(P, x_s=xs, x_e=xe)
            assert np.allclose(link_eval_reparam(rp, x_s=xs, x_e=xe), mu, atol=1e-12)
            Q = from_reparam(rp)
            assert np.allclose(link_eval(Q, x_s=xs, x_e=xe), mu, atol=1e-10)
            assert np.allclose(Q.bs, P.bs, atol=1e-10)
            assert np.allclose(Q.be, P.be, atol=1e-10)

    def test_zero_omega(self):
        rng = np.random.default_rng(16)
        P = random_link_params((3, 3, 2), rng).scaled(0.0)
        rp = to_reparam(P)
        assert np.all(rp.Omega == 0)
        Q = from_reparam(rp)
        assert np.all(Q.bs == 0) and np.all(Q.be == 0)
        xs, xe = covariates(rng, P.dims, 10)
        assert np.allclose(link_eval(Q, x_s=xs, x_e=xe), P.b01)
        assert np.allclose(link_eval_reparam(rp, x_s=P.rs1, x_e=np.zeros(2)), P.b01)

    def test_partial_zero_scales(self):
        rng = np.random.default_rng(17)
        base = random_link_params((4, 5, 4), rng)
        P = LinkParams(B0=base.B0, bs=[1.5, 0.0, 0.0], be=[0.5, 0.9, 0.0], Rs=base.Rs, Re=base.Re)
        Q = from_reparam(to_reparam(P))
        xs, xe = covariates(rng, P.dims, 50)
        assert np.allclose(link_eval(Q, x_s=xs, x_e=xe), link_eval(P, x_s=xs, x_e=xe), atol=1e-10)

    def test_repeated_singular_values_warn(self):
        rng = np.random.default_rng(18)
        base = random_link_params((3, 3, 2), rng)
        P = LinkParams(B0=base.B0, bs=[0.6, 0.8], be=[0.8, 0.6], Rs=base.Rs, Re=base.Re)
        rp = to_reparam(P)
        with pytest.warns(RuntimeWarning):
            Q = from_reparam(rp)
        assert rp.meta.get("repeated_singular_values")
        xs, xe = covariates(rng, P.dims, 50)
        assert np.allclose(link_eval(Q, x_s=xs, x_e=xe), link_eval(P, x_s=xs, x_e=xe), atol=1e-10)

    def test_constraint_violation_rejected(self):
        rng = np.random.default_rng(19)
        rp = to_reparam(random_link_params((3, 3, 2), rng))
        bad = ReparamLink(rp.b01, rp.rs1, rp.Omega + 1e-3 * rng.normal(size=rp.Omega.shape), 3, 2)
        with pytest.raises(ValidationError):
            from_reparam(bad)

    def test_commutator_perturbed_positive(self):
        rng = np.random.default_rng(20)
        rp = to_reparam(random_link_params((3, 3, 2), rng))
        M = rp.Omega + 0.1 * rng.normal(size=rp.Omega.shape)
        M = proj_constraint(M, rp.b01, rp.rs1, 3)
        assert commutator_residual(ReparamLink(rp.b01, rp.rs1, M, 3, 2)) > 1e-3
        zero = ReparamLink(rp.b01, rp.rs1, np.zeros_like(M), 3, 2)
        assert commutator_residual(zero) == 0.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_proj(self, seed):
        rng = np.random.default_rng(seed)
        rp = to_reparam(random_link_params((3, 4, 3), rng))
        assert np.allclose(proj_constraint(rp.Omega, rp.b01, rp.rs1, 4), rp.Omega, atol=1e-12)
        M = rng.normal(size=rp.Omega.shape)
        PM = proj_constraint(M, rp.b01, rp.rs1, 4)
        assert np.allclose(proj_constraint(PM, rp.b01, rp.rs1, 4), PM, atol=1e-12)
        assert np.max(np.abs(rp.b01 @ PM)) < 1e-12
        assert np.max(np.abs(PM[:, :4] @ rp.rs1)) < 1e-12

    def test_canonicalize_preserves_link(self):
        rng = np.random.default_rng(21)
        P = random_link_params((4, 4, 3), rng)
        perm_bs = P.bs[::-1].copy()
        B0 = P.B0.copy()
        B0[:, 1:] = B0[:, 1:][:, ::-1]
        Rs = P.Rs.copy()
        Rs[:, 1:] = Rs[:, 1:][:, ::-1]
        Re = P.Re[:, ::-1].copy()
        Q = canonicalize(B0, perm_bs, P.be[::-1], Rs, Re)
        xs, xe = covariates(rng, P.dims, 20)
        assert np.allclose(link_eval(Q, x_s=xs, x_e=xe), link_eval(P, x_s=xs, x_e=xe), atol=1e-12)
