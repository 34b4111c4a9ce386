from __future__ import annotations

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spherereg.exceptions import AntipodalError, DegenerateError, DomainError, PoleError
from spherereg.geometry import (
    ExtendedPoint,
    MobiusParams,
    amaral_rotation,
    cayley,
    gram_schmidt,
    householder,
    inverse_cayley,
    mobius_extended,
    mobius_extended_compose,
    mobius_sphere,
    skew_from_params,
    skew_to_params,
    stereo_inverse,
    stereo_project,
    transport_matrix,
)


def rand_unit(rng, p, n=None):
    size = (p,) if n is None else (n, p)
    x = rng.normal(size=size)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def rand_orth(rng, p):
    q, r = np.linalg.qr(rng.normal(size=(p, p)))
    return q * np.sign(np.diag(r))


def tangent(rng, a):
    xi = rng.normal(size=a.shape)
    return xi - a * (a @ xi)


unit_vectors = st.integers(min_value=0, max_value=2**32 - 1).map(
    lambda s: rand_unit(np.random.default_rng(s), 4)
)


class TestStereographic:
    def test_examples(self):
        e1, e2 = np.eye(3)[0], np.eye(3)[1]
        assert np.array_equal(stereo_project(e1).value, [0.0, 0.0])
        assert stereo_project(-e1).is_infinite
        assert np.allclose(stereo_project(e2).value, [1.0, 0.0])
        assert np.allclose(stereo_inverse([0.0, 0.0]), e1)
        assert np.array_equal(stereo_inverse(ExtendedPoint.infinity(2)), -e1)
        assert np.allclose(stereo_inverse([1.0, 0.0]), [0.0, 1.0, 0.0])

    def test_outside_ball_rejected(self):
        with pytest.raises(DomainError):
            stereo_project([1.0 + 1e-9, 0.0, 0.0])

    def test_near_pole_is_finite(self):
        x = np.array([-1.0, 1e-9, 0.0])
        x /= np.linalg.norm(x)
        y = stereo_project(x)
        assert not y.is_infinite

    @pytest.mark.parametrize("p", [2, 3, 5])
    def test_round_trips(self, p):
        rng = np.random.default_rng(p)
        for x in rand_unit(rng, p, 100):
            assert np.allclose(stereo_inverse(stereo_project(x)), x, atol=1e-12, rtol=0)
        for y in rng.normal(size=(100, p - 1)) * 3:
            back = stereo_project(stereo_inverse(y)).value
            assert np.allclose(back, y, atol=1e-12 * max(1, np.linalg.norm(y) ** 2))
            assert abs(np.linalg.norm(stereo_inverse(y)) - 1) < 1e-12

    def test_interior_point(self):
        x = np.array([0.2, 0.3, -0.1])
        assert np.allclose(stereo_project(x).value, x[1:] / 1.2)


class TestExtendedPoint:
    def test_infinity_arithmetic(self):
        inf = ExtendedPoint.infinity(2)
        assert (inf + np.array([1.0, 2.0])).is_infinite
        assert inf.transform(np.eye(2) * 3).is_infinite
        zero = inf.transform(np.zeros((2, 2)))
        assert not zero.is_infinite and np.all(zero.value == 0)

    def test_exclusive_variants(self):
        with pytest.raises(ValueError):
            ExtendedPoint(dim=2, value=np.zeros(2), is_infinite=True)


class TestMobius:
    def test_identity_and_rotation(self):
        rng = np.random.default_rng(1)
        x = rand_unit(rng, 3)
        R = rand_orth(rng, 3)
        assert np.allclose(mobius_sphere(x, np.eye(3), np.zeros(3)), x)
        assert np.allclose(mobius_sphere(x, R, np.zeros(3)), R @ x)

    def test_against_high_precision(self):
        rng = np.random.default_rng(2)
        psi = np.array([0.5, 0.0, 0.0])
        mpmath.mp.dps = 40
        for x in rand_unit(rng, 3, 20):
            got = mobius_sphere(x, np.eye(3), psi)
            xm = [mpmath.mpf(float(v)) for v in x]
            pm = [mpmath.mpf(float(v)) for v in psi]
            d = [xm[i] + pm[i] for i in range(3)]
            d2 = sum(v * v for v in d)
            n2 = sum(v * v for v in pm)
            ref = [(1 - n2) * d[i] / d2 + pm[i] for i in range(3)]
            assert np.allclose(got, [float(v) for v in ref], atol=1e-14, rtol=0)
            assert abs(np.linalg.norm(got) - 1) < 1e-12

    def test_pole_and_unit_psi(self):
        psi = np.array([0.3, 0.0, 0.0])
        with pytest.raises(PoleError):
            mobius_sphere(-psi, np.eye(3), psi)
        with pytest.raises(DomainError):
            mobius_sphere(np.eye(3)[0], np.eye(3), np.eye(3)[1])

    @given(unit_vectors, unit_vectors, st.floats(0.0, 0.95))
    @settings(max_examples=60, deadline=None)
    def test_unit_output(self, x, u, s):
        R = rand_orth(np.random.default_rng(7), 4)
        if np.linalg.norm(x + s * u) < 1e-6:
            return
        y = mobius_sphere(x, R, s * u)
        assert abs(np.linalg.norm(y) - 1) < 1e-12

    def test_extended_conventions(self):
        rng = np.random.default_rng(3)
        A = rand_orth(rng, 3)
        a, b = rng.normal(size=3), rng.normal(size=3)
        ident = MobiusParams(np.eye(3), 1.0, np.zeros(3), np.zeros(3), 0)
        x = rng.normal(size=3)
        assert np.allclose(mobius_extended(x, ident).value, x)
        P = MobiusParams(A, 1.7, a, b, 2)
        assert mobius_extended(-a, P).is_infinite
        assert np.allclose(mobius_extended(ExtendedPoint.infinity(3), P).value, A @ b)
        P0 = MobiusParams(A, 1.7, a, b, 0)
        assert np.allclose(mobius_extended(-a, P0).value, A @ b)
        assert mobius_extended(ExtendedPoint.infinity(3), P0).is_infinite

    def test_compose_matches_pointwise(self):
        rng = np.random.default_rng(4)
        for p in (2, 3, 5):
            for _ in range(20):
                P1 = MobiusParams(rand_orth(rng, p), rng.normal(), rng.normal(size=p), rng.normal(size=p), 2)
                P2 = MobiusParams(rand_orth(rng, p), rng.normal(), rng.normal(size=p), rng.normal(size=p), 2)
                C = mobius_extended_compose(P1, P2)
                for x in rng.normal(size=(5, p)):
                    lhs = mobius_extended(mobius_extended(x, P1), P2).value
                    rhs = mobius_extended(x, C).value
                    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10)

    def test_double_inversion_reproduces_map(self):
        rng = np.random.default_rng(5)
        inv = MobiusParams(np.eye(3), 1.0, np.zeros(3), np.zeros(3), 2)
        P = MobiusParams(rand_orth(rng, 3), 0.8, rng.normal(size=3), rng.normal(size=3), 2)
        once = mobius_extended_compose(P, inv)
        twice = mobius_extended_compose(once, inv)
        for x in rng.normal(size=(100, 3)):
            assert np.allclose(
                mobius_extended(x, twice).value, mobius_extended(x, P).value, rtol=1e-10, atol=1e-10
            )
            lhs = mobius_extended(mobius_extended(x, P), inv).value
            assert np.allclose(mobius_extended(x, once).value, lhs, rtol=1e-10, atol=1e-10)

    def test_compose_degenerate(self):
        H = householder(np.eye(3)[0])
        e1 = np.eye(3)[0]
        fwd = MobiusParams(H, 2.0, e1, -e1, 2)
        back = MobiusParams(H, 2.0, -e1, e1, 2)
        with pytest.raises(DegenerateError):
            mobius_extended_compose(fwd, back)

    def test_star_maps_are_stereographic_pair(self):
        H = householder(np.eye(3)[0])
        e1 = np.eye(3)[0]
        fwd = MobiusParams(H, 2.0, e1, -e1, 2)
        back = MobiusParams(H, 2.0, -e1, e1, 2)
        rng = np.random.default_rng(6)
        for x in rand_unit(rng, 3, 50):
            z = mobius_extended(x, fwd).value
            assert abs(z[0]) < 1e-12
            assert np.allclose(z[1:], stereo_project(x).value, atol=1e-12)
            assert np.allclose(mobius_extended(z, back).value, x, atol=1e-12)


class TestTransport:
    def test_examples(self):
        e1, e2, e3 = np.eye(3)
        R = transport_matrix(e1, e2)
        assert np.allclose(R @ e2, -e1)
        assert np.allclose(R @ e3, e3)
        Q = amaral_rotation(e1, e2)
        assert np.allclose(Q.T @ e2, R @ e2)
        assert np.allclose(Q.T @ e3, R @ e3)
        a = rand_unit(np.random.default_rng(0), 3)
        xi = tangent(np.random.default_rng(1), a)
        assert np.allclose(transport_matrix(a, a) @ xi, xi)

    def test_antipodal(self):
        e1 = np.eye(3)[0]
        with pytest.raises(AntipodalError):
            transport_matrix(e1, -e1)
        with pytest.raises(AntipodalError):
            amaral_rotation(e1, -e1)

    @given(unit_vectors, unit_vectors)
    @settings(max_examples=100, deadline=None)
    def test_properties(self, a, b):
        if 1 + a @ b < 1e-3:
            return
        rng = np.random.default_rng(0)
        R = transport_matrix(a, b)
        assert np.allclose(R, R.T, atol=1e-12)
        assert np.allclose(R, transport_matrix(b, a), atol=1e-12)
        assert np.allclose(R @ R, np.eye(4), atol=1e-12)
        assert np.allclose(R @ a, -b, atol=1e-12)
        xi, eta = tangent(rng, a), tangent(rng, a)
        assert abs((R @ xi) @ (R @ eta) - xi @ eta) < 1e-12
        assert abs(b @ (R @ xi)) < 1e-12
        Q = amaral_rotation(a, b)
        assert np.allclose(Q.T @ Q, np.eye(4), atol=1e-12)
        assert abs(np.linalg.det(Q) - 1) < 1e-8
        assert np.allclose(Q.T @ a, b, atol=1e-12)
        assert np.allclose(Q.T @ xi, R @ xi, atol=1e-10)

    def test_amaral_identity(self):
        a = rand_unit(np.random.default_rng(3), 5)
        assert np.allclose(amaral_rotation(a, a), np.eye(5), atol=1e-15)


class TestBases:
    def test_gram_schmidt_examples(self):
        e = np.eye(3)
        assert np.allclose(gram_schmidt([e[0], e[1]]), e)
        assert np.allclose(gram_schmidt([2 * e[0]]), e)

    def test_gram_schmidt_random(self):
        rng = np.random.default_rng(8)
        for p in (2, 3, 5):
            seed = rng.normal(size=(p, p - 1))
            Q = gram_schmidt(seed)
            assert np.allclose(Q.T @ Q, np.eye(p), atol=1e-12)
            # leading columns span the seeds
            assert np.allclose(Q[:, : p - 1] @ (Q[:, : p - 1].T @ seed), seed, atol=1e-12)

    def test_gram_schmidt_rank_deficient(self):
        with pytest.raises(DegenerateError):
            gram_schmidt([np.array([1.0, 2.0, 3.0]), np.array([2.0, 4.0, 6.0])])

    def test_cayley_examples(self):
        assert np.allclose(cayley(np.zeros((3, 3))), np.eye(3))
        S = np.array([[0.0, 1.0], [-1.0, 0.0]])
        C = cayley(S)
        # rotation by pi/2 (direction fixed by the sign convention)
        assert np.allclose(C, [[0.0, -1.0], [1.0, 0.0]])

    def test_cayley_round_trip(self):
        rng = np.random.default_rng(9)
        for k in (2, 3, 4):
            for _ in range(100):
                S = skew_from_params(rng.normal(size=k * (k - 1) // 2), k)
                R = cayley(S)
                assert np.allclose(R.T @ R, np.eye(k), atol=1e-12)
                assert abs(np.linalg.det(R) - 1) < 1e-8
                assert np.allclose(inverse_cayley(R), S, atol=1e-10)
                assert np.allclose(skew_to_params(S), S[np.triu_indices(k, 1)])

    def test_inverse_cayley_rejects_half_turn(self):
        with pytest.raises(DegenerateError):
            inverse_cayley(np.diag([-1.0, -1.0, 1.0]))

    def test_householder(self):
        assert np.allclose(householder([1.0, 0.0]), np.diag([-1.0, 1.0]))
        rng = np.random.default_rng(10)
        for _ in range(20):
            v = rng.normal(size=4)
            H = householder(v)
            assert np.allclose(H, H.T)
            assert np.allclose(H @ H, np.eye(4), atol=1e-12)
            assert np.allclose(H @ v, -v, atol=1e-12)
        with pytest.raises(DegenerateError):
            householder(np.zeros(3))
