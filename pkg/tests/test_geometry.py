import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfmass.expr import eval_jet, parse_scalar_field
from halfmass.geometry import (
    GeometryError,
    boundary_at,
    conformal_constants,
    curvature_at,
    expansion_residuals,
    level_set_mean_curvature,
    mass_density,
    residual_decay,
)
from halfmass.metric import (
    DecayWarning,
    conformal,
    flat_half_space,
    half_schwarzschild,
    perturbation,
    pullback_rigid,
    sample_points,
)
from oracles import fd_gradient

TAU12 = {(1, 1): "r^(-1.2)", (1, 3): "0.5*x1*r^(-2.2)", (2, 2): "x3*r^(-2.2)", (3, 3): "0.3*x1*x2*r^(-3.2)"}


def random_half_space_points(rng, n, count, r_min=1.0, r_max=50.0, boundary=False):
    d = rng.normal(size=(count, n))
    d[:, -1] = 0.0 if boundary else np.abs(d[:, -1])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.uniform(r_min, r_max, size=(count, 1))


class TestCurvature:
    def test_flat(self):
        cur = curvature_at(flat_half_space(3), [1.0, -2.0, 0.5])
        assert cur.scalar == 0.0

    def test_half_schwarzschild_scalar_flat(self):
        assert abs(curvature_at(half_schwarzschild(3, 1.0), [0.0, 0.0, 3.0]).scalar) < 1e-10

    def test_conformal_closed_form(self):
        # u = 1 + r^-2 in n=3: lap u = 2 r^-4, so R = -8 u^-5 * 2 r^-4 at r = 2
        g = conformal(flat_half_space(3), "1 + r^(-2)")
        expected = -8.0 * 1.25 ** -5 * 2.0 / 16.0
        assert curvature_at(g, [0.0, 0.0, 2.0]).scalar == pytest.approx(expected, rel=1e-12)

    def test_symmetries(self):
        g = perturbation(TAU12, 1.2, n=3)
        cur = curvature_at(g, sample_points(3, 1.0))
        assert np.array_equal(cur.christoffel, np.swapaxes(cur.christoffel, -1, -2))
        assert np.array_equal(cur.ricci, np.swapaxes(cur.ricci, -1, -2))

    def test_ricci_against_finite_differences_of_christoffels(self):
        g = perturbation(TAU12, 1.2, n=3)
        x = np.array([1.3, -0.4, 0.9])

        def gamma(y):
            return curvature_at(g, y).christoffel

        step = 1e-4
        dgam = np.stack([(gamma(x + step * e) - gamma(x - step * e)) / (2 * step) for e in np.eye(3)], axis=-1)
        G = gamma(x)
        ric = (np.einsum("likl->ik", dgam) - np.einsum("lilk->ik", dgam)
               + np.einsum("llm,mik->ik", G, G) - np.einsum("lkm,mil->ik", G, G))
        assert np.allclose(curvature_at(g, x).ricci, ric, rtol=0, atol=1e-8)

    def test_singular_metric(self):
        from halfmass.metric import MetricField
        from halfmass.expr import constant

        z, one = constant(0.0, 3), constant(1.0, 3)
        g = MetricField(n=3, tau=1.0, r0=1.0, coeffs=(one, z, z, one, z, z))
        with pytest.raises(GeometryError):
            curvature_at(g, [1.0, 1.0, 1.0])


class TestBoundary:
    def test_flat(self):
        b = boundary_at(flat_half_space(3), [1.0, 0.0, 0.0])
        assert b.H == 0.0
        assert not np.any(b.A)
        assert np.array_equal(b.eta, [0.0, 0.0, -1.0])

    def test_half_schwarzschild_totally_geodesic(self):
        b = boundary_at(half_schwarzschild(3, 1.0), [2.0, 0.0, 0.0])
        assert abs(b.H) < 1e-10
        assert np.max(np.abs(b.A)) < 1e-10

    def test_first_order_expansion(self):
        # a_11 = eps x3 / r^2: H = -1/2 d_3 a_11 = -eps/2 at (1,0,0), up to O(eps^2)
        vals = []
        for eps in (1e-4, 1e-5):
            g = perturbation({(1, 1): f"{eps!r}*x3/r^2"}, 1.0, n=3)
            H = float(boundary_at(g, [1.0, 0.0, 0.0]).H)
            assert H == pytest.approx(-eps / 2, rel=5 * eps)
            vals.append(H / eps)
        assert vals[0] == pytest.approx(vals[1], rel=1e-3)

    def test_requires_boundary_point(self):
        with pytest.raises(GeometryError):
            boundary_at(flat_half_space(3), [1.0, 0.0, 0.5])

    def test_unit_normal(self):
        g = perturbation(TAU12, 1.2, n=3)
        pts = sample_points(3, 1.0, boundary=True)
        b = boundary_at(g, pts)
        norms = np.einsum("pi,pij,pj->p", b.eta, g.matrix(pts), b.eta)
        assert np.max(np.abs(norms - 1.0)) < 1e-12

    def test_trace_consistency(self):
        # H as the trace of A agrees with div_g of the unit normal field
        g = perturbation(TAU12, 1.2, n=3)
        pts = sample_points(3, 1.0, boundary=True)
        b = boundary_at(g, pts)
        div = level_set_mean_curvature(g.components(pts))
        scale = np.max(np.abs(div))
        assert np.max(np.abs(b.H - div)) <= 1e-10 * scale

    def test_closed_formula_scales_with_conformal_factor(self):
        for g in (half_schwarzschild(3, 1.0), conformal(flat_half_space(3), "1 + 0.2*x3/r^2 + 0.3/r")):
            pts = sample_points(3, 1.0, boundary=True)
            b = boundary_at(g, pts)
            # conformally flat: the closed formula and the trace differ only through the conformal factor
            c = g.components(pts)
            u4 = c.g[:, 0, 0]
            assert np.allclose(b.H, b.H_closed / u4, rtol=1e-10, atol=1e-14)


class TestMassDensity:
    def test_flat(self):
        assert not np.any(mass_density(flat_half_space(3), [[1.0, 2.0, 3.0]]))

    @pytest.mark.parametrize("C", [0.1, 0.25, 0.5])
    def test_conformal_radial_component(self, C):
        g = conformal(flat_half_space(3), f"1 + {C}/r")
        x = np.array([1.0, -2.0, 2.0])
        r = 3.0
        u = 1 + C / r
        radial = float(np.dot(mass_density(g, x), x / r))
        assert radial == pytest.approx(8 * u ** 3 * C / r ** 2, rel=1e-13)

    def test_against_finite_differences(self):
        g = perturbation(TAU12, 1.2, n=3)
        x = np.array([1.1, 0.7, 0.4])
        dg = np.stack([fd_gradient(lambda y, i=i, j=j: g.matrix(y)[i, j], x, 1e-3)
                       for i in range(3) for j in range(3)]).reshape(3, 3, 3)
        expected = np.einsum("ijj->i", dg) - np.einsum("jji->i", dg)
        assert np.allclose(mass_density(g, x), expected, atol=1e-10)

    def test_constant_perturbation(self):
        with pytest.warns(DecayWarning):
            g = perturbation({(1, 1): "0.3", (2, 3): "0.1"}, 1.0, n=3)
        assert not np.any(mass_density(g, sample_points(3, 1.0)))


class TestResiduals:
    def test_flat(self):
        res = expansion_residuals(flat_half_space(3), 4.0)
        assert res["theta_sup"] == 0.0 and res["theta_prime_sup"] == 0.0

    def test_half_schwarzschild_dyadic_ratio(self):
        rows = residual_decay(half_schwarzschild(3, 1.0), [8, 16, 32, 64])["rows"]
        ratios = [b["theta_sup"] / a["theta_sup"] for a, b in zip(rows, rows[1:])]
        assert all(abs(q - 2.0 ** -4) < 0.01 for q in ratios)

    def test_perturbation_prime_decay(self):
        g = perturbation(TAU12, 1.2, n=3)
        d = residual_decay(g, [8, 16, 32, 64])
        assert d["theta_prime_decay"] >= 2 * 1.2 + 1 - 0.1
        assert d["theta_decay"] >= 2 * 1.2 + 2 - 0.25

    def test_radius_floor(self):
        with pytest.raises(GeometryError):
            expansion_residuals(half_schwarzschild(3, 1.0), 0.6)


def test_flat_annihilation_many_points():
    rng = np.random.default_rng(7)
    for n in (3, 4, 5):
        g = flat_half_space(n)
        pts = random_half_space_points(rng, n, 1000)
        cur = curvature_at(g, pts)
        bp = random_half_space_points(rng, n, 1000, boundary=True)
        b = boundary_at(g, bp)
        for arr in (cur.christoffel, cur.ricci, cur.scalar, b.A, b.H, mass_density(g, pts)):
            assert np.max(np.abs(arr)) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 5), st.floats(0.05, 2.0), st.floats(-0.3, 0.3), st.integers(0, 2 ** 16))
def test_conformal_law(n, C, eps, seed):
    a, b = conformal_constants(n)
    assert a == pytest.approx(4 * (n - 1) / (n - 2)) and b == pytest.approx(2 * (n - 1) / (n - 2))
    src = f"1 + {C!r}*r^(2-n) + {eps!r}*x{n}*x1/(1 + r^3)"
    u = parse_scalar_field(src, n)
    g = conformal(flat_half_space(n), u)
    rng = np.random.default_rng(seed)
    pts = random_half_space_points(rng, n, 40, 1.0, 10.0)
    j = eval_jet(u, pts)
    expected = -a * j.value ** (-(n + 2) / (n - 2)) * j.laplacian
    R = curvature_at(g, pts).scalar
    assert np.allclose(R, expected, rtol=1e-8, atol=1e-14)  # roundoff floor when u is harmonic
    bp = random_half_space_points(rng, n, 40, 1.0, 10.0, boundary=True)
    jb = eval_jet(u, bp)
    dudeta = -jb.gradient[:, -1]  # eta = -e_n for the flat background
    expected_h = b * jb.value ** (-n / (n - 2)) * dudeta
    H = boundary_at(g, bp).H
    assert np.allclose(H, expected_h, rtol=1e-8, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * math.pi), st.booleans(), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_rigid_covariance(th, refl, b1, b2):
    g = perturbation(TAU12, 1.2, n=3)
    Q = np.eye(3)
    Q[:2, :2] = [[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]
    if refl:
        Q[0] *= -1
    b = np.array([b1, b2, 0.0])
    p = pullback_rigid(g, Q, b)
    x = sample_points(3, 4.0, levels=2)
    y = (x - b) @ Q  # Q^-1 (x - b)
    Rg, Rp = curvature_at(g, x).scalar, curvature_at(p, y).scalar
    assert np.max(np.abs(Rg - Rp)) <= 1e-10 * np.max(np.abs(Rg))
    xb = sample_points(3, 4.0, levels=2, boundary=True)
    yb = (xb - b) @ Q
    yb[:, -1] = 0.0
    Hg, Hp = boundary_at(g, xb).H, boundary_at(p, yb).H
    assert np.max(np.abs(Hg - Hp)) <= 1e-10 * np.max(np.abs(Hg))
