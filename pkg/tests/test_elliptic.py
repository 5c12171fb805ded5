import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfmass.elliptic import (
    INTERIOR,
    CompactSource,
    DiscreteHalfAnnulus,
    DiscreteOperator,
    EllipticError,
    FlatteningRejected,
    asymptotic_coefficient,
    conformal_flatten,
    cutoff,
    cutoff_field,
    harmonic_oracle,
    image_kernel,
    image_kernel_gradient,
    lq_norm,
    mass_coefficient,
    radial_potential,
    solve_bvp,
    weighted_norm,
)
from halfmass.elliptic import _EDGE, _FACE
from halfmass.expr import constant, parse_scalar_field
from halfmass.mass import mass
from halfmass.metric import conformal, flat_half_space, half_schwarzschild
from oracles import fd_gradient, fd_hessian


@pytest.fixture(scope="module")
def small_grid():
    return DiscreteHalfAnnulus.build(1.0, 4.0, 0.5)


def oracle_cut_data(o):
    """Inner and outer cut data that make the truncated problem agree with the half-space one."""

    def radial(x):
        return np.einsum("ki,ki->k", o.gradient(x), x) / np.linalg.norm(x, axis=1)

    return dict(inner_data=radial, outer_data=lambda x: radial(x) + o.value(x) / np.linalg.norm(x, axis=1))


class TestKernel:
    def test_example(self):
        assert image_kernel([0.0, 0.0, 1.0], [0.0, 0.0, 2.0]) == pytest.approx(4.0 / 3.0, rel=1e-15)

    def test_neumann_property(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-5, 5, size=(10_000, 3))
        x[:, 2] = 0.0
        y = rng.uniform(-5, 5, size=(10_000, 3))
        y[:, 2] = rng.uniform(0.05, 5, size=10_000)
        assert np.max(np.abs(image_kernel_gradient(x, y)[:, 2])) <= 1e-12

    def test_coincident(self):
        with pytest.raises(EllipticError):
            image_kernel([1.0, 2.0, 0.5], [1.0, 2.0, 0.5])
        with pytest.raises(EllipticError):
            image_kernel([1.0, 2.0, 0.0], [1.0, 2.0, 0.0])

    def test_gradients(self):
        x, y = np.array([0.3, -0.2, 1.1]), np.array([1.0, 0.4, 0.7])
        gx = fd_gradient(lambda z: float(image_kernel(z, y)), x, 1e-3)
        gy = fd_gradient(lambda z: float(image_kernel(x, z)), y, 1e-3)
        assert np.allclose(image_kernel_gradient(x, y), gx, atol=1e-9)
        assert np.allclose(image_kernel_gradient(x, y, wrt="y"), gy, atol=1e-9)

    def test_harmonic(self):
        y = np.array([0.2, 0.1, 1.5])
        H = fd_hessian(lambda z: float(image_kernel(z, y)), np.array([1.0, -0.5, 0.8]), 1e-2)
        assert abs(np.trace(H)) < 1e-6 * np.max(np.abs(H))


class TestOracle:
    def test_zero(self):
        o = harmonic_oracle(None, None)
        assert not np.any(o.value(np.array([[1.0, 2.0, 3.0], [0.5, 0.0, 0.0]])))

    def test_mollified_point_mass(self):
        src = CompactSource(np.array([0.0, 0.0, 2.0]), 0.1, 1.0)
        src = CompactSource(src.center, 0.1, 1.0 / src.total())
        y = np.array([[0.5, 0.3, 1.0], [3.0, 1.0, 0.0], [0.0, 0.0, 2.5], [10.0, -4.0, 6.0]])
        expected = image_kernel(y, src.center) / (4 * math.pi)
        for exact in (True, False):
            assert np.allclose(harmonic_oracle(src, None, exact=exact).value(y), expected, rtol=1e-10)

    def test_closed_form_matches_quadrature(self):
        src = CompactSource(np.array([0.4, -0.3, 2.0]), 1.5, 0.7, power=2)
        # quadrature of the representation formula is only reliable off the support
        y = np.array([[0.0, 0.0, 0.0], [2.0, 1.0, 0.5], [0.4, -0.3, 3.8], [5.0, 5.0, 5.0]])
        a = harmonic_oracle(src, None, exact=True).value(y)
        b = harmonic_oracle(src, None, exact=False, order=40).value(y)
        assert np.allclose(a, b, rtol=1e-8)
        inside = np.array([[0.4, -0.3, 2.2], [1.0, 0.0, 2.0]])
        assert np.array_equal(radial_potential(src, inside), harmonic_oracle(src, None).value(inside))

    def test_source_equation(self):
        # -Laplace u = f inside the support
        src = CompactSource(np.array([0.0, 0.0, 3.0]), 2.0, 1.5, power=4)
        o = harmonic_oracle(src, None)
        x = np.array([0.3, 0.2, 3.4])
        H = fd_hessian(lambda z: float(o.value(z[None])[0]), x, 1e-2)
        assert -np.trace(H) == pytest.approx(float(src.value(x)), rel=1e-6)

    def test_neumann_data(self):
        disc = CompactSource(np.array([1.0, 0.0, 0.0]), 0.5, 1.0, power=2, boundary=True)
        o = harmonic_oracle(None, disc)
        inside = np.array([[1.1, 0.1, 0.0]])
        assert -o.gradient(inside)[0, 2] == pytest.approx(float(disc.value(inside)[0]), rel=1e-8)
        assert o.gradient(np.array([[3.0, 0.1, 0.0]]))[0, 2] == 0.0

    def test_reproduces_kernel(self):
        # phi(., p) is harmonic away from p with zero Neumann data, so a tiny source at p reproduces it
        p = np.array([0.0, 0.0, 0.5])
        src = CompactSource(p, 0.4, 1.0)
        src = CompactSource(p, 0.4, 4 * math.pi / src.total())
        y = np.array([[2.0, 0.0, 1.0], [1.5, -1.5, 0.0], [0.0, 3.0, 3.0]])
        assert np.allclose(harmonic_oracle(src, None).value(y), image_kernel(y, p), rtol=1e-12)

    def test_errors(self):
        with pytest.raises(EllipticError):
            harmonic_oracle(lambda x: x[..., 0], None)
        with pytest.raises(EllipticError):
            CompactSource(np.array([0.0, 0.0, 0.5]), 1.0, 1.0)
        with pytest.raises(EllipticError):
            CompactSource(np.array([0.0, 0.0, 2.0]), math.inf, 1.0)
        with pytest.raises(EllipticError):
            harmonic_oracle(None, CompactSource(np.array([0.0, 0.0, 2.0]), 1.0, 1.0))

    def test_source_total(self):
        src = CompactSource(np.array([0.0, 0.0, 2.0]), 1.3, 2.0, power=3)
        pts, w = src.quadrature(20)
        assert w.sum() == pytest.approx(src.total(), rel=1e-12)


class TestGrid:
    def test_classes(self, small_grid):
        c = small_grid.counts()
        assert set(c) == {"interior", "sigma", "inner_cut", "outer_cut"}
        assert sum(c.values()) == small_grid.size
        assert np.all(small_grid.points[:, 2] >= 0)

    def test_interior_stencils_complete(self, small_grid):
        inner = small_grid.node_class == INTERIOR
        for off in _FACE + _EDGE:
            assert np.all(small_grid.neighbour(off)[inner] >= 0)

    @pytest.mark.parametrize("args", [(1.0, 3.0, 0.5), (1.0, 4.0, 1.5), (0.0, 4.0, 0.5)])
    def test_build_errors(self, args):
        with pytest.raises(EllipticError):
            DiscreteHalfAnnulus.build(*args)

    def test_grids_are_three_dimensional(self):
        with pytest.raises(EllipticError):
            DiscreteHalfAnnulus.build(1.0, 4.0, 0.5, n=4)


class TestSolve:
    def test_constants(self, small_grid):
        sol = solve_bvp(small_grid, u_infinity=1.0)
        assert np.max(np.abs(sol.u - 1.0)) < 1e-10
        assert sol.residual <= 1e-10

    def test_negative_coefficient(self, small_grid):
        with pytest.raises(EllipticError):
            solve_bvp(small_grid, h=lambda x: -np.ones(len(x)))

    def test_oracle_agreement_and_order(self):
        src = CompactSource(np.array([0.0, 0.0, 3.0]), 3.0, 1.0, power=2)
        o = harmonic_oracle(src, None, order=32)
        errs = []
        for h in (0.25, 0.125):
            grid = DiscreteHalfAnnulus.build(1.0, 4.0, h)
            sol = solve_bvp(grid, f=src.value, **oracle_cut_data(o))
            ex = o.value(grid.points)
            errs.append(np.max(np.abs(sol.u - ex)) / np.max(np.abs(ex)))
        assert errs[1] <= 1e-3
        assert 1.7 <= math.log2(errs[0] / errs[1]) <= 2.3

    def test_operator_reuse(self, small_grid):
        op = DiscreteOperator(small_grid)
        a = op.solve(u_infinity=2.0)
        b = op.solve(u_infinity=-1.0)
        assert np.allclose(a.u, 2.0, atol=1e-10) and np.allclose(b.u, -1.0, atol=1e-10)

    def test_csv_export(self, small_grid, tmp_path):
        sol = solve_bvp(small_grid, u_infinity=1.0)
        path = tmp_path / "u.csv"
        sol.to_csv(path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["# n", "h", "r_in", "r_out"]
        assert [float(v) for v in rows[1]] == [3.0, 0.5, 1.0, 4.0]
        assert rows[2] == ["x1", "x2", "x3", "u"]
        assert len(rows) == 3 + small_grid.size


@pytest.fixture(scope="module")
def quarter_grid():
    return DiscreteHalfAnnulus.build(1.0, 4.0, 0.25)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 1.0), st.floats(0.0, 2.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0),
       st.floats(0, 2 * math.pi), st.floats(1.2, 3.0))
def test_discrete_maximum_principle(quarter_grid, h0, hb, amp, bamp, uinf, angle, dist):
    # run at h = r_in/4: the one-sided cut stencils are not monotone, and at h = r_in/2 a corner node can dip
    src = CompactSource(np.array([0.5, 0.0, 2.0]), 1.0, amp, power=2)
    disc = CompactSource(np.array([dist * math.cos(angle), dist * math.sin(angle), 0.0]), 0.8, bamp, power=2,
                         boundary=True)
    sol = solve_bvp(quarter_grid, h=lambda x: h0 * np.exp(-np.sum(x * x, axis=1) / 4),
                    hbar=lambda x: np.full(len(x), hb), f=src.value, fbar=disc.value, u_infinity=uinf)
    assert sol.min_u >= -1e-12


class TestWeightedNorm:
    def test_inverse_r(self):
        rep = weighted_norm(parse_scalar_field("1/r", 3), gamma=-1.0, k=1)
        assert not rep.infinite
        assert rep.estimated_norm == pytest.approx(2.0, rel=1e-12)
        assert rep.fitted_decay == pytest.approx(1.0, rel=1e-9)

    def test_wrong_weight_diverges(self):
        rep = weighted_norm(parse_scalar_field("1/r", 3), gamma=-2.0)
        assert rep.infinite and math.isinf(rep.estimated_norm)

    def test_zero(self):
        assert weighted_norm(constant(0.0, 3), gamma=-1.0, k=2).estimated_norm == 0.0

    def test_k_limit(self):
        with pytest.raises(EllipticError):
            weighted_norm(constant(0.0, 3), gamma=-1.0, k=3)

    def test_discrete_solution(self):
        grid = DiscreteHalfAnnulus.build(1.0, 8.0, 0.25)
        src = CompactSource(np.array([0.0, 0.0, 3.0]), 3.0, 1.0, power=2)
        o = harmonic_oracle(src, None)
        sol = solve_bvp(grid, f=src.value, **oracle_cut_data(o))
        # same node sampling, exact nodal values
        exact = dataclasses.replace(sol, u=o.value(grid.points))
        a = weighted_norm(sol, gamma=-1.0, k=1)
        b = weighted_norm(exact, gamma=-1.0, k=1)
        assert a.radii == b.radii
        assert np.allclose(a.terms, b.terms, rtol=1e-2)

    def test_lq_norm(self):
        # |r^(1) r^(-1)|^2 r^(-3) over the half-annulus gives 2 pi log(r_max / r_min)
        v = lq_norm(parse_scalar_field("1/r", 3), q=2, beta=-1.0, r_min=1.0, r_max=8.0)
        assert v == pytest.approx(math.sqrt(2 * math.pi * math.log(8.0)), rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-3.0, -0.5), st.floats(0.0, 1.0), st.integers(0, 1))
def test_weighted_norm_monotone(s, gamma, dgamma, k):
    u = parse_scalar_field(f"(1 + 0.3*x1/r)*r^(-{s!r})", 3)
    a = weighted_norm(u, gamma, k)
    assert weighted_norm(u, gamma, k + 1).estimated_norm >= a.estimated_norm
    assert weighted_norm(u, gamma + dgamma, k).estimated_norm <= a.estimated_norm
    if not a.infinite:
        # a finite norm caps the growth exponent -fitted_decay at gamma plus the slack
        assert -a.fitted_decay <= gamma + 0.25


class TestAsymptotic:
    def test_exact(self):
        fit = asymptotic_coefficient(parse_scalar_field("1 + 0.5/r", 3), u_infinity=1.0)
        assert fit.C == pytest.approx(0.5, rel=1e-12) and not fit.flagged

    def test_zero(self):
        fit = asymptotic_coefficient(parse_scalar_field("1 + 0.3*x1/r^3", 3), u_infinity=1.0)
        assert abs(fit.C) < 1e-12

    def test_oracle_monopole(self):
        src = CompactSource(np.array([0.0, 0.0, 2.0]), 1.0, 1.0)
        fit = asymptotic_coefficient(harmonic_oracle(src, None), r_min=64.0)
        assert fit.C == pytest.approx(src.total() / (2 * math.pi), rel=1e-3)

    def test_discrete(self):
        src = CompactSource(np.array([0.0, 0.0, 3.0]), 3.0, 1.0, power=2)
        o = harmonic_oracle(src, None)
        grid = DiscreteHalfAnnulus.build(1.0, 16.0, 0.5)
        sol = solve_bvp(grid, f=src.value, **oracle_cut_data(o))
        a = asymptotic_coefficient(sol, r_min=8.0)
        b = asymptotic_coefficient(o, r_min=8.0, r_max=16.0)
        assert a.C == pytest.approx(b.C, rel=1e-2)

    def test_mass_coefficient(self):
        assert mass_coefficient(3) == pytest.approx(1 / (16 * math.pi))
        for C in (0.1, 0.5):
            g = conformal(flat_half_space(3), f"1 + {C}/r")
            assert mass(g, [20, 40, 80, 160]).extrapolated * mass_coefficient(3) == pytest.approx(C, rel=1e-2)


class TestCutoff:
    def test_plateaus(self):
        t = np.array([0.0, 0.5, 1.0, 2.0, 3.0])
        assert np.array_equal(cutoff(t), [1.0, 1.0, 1.0, 0.0, 0.0])

    def test_monotone_and_bounded(self):
        t = np.linspace(0.0, 3.0, 3001)
        c = cutoff(t)
        assert np.all(np.diff(c) <= 0) and np.all((0 <= c) & (c <= 1))

    def test_derivatives(self):
        for t in (1.2, 1.5, 1.9):
            _, d1, d2 = cutoff(np.array(t), derivatives=True)
            step = 1e-5
            assert float(d1) == pytest.approx(float(cutoff(t + step) - cutoff(t - step)) / (2 * step), rel=1e-6)
            step = 1e-4
            fd2 = float(cutoff(t + step) - 2 * cutoff(t) + cutoff(t - step)) / step ** 2
            assert float(d2) == pytest.approx(fd2, rel=1e-5, abs=1e-5)

    def test_field_jet(self):
        chi = cutoff_field(4.0)
        x = np.array([3.0, 2.0, 4.0])
        H = fd_hessian(lambda z: float(chi.value(z[None])[0]), x, 1e-3)
        assert np.allclose(chi.jet(x[None]).hessian[0], H, atol=1e-7)


class TestFlatten:
    def test_flat(self):
        res = conformal_flatten(flat_half_space(3), 16.0, h=2.0)
        assert np.array_equal(res.u_R.discrete, np.ones_like(res.u_R.discrete))
        assert res.min_u == 1.0 and res.mass_delta == 0.0
        assert res.hypotheses_ok

    def test_preconditions(self):
        g = half_schwarzschild(3, 1.0)
        with pytest.raises(EllipticError):
            conformal_flatten(g, 1.0)

    def test_rejected_is_elliptic_error(self):
        assert issubclass(FlatteningRejected, EllipticError)

    def test_negative_mean_curvature_warns(self):
        g = conformal(flat_half_space(3), "1 + 0.2*x3/(1 + r^2)")
        res = conformal_flatten(g, 16.0, h=2.0, mass_g=0.0)
        assert not res.hypotheses_ok
        assert any("mean curvature" in w for w in res.warnings)
