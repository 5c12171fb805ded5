"""Acceptance suite: one PASS/FAIL line per criterion, collected into the terminal summary."""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from halfmass.cli import builtin_families
from halfmass.elliptic import CompactSource, DiscreteHalfAnnulus, DiscreteOperator, conformal_flatten, harmonic_oracle
from halfmass.geometry import boundary_at, curvature_at, mass_density, residual_decay
from halfmass.mass import BumpTensor, adm_mass_double, default_schedule, mass, variational_check
from halfmass.metric import (
    conformal,
    double,
    flat_half_space,
    half_schwarzschild,
    perturbation,
    pullback_rigid,
    shell_perturbed_schwarzschild,
)
from halfmass.quadrature import sphere_area
from oracles import check_against_fd, random_expression, random_point

RADII = [20, 40, 80, 160]
TAU12 = {(1, 1): "r^(-1.2)", (1, 3): "0.5*x1*r^(-2.2)", (2, 2): "x3*r^(-2.2)", (3, 3): "0.3*x1*x2*r^(-3.2)"}


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_half_space_points(rng, n, count, boundary=False):
    d = rng.normal(size=(count, n))
    d[:, -1] = 0.0 if boundary else np.abs(d[:, -1])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.uniform(1.0, 100.0, size=(count, 1))


def random_motion(rng, n):
    th = rng.uniform(0, 2 * np.pi)
    Q = np.eye(n)
    Q[:2, :2] = [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]
    if rng.random() < 0.5:
        Q[0] *= -1.0
    b = np.zeros(n)
    b[:-1] = rng.uniform(-1.0, 1.0, n - 1)
    return Q, b


def test_c01_half_schwarzschild_mass():
    rows = []
    ok = True
    for n, exact in ((3, 8 * math.pi), (4, 6 * math.pi ** 2)):
        t0 = time.perf_counter()
        est = mass(half_schwarzschild(n, 1.0), RADII, order=12)
        dt = time.perf_counter() - t0
        rel = abs(est.extrapolated / exact - 1)
        ok &= rel <= 5e-3 and dt < 10.0
        rows.append(f"n={n}: {est.extrapolated:.6f} vs {exact:.6f}, rel {rel:.2e}, {dt:.2f} s")
    record(1, "half-Schwarzschild mass", ok, "; ".join(rows))


def test_c02_flat_annihilation():
    rng = np.random.default_rng(2)
    worst = 0.0
    for n in (3, 4, 5):
        g = flat_half_space(n)
        pts = random_half_space_points(rng, n, 1000)
        bp = random_half_space_points(rng, n, 1000, boundary=True)
        cur, b = curvature_at(g, pts), boundary_at(g, bp)
        for arr in (cur.scalar, b.H, b.A, mass_density(g, pts)):
            worst = max(worst, float(np.max(np.abs(arr))))
        radii = rng.uniform(1.0, 100.0, 4)
        radii = radii[0] * 2.0 ** np.arange(4)
        worst = max(worst, abs(mass(g, list(radii)).extrapolated))
    record(2, "flat annihilation", worst <= 1e-10, f"max |quantity| = {worst:.1e} over n=3,4,5")


def test_c03_conformal_coefficient_law():
    worst = 0.0
    for n in (3, 4):
        for C in (0.1, 0.25, 0.5):
            est = mass(conformal(flat_half_space(n), f"1 + {C}*r^(2-n)"), RADII)
            worst = max(worst, abs(est.extrapolated / (2 * (n - 1) * sphere_area(n - 1) * C) - 1))
    record(3, "conformal coefficient law", worst <= 5e-3, f"max relative deviation {worst:.2e}")


def test_c04_doubling_identity():
    fams = [half_schwarzschild(3, 1.0), conformal(flat_half_space(3), "1 + 0.25/r"),
            conformal(flat_half_space(4), "1 + 0.5*r^(-2)")]
    ratios, jumps = [], []
    for g in fams:
        d = double(g)
        ratios.append(adm_mass_double(d, RADII).extrapolated / (2 * mass(g, RADII).extrapolated))
        jumps.append(d.corner_report(samples=64)["max_jump"])
    ok = all(0.995 <= q <= 1.005 for q in ratios) and max(jumps) <= 1e-8
    record(4, "doubling identity", ok,
           f"ratios {', '.join(f'{q:.5f}' for q in ratios)}; max corner jump {max(jumps):.1e}")


def test_c05_rigid_motion_invariance():
    rng = np.random.default_rng(5)
    rows = []
    worst = 0.0
    for name, g in builtin_families():
        base = mass(g, terms=2).extrapolated
        w = 0.0
        for _ in range(10):
            Q, b = random_motion(rng, g.n)
            w = max(w, abs(mass(pullback_rigid(g, Q, b), terms=2).extrapolated / base - 1))
        worst = max(worst, w)
        rows.append(f"{name} {w:.1e}")
    record(5, "rigid-motion invariance", worst <= 1e-4, "; ".join(rows))


def oracle_problem(rng, r_in=1.0):
    sources = []
    for _ in range(int(rng.integers(1, 3))):
        eps = rng.uniform(2.8, 3.2) * r_in
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0, 1.5) * r_in
        c = np.array([rad * np.cos(ang), rad * np.sin(ang), eps + rng.uniform(0, 0.5) * r_in])
        sources.append(CompactSource(c, eps, rng.uniform(0.5, 2.0), power=2))
    return sources


def oracle_errors(op, problems):
    pts = op.grid.points
    errs = []
    for sources in problems:
        o = harmonic_oracle(sources, None, order=32)

        def radial(x, o=o):
            return np.einsum("ki,ki->k", o.gradient(x), x) / np.linalg.norm(x, axis=1)

        sol = op.solve(f=lambda x, s=sources: sum(v.value(x) for v in s), inner_data=radial,
                       outer_data=lambda x, o=o, radial=radial: radial(x) + o.value(x) / np.linalg.norm(x, axis=1))
        ex = o.value(pts)
        errs.append(float(np.max(np.abs(sol.u - ex)) / np.max(np.abs(ex))))
    return np.array(errs)


@pytest.mark.slow
def test_c06_solver_oracle_equivalence():
    rng = np.random.default_rng(6)
    problems = [oracle_problem(rng) for _ in range(20)]
    t0 = time.perf_counter()
    coarse = oracle_errors(DiscreteOperator(DiscreteHalfAnnulus.build(1.0, 4.0, 1 / 8)), problems)
    t_coarse = time.perf_counter() - t0
    fine = oracle_errors(DiscreteOperator(DiscreteHalfAnnulus.build(1.0, 4.0, 1 / 16)), problems)
    orders = np.log2(coarse / fine)
    ok = coarse.max() <= 1e-3 and orders.min() >= 1.7 and orders.max() <= 2.3 and t_coarse < 60.0
    record(6, "solver-oracle equivalence", ok,
           f"max rel error {coarse.max():.2e} at h=r_in/8 ({t_coarse:.1f} s); "
           f"orders {orders.min():.2f}..{orders.max():.2f}")


@pytest.mark.slow
def test_c07_flattening_pipeline():
    g = shell_perturbed_schwarzschild(3, 1.0, 0.5)
    res = {R: conformal_flatten(g, R, h=2.0) for R in (16.0, 32.0)}
    ok = res[32.0].mass_delta < res[16.0].mass_delta
    parts = []
    for R, r in res.items():
        ok &= r.hypotheses_ok and r.min_u > 0
        ok &= r.scalar_residual <= 10 * r.residual_scale and r.mean_residual <= 10 * r.residual_scale
        parts.append(f"R_cut={R:g}: mass_delta {r.mass_delta:.3f}, min_u {r.min_u:.3f}, "
                     f"|R| {r.scalar_residual:.1e}, |H| {r.mean_residual:.1e} vs scale {r.residual_scale:.1e}")
    record(7, "flattening pipeline", ok, "; ".join(parts))


def test_c08_variational_identity():
    rng = np.random.default_rng(8)
    K = rng.normal(size=(3, 3))
    p = np.array([3.0, 0.0, 0.0])
    k = BumpTensor(p, 0.75, 0.5 * (K + K.T))
    g = half_schwarzschild(3, 1.0)
    a = variational_check(g, k, dt=1e-3, order=12)
    b = variational_check(g, k, dt=5e-4, order=12)
    ratio = a.mismatch / b.mismatch
    record(8, "variational identity", 3.0 <= ratio <= 5.0 and a.mismatch <= 1e-5,
           f"mismatch {a.mismatch:.2e} at dt=1e-3, Richardson ratio {ratio:.3f}")


def test_c09_expansion_residual_decay():
    cases = [("half_schwarzschild(3,1)", half_schwarzschild(3, 1.0), 1.0),
             ("half_schwarzschild(4,1)", half_schwarzschild(4, 1.0), 2.0),
             ("perturbation tau=1.2", perturbation(TAU12, 1.2, n=3), 1.2)]
    ok = True
    parts = []
    for name, g, tau in cases:
        d = residual_decay(g, [8, 16, 32, 64])
        th, thp = d["theta_decay"], d["theta_prime_decay"]
        ok &= th >= 2 * tau + 2 - 0.25 and thp >= 2 * tau + 1 - 0.25
        parts.append(f"{name}: {th:.2f} (>= {2 * tau + 1.75:.2f}), {thp:.2f} (>= {2 * tau + 0.75:.2f})")
    record(9, "expansion residual decay", ok, "; ".join(parts))


def test_c10_autodiff_correctness():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 6))
        src = random_expression(rng, n, int(rng.integers(1, 4)))
        worst = max(worst, check_against_fd(src, n, random_point(rng, n)))
    record(10, "autodiff correctness", worst <= 1e-6, f"worst scaled error {worst:.1e} over 1000 pairs")


def test_positivity_sweep():
    rng = np.random.default_rng(11)
    fams = [(name, g) for name, g in builtin_families()]
    fams += [(f"shell_perturbed(3,{m:.2f},{dm:.2f})", shell_perturbed_schwarzschild(3, m, dm))
             for m, dm in rng.uniform([0.1, 0.0], [2.0, 1.0], size=(6, 2))]
    worst = math.inf
    for name, g in fams:
        est = mass(g, default_schedule(g))
        worst = min(worst, est.extrapolated + est.error_bound)
    record("positivity", "mass >= -error_bound on R>=0, H>=0 families", worst >= 0.0,
           f"{len(fams)} families, min(mass + error_bound) = {worst:.3f}")
