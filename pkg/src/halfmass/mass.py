"""The mass functional on coordinate hemispheres, its extrapolation in r,
the ADM mass of a doubled manifold and the first-variation identity check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from .geometry import (
    boundary_from_jet,
    curvature_from_jet,
    mass_density_from_jet,
)
from .metric import DoubledMetric, MetricField, MetricJet
from .quadrature import full_sphere_nodes, hemisphere_rule, unit_sphere_rule

__all__ = [
    "MassError",
    "RegimeError",
    "MassSample",
    "MassEstimate",
    "mass_at_radius",
    "default_schedule",
    "extrapolate",
    "mass",
    "adm_mass_double",
    "BumpTensor",
    "VariationalReport",
    "variational_check",
]

EPS = np.finfo(float).eps


class MassError(RuntimeError):
    pass


class RegimeError(MassError):
    """Declared decay rate is outside tau > (n-2)/2."""


@dataclass(frozen=True)
class MassSample:
    r: float
    hemisphere_term: float
    equator_term: float
    noise: float  # rounding floor of the quadrature sum

    @property
    def total(self) -> float:
        return self.hemisphere_term + self.equator_term

    def __float__(self) -> float:
        return self.total


@dataclass(frozen=True)
class MassEstimate:
    radii: np.ndarray
    samples: np.ndarray
    extrapolated: float
    fitted_exponent: float
    error_bound: float
    nonconvergent: bool = False
    terms: tuple = ()
    notes: tuple = ()
    exponent_consistent: bool | None = None


def mass_at_radius(g: MetricField, r: float, order: int = 12) -> MassSample:
    """Hemisphere flux of ``C_i mu^i`` plus the equator term ``g_{alpha n} theta^alpha``."""
    if r < 2.0 * g.r0:
        raise MassError(f"radius {r} is inside 2 r0 = {2 * g.r0}")
    rule = hemisphere_rule(g.n, r, order)
    c = g.components(rule.nodes)
    flux = np.einsum("ki,ki->k", mass_density_from_jet(c), rule.normals)
    if not np.all(np.isfinite(flux)):
        raise MassError("mass integrand is not finite on the hemisphere")
    ce = g.components(rule.equator_nodes)
    m = g.n - 1
    eq = np.einsum("ka,ka->k", ce.g[:, :m, m], rule.conormals[:, :m])
    hemi = float(np.sum(rule.weights * flux))
    equ = float(np.sum(rule.equator_weights * eq))
    noise = 64 * EPS * float(np.sum(rule.weights * np.abs(flux)) + np.sum(rule.equator_weights * np.abs(eq)))
    return MassSample(float(r), hemi, equ, noise)


def default_schedule(g: MetricField | DoubledMetric, count: int = 4, start: float = 20.0) -> list[float]:
    r0 = g.base.r0 if isinstance(g, DoubledMetric) else g.r0
    r = max(start, 2.0 * r0)
    return [r * 2.0 ** k for k in range(count)]


def _check_schedule(radii) -> np.ndarray:
    radii = np.asarray(sorted(float(r) for r in radii))
    if len(radii) < 4:
        raise MassError("schedule needs at least 4 radii")
    ratios = radii[1:] / radii[:-1]
    if np.max(np.abs(ratios - 2.0)) > 1e-9:
        raise MassError("schedule radii must be dyadically spaced")
    return radii


def _aitken(r, m):
    """Closed-form power-law fit through three dyadic samples."""
    d1, d2 = m[1] - m[0], m[2] - m[1]
    if d1 == 0.0 or d2 / d1 <= 0.0 or d2 / d1 >= 1.0:
        return None
    q = d2 / d1
    s = -math.log2(q)
    minf = m[2] + d2 * q / (1.0 - q)
    c = (m[2] - minf) * r[2] ** s
    return minf, c, s


def extrapolate(radii, samples, noise: float = 0.0, terms: int = 1) -> tuple[float, float, float, bool, list[str]]:
    """Fit ``m(r) = m_inf + c r^(-s)`` (optionally ``+ c2 r^(-s-1)``).

    Returns ``(m_inf, s, error_bound, nonconvergent, notes)``.
    """
    r = np.asarray(radii, float)
    m = np.asarray(samples, float)
    notes: list[str] = []
    scale = max(1.0, float(np.max(np.abs(m))))
    spread = float(np.max(m) - np.min(m))
    floor = max(noise, 16 * EPS * float(np.max(np.abs(m))))
    if spread <= max(floor, 1e-13 * scale):
        notes.append("samples constant to rounding; no decay to fit")
        return float(m[-1]), math.inf, max(spread, floor), False, notes

    guess = _aitken(r[-3:], m[-3:])
    if guess is None:
        notes.append("last three samples are not geometrically convergent")
        return float(m[-1]), math.nan, math.inf, True, notes
    minf0, c0, s0 = guess

    rs = r / r[-1]
    if terms == 1:
        def resid(p):
            return p[0] + p[1] * rs ** (-p[2]) - m
        p0 = [minf0, c0 * r[-1] ** (-s0), s0]
    else:
        def resid(p):
            return p[0] + p[1] * rs ** (-p[2]) + p[3] * rs ** (-p[2] - 1.0) - m
        p0 = [minf0, c0 * r[-1] ** (-s0), s0, 0.0]
    sol = least_squares(resid, p0, method="lm" if len(r) > len(p0) else "trf", xtol=1e-15, ftol=1e-15,
                        gtol=1e-15, max_nfev=2000)
    minf, s = float(sol.x[0]), float(sol.x[2])
    res = np.abs(sol.fun)
    nonconv = False
    if s <= 0.0:
        nonconv = True
        notes.append("fitted decay exponent is not positive")
    if float(np.max(res)) > 0.01 * spread:
        nonconv = True
        notes.append("fit residual exceeds 1% of sample spread")
    dist = np.abs(m - minf)
    tail = dist[-3:]
    if not (tail[0] > tail[1] > tail[2]):
        nonconv = True
        notes.append("|m(r) - m_inf| is not decreasing over the last three radii")
    dof = max(1, len(r) - len(p0))
    err = max(float(np.sqrt(np.sum(res ** 2) / dof)), abs(minf - minf0), floor)
    if nonconv:
        err = math.inf
    return minf, s, err, nonconv, notes


def _estimate(radii, rows: list[MassSample], terms: int, g_tau=None, n=None) -> MassEstimate:
    samples = np.array([row.total for row in rows])
    noise = max(row.noise for row in rows)
    minf, s, err, nonconv, notes = extrapolate(radii, samples, noise, terms)
    exponent = -s
    consistent = None
    if g_tau is not None and n is not None and math.isfinite(g_tau) and math.isfinite(s):
        consistent = bool(exponent <= -(2.0 * g_tau - (n - 2)) + 0.25)
    return MassEstimate(radii=np.asarray(radii, float), samples=samples, extrapolated=minf,
                        fitted_exponent=exponent, error_bound=err, nonconvergent=nonconv,
                        terms=tuple(rows), notes=tuple(notes), exponent_consistent=consistent)


def mass(g: MetricField, schedule=None, order: int = 12, terms: int = 1,
         check_regime: bool = True) -> MassEstimate:
    """Extrapolated mass over a dyadic radius schedule."""
    if check_regime and not g.tau > (g.n - 2) / 2.0:
        raise RegimeError(f"mass requires tau > (n-2)/2 = {(g.n - 2) / 2:g}; declared tau = {g.tau:g}")
    radii = _check_schedule(schedule if schedule is not None else default_schedule(g))
    if radii[0] < 2.0 * g.r0:
        raise MassError("schedule radii must be at least 2 r0")
    rows = [mass_at_radius(g, r, order) for r in radii]
    return _estimate(radii, rows, terms, g.tau, g.n)


def _adm_at_radius(d: DoubledMetric, r: float, order: int) -> MassSample:
    rule = hemisphere_rule(d.n, r, order)
    nodes, weights = full_sphere_nodes(rule)
    c = d.components(nodes)
    flux = np.einsum("ki,ki->k", mass_density_from_jet(c), nodes / r)
    total = float(np.sum(weights * flux))
    return MassSample(float(r), total, 0.0, 64 * EPS * float(np.sum(weights * np.abs(flux))))


def adm_mass_double(d: DoubledMetric, schedule=None, order: int = 12, terms: int = 1) -> MassEstimate:
    """ADM mass of the double: full coordinate spheres, extrapolated as in :func:`mass`."""
    g = d.base
    radii = _check_schedule(schedule if schedule is not None else default_schedule(d))
    if radii[0] < 2.0 * g.r0:
        raise MassError("schedule radii must be at least 2 r0")
    rows = [_adm_at_radius(d, r, order) for r in radii]
    return _estimate(radii, rows, terms)


# ---------------------------------------------------------------- first variation


@dataclass(frozen=True)
class BumpTensor:
    """``k(x) = K (1 - |x-p|^2/rho^2)^q`` inside the ball ``B(p, rho)``, zero outside."""

    center: np.ndarray
    radius: float
    K: np.ndarray
    power: int = 4

    def jets(self, x) -> MetricJet:
        x = np.asarray(x, float)
        n = x.shape[-1]
        d = x - self.center
        rho2 = self.radius ** 2
        w = 1.0 - np.sum(d * d, axis=-1) / rho2
        inside = w > 0.0
        w = np.where(inside, w, 0.0)
        q = self.power
        gw = -2.0 * d / rho2
        psi = w ** q
        dpsi = (q * w ** (q - 1))[..., None] * gw
        hpsi = ((q * (q - 1) * w ** (q - 2))[..., None, None] * gw[..., :, None] * gw[..., None, :]
                + (q * w ** (q - 1) * (-2.0 / rho2))[..., None, None] * np.eye(n))
        K = self.K
        return MetricJet(psi[..., None, None] * K,
                         K[..., :, :, None] * dpsi[..., None, None, :],
                         K[..., :, :, None, None] * hpsi[..., None, None, :, :])


def _add_jets(a: MetricJet, b: MetricJet, t: float) -> MetricJet:
    return MetricJet(a.g + t * b.g, a.dg + t * b.dg, a.ddg + t * b.ddg)


@dataclass(frozen=True, eq=False)
class _ShiftedMetric(MetricField):
    base: MetricField | None = None
    bump: BumpTensor | None = None
    t: float = 0.0

    def components(self, x) -> MetricJet:
        return _add_jets(self.base.components(x), self.bump.jets(x), self.t)


def shifted_metric(g: MetricField, k: BumpTensor, t: float) -> MetricField:
    """``g + t k`` as a metric field."""
    return _ShiftedMetric(n=g.n, tau=g.tau, r0=g.r0, coeffs=(), label=f"{g.label}+t k",
                          base=g, bump=k, t=float(t))


@dataclass(frozen=True)
class VariationalReport:
    lhs: float
    rhs: float
    mismatch: float
    bulk_rhs: float
    boundary_rhs: float
    mass_difference: float
    dt: float
    tail_estimate: float = 0.0


def _ball_rule(n: int, center, rho: float, order: int, half: bool):
    """Nodes/weights for the ball (or the half-ball above x_n = 0) around ``center``."""
    q = order + 2
    s, ws = np.polynomial.legendre.leggauss(q)
    s = 0.5 * rho * (s + 1.0)
    ws = 0.5 * rho * ws * s ** (n - 1)
    rule = hemisphere_rule(n, 1.0, order)
    dirs, dw = (rule.nodes, rule.weights) if half else full_sphere_nodes(rule)
    pts = center + s[:, None, None] * dirs[None, :, :]
    w = ws[:, None] * dw[None, :]
    return pts.reshape(-1, n), w.reshape(-1)


def _disc_rule(n: int, center, rho: float, order: int):
    q = order + 2
    s, ws = np.polynomial.legendre.leggauss(q)
    s = 0.5 * rho * (s + 1.0)
    ws = 0.5 * rho * ws * s ** (n - 2)
    dirs, dw = unit_sphere_rule(n - 1, order)
    dirs = np.concatenate([dirs, np.zeros((len(dw), 1))], axis=1)
    pts = center + s[:, None, None] * dirs[None, :, :]
    return pts.reshape(-1, n), (ws[:, None] * dw[None, :]).reshape(-1)


def variational_check(g: MetricField, k: BumpTensor, dt: float = 1e-3, R_V: float | None = None,
                      order: int = 12) -> VariationalReport:
    """Compare a central difference of ``int R dM + 2 int H dSigma - m`` along ``g + t k``
    with the first-variation integral ``-int (Ric - R g/2)^{ab} k_ab dM - int (A - H h)^{ab} k_ab dSigma``.

    Integrals are taken over the support of ``k``; outside it the integrands
    of the two perturbed metrics coincide, so the difference is exact.
    """
    n = g.n
    p = np.asarray(k.center, float)
    rho = float(k.radius)
    if R_V is None:
        R_V = 2.0 * (np.linalg.norm(p) + rho) + 1.0
    if np.linalg.norm(p) + rho > R_V / 2.0:
        raise MassError("k must be supported in r <= R_V / 2")
    if np.linalg.norm(p) - rho < g.r0:
        raise MassError("support of k reaches inside r0")
    if p[-1] == 0.0:
        half = True
    elif p[-1] >= rho:
        half = False
    else:
        raise MassError("k must be centred on Sigma or supported away from it")

    bulk_pts, bulk_w = _ball_rule(n, p, rho, order, half)
    cb = g.components(bulk_pts)
    kb = k.jets(bulk_pts)
    if half:
        disc_pts, disc_w = _disc_rule(n, p, rho, order)
        cs = g.components(disc_pts)
        ks = k.jets(disc_pts)

    def functional(t: float) -> float:
        c = _add_jets(cb, kb, t)
        if np.min(np.linalg.eigvalsh(c.g)) <= 0.0:
            raise MassError("g + t k loses positive definiteness")
        cur = curvature_from_jet(c)
        vol = np.sqrt(np.linalg.det(c.g))
        total = float(np.sum(bulk_w * cur.scalar * vol))
        if half:
            cd = _add_jets(cs, ks, t)
            b = boundary_from_jet(cd)
            area = np.sqrt(np.linalg.det(b.h))
            total += 2.0 * float(np.sum(disc_w * b.H * area))
        return total

    lhs = (functional(dt) - functional(-dt)) / (2.0 * dt)
    m_plus = mass_at_radius(shifted_metric(g, k, dt), R_V, order).total
    m_minus = mass_at_radius(shifted_metric(g, k, -dt), R_V, order).total
    dmass = (m_plus - m_minus) / (2.0 * dt)
    lhs -= dmass

    cur = curvature_from_jet(cb)
    einstein = cur.ricci - 0.5 * cur.scalar[:, None, None] * cb.g
    ginv = cur.inverse_metric
    k_up = np.einsum("...ia,...ab,...bj->...ij", ginv, kb.g, ginv)
    vol = np.sqrt(np.linalg.det(cb.g))
    bulk = -float(np.sum(bulk_w * vol * np.einsum("...ij,...ij->...", einstein, k_up)))
    bnd = 0.0
    if half:
        b = boundary_from_jet(cs)
        m = n - 1
        hinv = np.linalg.inv(b.h)
        kh = np.einsum("...ac,...cd,...db->...ab", hinv, ks.g[:, :m, :m], hinv)
        area = np.sqrt(np.linalg.det(b.h))
        tensor = b.A - b.H[:, None, None] * b.h
        bnd = -float(np.sum(disc_w * area * np.einsum("...ab,...ab->...", tensor, kh)))
    rhs = bulk + bnd
    return VariationalReport(lhs=lhs, rhs=rhs, mismatch=abs(lhs - rhs), bulk_rhs=bulk, boundary_rhs=bnd,
                             mass_difference=dmass, dt=float(dt))
