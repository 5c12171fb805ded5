"""Asymptotically flat metrics on the exterior half-space ``{x_n >= 0, |x| >= r0}``."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .expr import (
    Expression,
    FunctionField,
    Jet2,
    ScalarField,
    constant,
    parse_scalar_field,
    radius_field,
)
from .quadrature import hemisphere_rule, sphere_area

__all__ = [
    "shell_perturbed_schwarzschild",
    "ShellPotential",
    "MetricError",
    "DecayWarning",
    "MetricJet",
    "MetricField",
    "PulledBackMetric",
    "DoubledMetric",
    "flat_half_space",
    "half_schwarzschild",
    "conformal",
    "perturbation",
    "double",
    "pullback_rigid",
    "sample_points",
    "fit_decay",
]


class MetricError(ValueError):
    pass


class DecayWarning(UserWarning):
    """Measured decay of a perturbation is slower than the declared rate."""


@dataclass(frozen=True)
class MetricJet:
    """Metric components with first and second coordinate derivatives.

    ``g[..., i, j]``, ``dg[..., i, j, k] = d_k g_ij`` and
    ``ddg[..., i, j, k, l] = d_k d_l g_ij``.
    """

    g: np.ndarray
    dg: np.ndarray
    ddg: np.ndarray


def _pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


def sample_points(n: int, r0: float, levels: int = 4, order: int = 4, boundary: bool = False) -> np.ndarray:
    """Quadrature nodes on dyadic spheres ``r0 * 2^k`` (equators if ``boundary``)."""
    pts = []
    for k in range(1, levels + 1):
        rule = hemisphere_rule(n, r0 * 2.0 ** k, order)
        pts.append(rule.equator_nodes if boundary else np.concatenate([rule.nodes, rule.equator_nodes]))
    return np.concatenate(pts)


def fit_decay(radii, sups) -> float:
    """Slope ``s`` of ``sup ~ r^{-s}`` by least squares in log-log; inf if all vanish."""
    radii = np.asarray(radii, float)
    sups = np.asarray(sups, float)
    if np.all(sups <= 1e-300):
        return math.inf
    mask = sups > 1e-300
    if mask.sum() < 2:
        return math.inf
    slope = np.polyfit(np.log(radii[mask]), np.log(sups[mask]), 1)[0]
    return float(-slope)


def _field_decay(u: ScalarField, n: int, r0: float, shift: float = 0.0) -> float:
    radii = [r0 * 2.0 ** k for k in range(2, 7)]
    sups = []
    for r in radii:
        rule = hemisphere_rule(n, r, 4)
        sups.append(float(np.max(np.abs(u.value(rule.nodes) - shift))))
    return fit_decay(radii, sups)


@dataclass(frozen=True, eq=False)
class MetricField:
    """Symmetric metric ``g_ij`` given by ``n(n+1)/2`` coefficient fields.

    ``coeffs`` is ordered as the upper triangle ``(0,0), (0,1), ..., (n-1,n-1)``;
    ``g_ij`` and ``g_ji`` share one field.
    """

    n: int
    tau: float
    r0: float
    coeffs: tuple
    is_conformally_flat: bool = False
    boundary_orthogonal: bool = False
    exact_mass: float | None = None
    label: str = "metric"
    family: Mapping = field(default_factory=dict)

    def coeff(self, i: int, j: int) -> ScalarField:
        if i > j:
            i, j = j, i
        return self.coeffs[_pairs(self.n).index((i, j))]

    def components(self, x) -> MetricJet:
        pts = np.asarray(x, dtype=float)
        n = self.n
        shape = pts.shape[:-1]
        g = np.empty(shape + (n, n))
        dg = np.empty(shape + (n, n, n))
        ddg = np.empty(shape + (n, n, n, n))
        seen: dict[int, Jet2] = {}
        for (i, j), f in zip(_pairs(n), self.coeffs):
            jet = seen.get(id(f))
            if jet is None:
                jet = f.jet(pts)
                seen[id(f)] = jet
            for a, b in ((i, j), (j, i)):
                g[..., a, b] = jet.value
                dg[..., a, b, :] = jet.gradient
                ddg[..., a, b, :, :] = jet.hessian
        return MetricJet(g, dg, ddg)

    def matrix(self, x) -> np.ndarray:
        return self.components(x).g

    def min_eigenvalue(self, x) -> float:
        return float(np.min(np.linalg.eigvalsh(self.matrix(x))))

    def is_positive_definite(self, x=None) -> bool:
        pts = sample_points(self.n, self.r0) if x is None else np.atleast_2d(x)
        return self.min_eigenvalue(pts) > 0.0

    def decay_report(self, levels: int = 5) -> dict:
        """Sup of ``r^tau|g-delta|``, ``r^(tau+1)|dg|``, ``r^(tau+2)|ddg|`` on dyadic spheres."""
        tau = self.tau if math.isfinite(self.tau) else 0.0
        rows = []
        eye = np.eye(self.n)
        for k in range(1, levels + 1):
            r = self.r0 * 2.0 ** k
            rule = hemisphere_rule(self.n, r, 4)
            c = self.components(rule.nodes)
            rows.append((r,
                         float(np.max(np.abs(c.g - eye))) * r ** tau,
                         float(np.max(np.abs(c.dg))) * r ** (tau + 1),
                         float(np.max(np.abs(c.ddg))) * r ** (tau + 2)))
        return {"tau": self.tau, "rows": rows}

    def with_label(self, label: str) -> "MetricField":
        return replace(self, label=label)


def _structure_flags(coeffs, n: int, r0: float) -> bool:
    """True when every g_{alpha n} vanishes on sampled boundary points."""
    pts = sample_points(n, r0, boundary=True)
    for a in range(n - 1):
        f = coeffs[_pairs(n).index((a, n - 1))]
        if isinstance(f, Expression) and f.is_constant:
            if f.root.value != 0.0:
                return False
            continue
        if np.max(np.abs(f.value(pts))) > 0.0:
            return False
    return True


def flat_half_space(n: int, r0: float = 1.0) -> MetricField:
    if n < 3:
        raise MetricError("dimension must be at least 3")
    one, zero = constant(1.0, n), constant(0.0, n)
    coeffs = tuple(one if i == j else zero for i, j in _pairs(n))
    return MetricField(n=n, tau=math.inf, r0=float(r0), coeffs=coeffs,
                       is_conformally_flat=True, boundary_orthogonal=True,
                       exact_mass=0.0, label="flat", family={"family": "flat"})


def half_schwarzschild(n: int, m: float) -> MetricField:
    if n < 3:
        raise MetricError("dimension must be at least 3")
    if not m > 0:
        raise MetricError("mass parameter m must be positive")
    u = 1.0 + (m / 2.0) * radius_field(n) ** (2 - n)
    p = u ** (4.0 / (n - 2))
    zero = constant(0.0, n)
    coeffs = tuple(p if i == j else zero for i, j in _pairs(n))
    mass = (n - 1) * sphere_area(n - 1) * m
    return MetricField(n=n, tau=float(n - 2), r0=(m / 2.0) ** (1.0 / (n - 2)), coeffs=coeffs,
                       is_conformally_flat=True, boundary_orthogonal=True, exact_mass=mass,
                       label=f"half_schwarzschild(n={n}, m={m:g})",
                       family={"family": "half_schwarzschild", "m": float(m)})


def _radial_jet(x: np.ndarray, f0, f1, f2) -> Jet2:
    """Jet of ``F(|x|)`` from ``F, F', F''`` evaluated at the radii."""
    r = np.sqrt(np.sum(x * x, axis=-1))
    xh = x / r[..., None]
    n = x.shape[-1]
    outer = xh[..., :, None] * xh[..., None, :]
    hess = f2[..., None, None] * outer + (f1 / r)[..., None, None] * (np.eye(n) - outer)
    return Jet2(f0, f1[..., None] * xh, hess)


class ShellPotential:
    """Radial ``w`` with ``-Laplace w = rho`` for a polynomial shell density on
    ``r1 <= r <= r2``; ``w = (dm/2) r^(2-n)`` outside the shell and constant inside."""

    def __init__(self, n: int, dm: float, r1: float, r2: float):
        if not 0 < r1 < r2:
            raise MetricError("shell radii must satisfy 0 < r1 < r2")
        self.n, self.r1, self.r2 = n, float(r1), float(r2)
        c, a = 0.5 * (r1 + r2), 0.5 * (r2 - r1)
        P = np.polynomial.Polynomial([1.0, 0.0, -1.0]) ** 3  # in the variable (s - c)/a
        P = P(np.polynomial.Polynomial([-c / a, 1.0 / a]))
        Q = (P * np.polynomial.Polynomial.basis(n - 1)).integ(lbnd=r1)
        amp = (n - 2) * (dm / 2.0) / Q(r2)
        self.rho = amp * P
        self.Q = amp * Q
        self.tail = dm / 2.0
        qc = self.Q.coef
        # antiderivative of s^(1-n) Q(s) term by term
        self._terms = [(k + 2 - n, qk) for k, qk in enumerate(qc)]
        self.w_inner = self._w_shell(np.array([self.r1]))[0]

    def _anti(self, s):
        out = np.zeros_like(s)
        for p, qk in self._terms:
            out += qk * (np.log(s) if p == 0 else s ** p / p)
        return out

    def _w_shell(self, r):
        w2 = self.tail * self.r2 ** (2 - self.n)
        return w2 + self._anti(np.full_like(r, self.r2)) - self._anti(r)

    def derivatives(self, r):
        n = self.n
        r = np.asarray(r, float)
        f0 = np.empty_like(r)
        f1 = np.zeros_like(r)
        f2 = np.zeros_like(r)
        out = r >= self.r2
        mid = (r > self.r1) & ~out
        ins = r <= self.r1
        f0[out] = self.tail * r[out] ** (2 - n)
        f1[out] = (2 - n) * self.tail * r[out] ** (1 - n)
        f2[out] = (2 - n) * (1 - n) * self.tail * r[out] ** (-n)
        rm = r[mid]
        f0[mid] = self._w_shell(rm)
        f1[mid] = -rm ** (1 - n) * self.Q(rm)
        f2[mid] = -self.rho(rm) - (n - 1) * f1[mid] / rm
        f0[ins] = self.w_inner
        return f0, f1, f2


def shell_perturbed_schwarzschild(n: int, m: float, dm: float, r1: float = 2.0,
                                  r2: float = 4.0) -> MetricField:
    """Half-Schwarzschild with conformal factor ``1 + (m/2) r^(2-n) + w`` where ``w`` is
    the potential of a smooth non-negative shell of mass parameter ``dm`` on
    ``[r1, r2]``.  Scalar-non-negative, totally geodesic boundary, and equal
    to half-Schwarzschild of parameter ``m + dm`` outside ``r2``.
    """
    if n < 3:
        raise MetricError("dimension must be at least 3")
    if not (m > 0 and dm >= 0):
        raise MetricError("need m > 0 and dm >= 0")
    shell = ShellPotential(n, dm, r1, r2)
    r0 = (m / 2.0) ** (1.0 / (n - 2))

    def jet(x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        f0, f1, f2 = shell.derivatives(r)
        b0 = 1.0 + (m / 2.0) * r ** (2 - n) + f0
        b1 = (m / 2.0) * (2 - n) * r ** (1 - n) + f1
        b2 = (m / 2.0) * (2 - n) * (1 - n) * r ** (-n) + f2
        return _radial_jet(x, b0, b1, b2)

    u = FunctionField(n, jet, label=f"shell(m={m:g}, dm={dm:g})")
    g = conformal(flat_half_space(n, r0), u)
    return replace(g, tau=float(n - 2), exact_mass=(n - 1) * sphere_area(n - 1) * (m + dm),
                   label=f"shell_perturbed_schwarzschild(n={n}, m={m:g}, dm={dm:g})",
                   family={"family": "shell_perturbed", "m": float(m), "dm": float(dm),
                           "r1": float(r1), "r2": float(r2)})


def _as_field(u, n: int) -> ScalarField:
    if isinstance(u, ScalarField):
        if u.n != n:
            raise MetricError("field dimension does not match the metric")
        return u
    if isinstance(u, str):
        return parse_scalar_field(u, n)
    return constant(float(u), n)


def conformal(g: MetricField, u) -> MetricField:
    """The metric ``u^(4/(n-2)) g``; ``u`` must be positive at the samples."""
    n = g.n
    u = _as_field(u, n)
    pts = sample_points(n, g.r0)
    if np.min(u.value(pts)) <= 0.0:
        raise MetricError("conformal factor is not positive at some sample point")
    p = u ** (4.0 / (n - 2))
    cache: dict[int, ScalarField] = {}
    coeffs = []
    for f in g.coeffs:
        if id(f) not in cache:
            if isinstance(f, Expression) and f.is_constant and f.root.value == 0.0:
                cache[id(f)] = f
            elif isinstance(f, Expression) and f.is_constant and f.root.value == 1.0:
                cache[id(f)] = p
            else:
                cache[id(f)] = p * f
        coeffs.append(cache[id(f)])
    tau = min(g.tau, _field_decay(u, n, g.r0, shift=1.0))
    fam = {"family": "conformal", "base": dict(g.family)}
    if isinstance(u, Expression):
        try:
            fam["u"] = u.to_source()
        except ValueError:
            pass
    return MetricField(n=n, tau=tau, r0=g.r0, coeffs=tuple(coeffs),
                       is_conformally_flat=g.is_conformally_flat,
                       boundary_orthogonal=g.boundary_orthogonal, exact_mass=None,
                       label=f"conformal({g.label})", family=fam)


def perturbation(a: Mapping, tau: float, n: int | None = None, r0: float = 1.0,
                 decay_slack: float = 0.25) -> MetricField:
    """``g = delta + a`` with declared decay ``tau``.

    ``a`` maps 1-based index pairs ``(i, j)`` to fields or expression strings;
    giving both ``(i, j)`` and ``(j, i)`` requires them to be identical.
    """
    if n is None:
        n = max(max(k) for k in a) if a else 3
    if n < 3:
        raise MetricError("dimension must be at least 3")
    entries: dict[tuple[int, int], ScalarField] = {}
    for (i, j), f in a.items():
        if not (1 <= i <= n and 1 <= j <= n):
            raise MetricError(f"index ({i},{j}) out of range for n={n}")
        key = (min(i, j) - 1, max(i, j) - 1)
        fld = _as_field(f, n)
        if key in entries and entries[key] != fld:
            raise MetricError(f"a_{i}{j} and a_{j}{i} differ: perturbation must be symmetric")
        entries[key] = fld
    zero = constant(0.0, n)
    coeffs = []
    for i, j in _pairs(n):
        f = entries.get((i, j), zero)
        coeffs.append(1.0 + f if i == j else f)
    coeffs = tuple(coeffs)
    pts = sample_points(n, r0)
    vals = []
    for f in entries.values():
        vals.append(f.value(pts))
    g = MetricField(n=n, tau=float(tau), r0=float(r0), coeffs=coeffs, label="perturbation",
                    family={"family": "perturbation",
                            "a": {f"{i + 1}{j + 1}": _source_or_none(f) for (i, j), f in sorted(entries.items())}})
    if not g.is_positive_definite(pts):
        raise MetricError("delta + a is not positive definite at some sample point")
    measured = math.inf
    for f in entries.values():
        measured = min(measured, _field_decay(f, n, r0))
    if measured < tau - decay_slack:
        warnings.warn(f"measured decay {measured:.3f} is slower than declared tau={tau}", DecayWarning,
                      stacklevel=2)
    flat = all(isinstance(f, Expression) and f.is_constant and f.root.value == 0.0 for f in entries.values())
    return replace(g, boundary_orthogonal=_structure_flags(coeffs, n, r0), is_conformally_flat=flat)


def _source_or_none(f):
    try:
        return f.to_source()
    except (AttributeError, ValueError):
        return None


# ---------------------------------------------------------------- rigid motions


@dataclass(frozen=True, eq=False)
class PulledBackMetric(MetricField):
    base: MetricField | None = None
    Q: np.ndarray | None = None
    b: np.ndarray | None = None

    def components(self, x) -> MetricJet:
        y = np.asarray(x, dtype=float)
        Q, b = self.Q, self.b
        c = self.base.components(y @ Q.T + b)
        g = np.einsum("...ab,ai,bj->...ij", c.g, Q, Q)
        dg = np.einsum("...abc,ai,bj,ck->...ijk", c.dg, Q, Q, Q)
        ddg = np.einsum("...abcd,ai,bj,ck,dl->...ijkl", c.ddg, Q, Q, Q, Q)
        return MetricJet(g, dg, ddg)


def _component_field(g: MetricField, i: int, j: int) -> FunctionField:
    def fn(pts):
        c = g.components(pts)
        return Jet2(c.g[..., i, j], c.dg[..., i, j, :], c.ddg[..., i, j, :, :])
    return FunctionField(g.n, fn, label=f"{g.label}[{i}{j}]")


def pullback_rigid(g: MetricField, Q, b) -> PulledBackMetric:
    """Pull ``g`` back along ``x = Q y + b`` with ``Q e_n = e_n`` and ``b_n = 0``."""
    n = g.n
    Q = np.asarray(Q, dtype=float)
    b = np.asarray(b, dtype=float)
    if Q.shape != (n, n) or b.shape != (n,):
        raise MetricError("Q must be n x n and b an n-vector")
    if np.max(np.abs(Q.T @ Q - np.eye(n))) > 1e-12:
        raise MetricError("Q is not orthogonal (tolerance 1e-12)")
    en = np.zeros(n)
    en[-1] = 1.0
    if np.max(np.abs(Q @ en - en)) > 1e-12:
        raise MetricError("Q must fix e_n")
    if b[-1] != 0.0:
        raise MetricError("translation must be tangent to the boundary (b_n = 0)")
    out = PulledBackMetric(n=n, tau=g.tau, r0=g.r0 + float(np.linalg.norm(b)), coeffs=(),
                           is_conformally_flat=g.is_conformally_flat,
                           boundary_orthogonal=g.boundary_orthogonal, exact_mass=g.exact_mass,
                           label=f"pullback({g.label})", family=dict(g.family),
                           base=g, Q=Q.copy(), b=b.copy())
    coeffs = tuple(_component_field(out, i, j) for i, j in _pairs(n))
    object.__setattr__(out, "coeffs", coeffs)
    return out


# ---------------------------------------------------------------- doubling


@dataclass(frozen=True, eq=False)
class DoubledMetric:
    """Two copies of ``base`` glued along the boundary.

    Sheet 0 is ``{x_n >= 0}`` carrying ``g``; sheet 1 is ``{x_n <= 0}``
    carrying the reflection ``P g(Px) P`` with ``P = diag(1, .., 1, -1)``.
    """

    base: MetricField
    R_K: float

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def corner_set(self) -> str:
        return f"Sigma_K = {{x_n = 0, {self.base.r0:g} <= |x| <= {self.R_K:g}}}"

    def sheet(self, x) -> np.ndarray:
        return (np.asarray(x, float)[..., -1] < 0.0).astype(int)

    def components(self, x, sheet: int | None = None) -> MetricJet:
        """Components of the doubled metric; ``sheet`` forces one-sided values on Sigma."""
        pts = np.asarray(x, dtype=float)
        n = self.n
        if sheet is None:
            lower = pts[..., -1] < 0.0
        else:
            lower = np.full(pts.shape[:-1], bool(sheet))
        refl = pts.copy()
        refl[..., -1] = np.abs(refl[..., -1])
        c = self.base.components(refl)
        s = np.ones(n)
        s[-1] = -1.0
        sign = np.where(lower[..., None], s, 1.0)  # per-index parity on sheet 1
        g = c.g * sign[..., :, None] * sign[..., None, :]
        dg = c.dg * sign[..., :, None, None] * sign[..., None, :, None] * sign[..., None, None, :]
        ddg = (c.ddg * sign[..., :, None, None, None] * sign[..., None, :, None, None]
               * sign[..., None, None, :, None] * sign[..., None, None, None, :])
        return MetricJet(g, dg, ddg)

    def induced_metrics(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Induced boundary metrics from sheet 0 and sheet 1 at points with ``x_n = 0``."""
        m = self.n - 1
        return (self.components(x, sheet=0).g[..., :m, :m],
                self.components(x, sheet=1).g[..., :m, :m])

    def corner_report(self, samples: int = 64, seed: int = 0) -> dict:
        """``H+`` and ``H-`` on the corner set for the common normal pointing into sheet 1.

        ``H-`` is the mean curvature of Sigma seen from sheet 0, ``H+`` the one
        seen from sheet 1, both computed with the unit normal ``-grad x_n/|grad x_n|``.
        """
        from .geometry import level_set_mean_curvature

        rng = np.random.default_rng(seed)
        n = self.n
        lo = self.base.r0 * 1.0001
        r = rng.uniform(lo, max(self.R_K, lo), samples)
        d = rng.normal(size=(samples, n - 1))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = np.concatenate([d * r[:, None], np.zeros((samples, 1))], axis=1)
        h_minus = level_set_mean_curvature(self.components(pts, sheet=0), side=-1)
        h_plus = level_set_mean_curvature(self.components(pts, sheet=1), side=-1)
        return {"points": pts, "H_plus": h_plus, "H_minus": h_minus,
                "max_jump": float(np.max(np.abs(h_plus + h_minus))) if samples else 0.0}


def double(g: MetricField, R_K: float | None = None) -> DoubledMetric:
    R_K = 4.0 * g.r0 if R_K is None else float(R_K)
    if R_K < g.r0:
        raise MetricError("R_K must be at least r0")
    return DoubledMetric(base=g, R_K=R_K)
