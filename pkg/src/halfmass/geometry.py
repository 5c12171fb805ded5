"""Pointwise curvature, boundary geometry and the mass density.

All derivatives come from the metric jets; nothing here differences on a grid.
Indices follow the half-space convention: the last coordinate is normal to
Sigma = {x_n = 0} and points into the manifold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metric import MetricField, MetricJet, fit_decay
from .quadrature import hemisphere_rule

__all__ = [
    "GeometryError",
    "CurvaturePoint",
    "BoundaryPoint",
    "curvature_at",
    "curvature_from_jet",
    "boundary_at",
    "boundary_from_jet",
    "level_set_mean_curvature",
    "mass_density",
    "mass_density_from_jet",
    "expansion_residuals",
    "residual_decay",
    "conformal_constants",
]


class GeometryError(ValueError):
    pass


def conformal_constants(n: int) -> tuple[float, float]:
    """``(a_n, b_n) = (4(n-1)/(n-2), 2(n-1)/(n-2))``."""
    return 4.0 * (n - 1) / (n - 2), 2.0 * (n - 1) / (n - 2)


@dataclass(frozen=True)
class CurvaturePoint:
    x: np.ndarray
    christoffel: np.ndarray  # [..., k, i, j] = Gamma^k_ij
    ricci: np.ndarray
    scalar: np.ndarray
    inverse_metric: np.ndarray


@dataclass(frozen=True)
class BoundaryPoint:
    x: np.ndarray
    eta: np.ndarray
    A: np.ndarray
    H: np.ndarray
    h: np.ndarray
    H_closed: np.ndarray  # the coordinate expression 1/2 (g^nn)^(1/2) (2 g_na,a - g_aa,n)


def _inverse(g: np.ndarray) -> np.ndarray:
    det = np.linalg.det(g)
    if np.any(~np.isfinite(det)) or np.any(np.abs(det) < 1e-300):
        raise GeometryError("metric is not invertible at some point")
    return np.linalg.inv(g)


def _christoffel_lower(dg: np.ndarray) -> np.ndarray:
    # [..., l, i, j] = 1/2 (d_i g_lj + d_j g_li - d_l g_ij)
    return 0.5 * (np.swapaxes(dg, -1, -2) + dg - np.moveaxis(dg, -1, -3))


def _dinverse(ginv: np.ndarray, dg: np.ndarray) -> np.ndarray:
    # [..., a, b, m] = d_m g^ab
    return -np.einsum("...ap,...pqm,...qb->...abm", ginv, dg, ginv)


def curvature_from_jet(c: MetricJet, x=None) -> CurvaturePoint:
    g, dg, ddg = c.g, c.dg, c.ddg
    ginv = _inverse(g)
    low = _christoffel_lower(dg)
    gam = np.einsum("...kl,...lij->...kij", ginv, low)
    # d_m of the lowered symbols: [..., l, i, j, m]
    dlow = 0.5 * (np.swapaxes(ddg, -2, -3) + ddg - np.moveaxis(ddg, -2, -4))
    dinv = _dinverse(ginv, dg)
    dgam = np.einsum("...klm,...lij->...kijm", dinv, low) + np.einsum("...kl,...lijm->...kijm", ginv, dlow)
    t1 = np.einsum("...likl->...ik", dgam)
    t2 = np.einsum("...lilk->...ik", dgam)
    t3 = np.einsum("...llm,...mik->...ik", gam, gam)
    t4 = np.einsum("...lkm,...mil->...ik", gam, gam)
    ric = t1 - t2 + t3 - t4
    ric = 0.5 * (ric + np.swapaxes(ric, -1, -2))
    scal = np.einsum("...ik,...ik->...", ginv, ric)
    return CurvaturePoint(x=None if x is None else np.asarray(x, float), christoffel=gam,
                          ricci=ric, scalar=scal, inverse_metric=ginv)


def curvature_at(g: MetricField, x) -> CurvaturePoint:
    """Christoffel symbols, Ricci tensor and scalar curvature at ``x`` (point or batch)."""
    return curvature_from_jet(g.components(x), x)


def level_set_mean_curvature(c: MetricJet, side: int = -1) -> np.ndarray:
    """``div_g nu`` for ``nu = side (g^nn)^(-1/2) g^{ni} d_i``, the unit normal to ``{x_n = const}``.

    With ``side = -1`` this is the outward normal of the half-space and the
    result is the mean curvature of Sigma.
    """
    g, dg = c.g, c.dg
    n = g.shape[-1]
    ginv = _inverse(g)
    dinv = _dinverse(ginv, dg)
    gnn = ginv[..., n - 1, n - 1]
    row = ginv[..., n - 1, :]
    drow_div = np.einsum("...ii->...", dinv[..., n - 1, :, :])  # d_i g^{ni}
    dgnn = dinv[..., n - 1, n - 1, :]
    div_coord = drow_div / np.sqrt(gnn) - 0.5 * np.einsum("...i,...i->...", row, dgnn) / gnn ** 1.5
    nu = side * row / np.sqrt(gnn)[..., None]
    # Gamma^i_ik = 1/2 g^il d_k g_il
    trace_gam = 0.5 * np.einsum("...il,...ilk->...k", ginv, dg)
    return side * div_coord + np.einsum("...k,...k->...", trace_gam, nu)


def boundary_from_jet(c: MetricJet, x=None) -> BoundaryPoint:
    g, dg = c.g, c.dg
    n = g.shape[-1]
    m = n - 1
    ginv = _inverse(g)
    gnn = ginv[..., m, m]
    eta = -ginv[..., m, :] / np.sqrt(gnn)[..., None]
    low = _christoffel_lower(dg)
    gam_n = np.einsum("...l,...lij->...ij", ginv[..., m, :], low)
    A = gam_n[..., :m, :m] / np.sqrt(gnn)[..., None, None]
    h = g[..., :m, :m]
    hinv = _inverse(h)
    H = np.einsum("...ab,...ab->...", hinv, A)
    idx = np.arange(m)
    closed = 0.5 * np.sqrt(gnn) * (2.0 * dg[..., m, idx, idx].sum(-1) - dg[..., idx, idx, m].sum(-1))
    return BoundaryPoint(x=None if x is None else np.asarray(x, float), eta=eta, A=A, H=H, h=h,
                         H_closed=closed)


def boundary_at(g: MetricField, x) -> BoundaryPoint:
    """Outward normal, shape operator, mean curvature and induced metric on Sigma."""
    pts = np.asarray(x, dtype=float)
    if np.any(pts[..., -1] != 0.0):
        raise GeometryError("boundary quantities require points with x_n = 0")
    return boundary_from_jet(g.components(pts), pts)


def mass_density_from_jet(c: MetricJet) -> np.ndarray:
    dg = c.dg
    return np.einsum("...ijj->...i", dg) - np.einsum("...jji->...i", dg)


def mass_density(g: MetricField, x) -> np.ndarray:
    """The vector ``C_i = g_ij,j - g_jj,i``."""
    return mass_density_from_jet(g.components(x))


def _density_divergence(c: MetricJet) -> np.ndarray:
    ddg = c.ddg
    return np.einsum("...ijji->...", ddg) - np.einsum("...jjii->...", ddg)


def expansion_residuals(g: MetricField, r: float, order: int = 8) -> dict:
    """Sup of ``|R - C_i,i|`` on the hemisphere and of
    ``|H - 1/2(-<C, eta> + g_na,a)|`` on the equator, at radius ``r``.

    Also returns rounding floors: a residual at or below its floor is
    indistinguishable from exact cancellation.
    """
    if r < 2.0 * g.r0:
        raise GeometryError("residuals need r >= 2 r0")
    n = g.n
    m = n - 1
    rule = hemisphere_rule(n, r, order)
    c = g.components(rule.nodes)
    cur = curvature_from_jet(c)
    div_c = _density_divergence(c)
    theta = np.abs(cur.scalar - div_c)
    eps = np.finfo(float).eps
    floor = 256 * eps * float(np.max(np.abs(c.ddg))) * n ** 2
    ce = g.components(rule.equator_nodes)
    b = boundary_from_jet(ce)
    dens = mass_density_from_jet(ce)
    idx = np.arange(m)
    g_na_a = ce.dg[..., m, idx, idx].sum(-1)
    lin = 0.5 * (-np.einsum("...i,...i->...", dens, b.eta) + g_na_a)
    theta_p = np.abs(b.H - lin)
    floor_p = 256 * eps * float(np.max(np.abs(ce.dg))) * n ** 2
    return {"r": float(r), "theta_sup": float(np.max(theta)), "theta_prime_sup": float(np.max(theta_p)),
            "theta_floor": floor, "theta_prime_floor": floor_p}


def residual_decay(g: MetricField, radii, order: int = 8) -> dict:
    """Fitted decay exponents of the two residuals over a set of radii.

    Residuals at their rounding floor are dropped; if every radius is at the
    floor the exponent is reported as infinite (exact cancellation).
    """
    rows = [expansion_residuals(g, r, order) for r in radii]
    out = {"rows": rows}
    for key, fkey, name in (("theta_sup", "theta_floor", "theta_decay"),
                            ("theta_prime_sup", "theta_prime_floor", "theta_prime_decay")):
        rr = np.array([row["r"] for row in rows])
        vals = np.array([row[key] if row[key] > row[fkey] else 0.0 for row in rows])
        out[name] = fit_decay(rr, vals) if np.count_nonzero(vals) != 1 else float("nan")
    return out
