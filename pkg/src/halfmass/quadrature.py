"""Product Gauss rules on coordinate hemispheres and their equators.

The hemisphere ``{|x| = r, x_n >= 0}`` is parametrised by ``t = x_n/r`` and a
point of the full unit sphere in the first ``n-1`` coordinates.  The ``t``
factor carries the weight ``(1 - t^2)^((n-3)/2)`` and is integrated with a
Gauss-Jacobi rule; the inner sphere recurses down to a uniform circle rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import roots_jacobi

__all__ = [
    "HemisphereRule",
    "QuadratureError",
    "sphere_area",
    "unit_sphere_rule",
    "hemisphere_rule",
    "full_sphere_nodes",
    "integrate_flux",
    "integrate_equator",
]

SUPPORTED_DIMENSIONS = range(3, 8)


class QuadratureError(RuntimeError):
    pass


def sphere_area(k: int) -> float:
    """Area of the unit ``k``-sphere in R^{k+1} (so ``sphere_area(n-1)`` is omega_{n-1})."""
    return 2.0 * math.pi ** ((k + 1) / 2.0) / math.gamma((k + 1) / 2.0)


def _circle(order: int) -> tuple[np.ndarray, np.ndarray]:
    m = 2 * (order // 2 + 1)
    phi = 2.0 * np.pi * np.arange(m) / m
    pts = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    return pts, np.full(m, 2.0 * np.pi / m)


def unit_sphere_rule(m: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on the full unit sphere S^{m-1} in R^m, exact to ``order``."""
    if m == 2:
        return _circle(order)
    a = (m - 3) / 2.0
    q = order // 2 + 1
    t, wt = roots_jacobi(q, a, a)
    inner, win = unit_sphere_rule(m - 1, order)
    s = np.sqrt(1.0 - t * t)
    pts = np.concatenate([s[:, None, None] * inner[None, :, :],
                          np.broadcast_to(t[:, None, None], (q, len(win), 1))], axis=2)
    w = wt[:, None] * win[None, :]
    return pts.reshape(-1, m), w.reshape(-1)


def _half_interval(order: int, a: float) -> tuple[np.ndarray, np.ndarray]:
    """Rule for int_0^1 f(t) (1 - t^2)^a dt."""
    q = order // 2 + 1
    if a == 0.0:
        s, ws = roots_jacobi(q, 0.0, 0.0)
        return 0.5 * (s + 1.0), 0.5 * ws
    if float(a).is_integer():
        q = (order + int(a)) // 2 + 1  # the polynomial factor (1 + t)^a raises the degree
    else:
        q += 6  # absorbs the analytic factor (1 + t)^a
    s, ws = roots_jacobi(q, a, 0.0)
    t = 0.5 * (s + 1.0)
    w = ws * 2.0 ** (-a) * ((3.0 + s) / 2.0) ** a * 0.5
    return t, w


@dataclass(frozen=True)
class HemisphereRule:
    n: int
    r: float
    order: int
    nodes: np.ndarray
    weights: np.ndarray
    equator_nodes: np.ndarray
    equator_weights: np.ndarray

    @property
    def normals(self) -> np.ndarray:
        """Euclidean outward normal mu = x/r at each hemisphere node."""
        return self.nodes / self.r

    @property
    def conormals(self) -> np.ndarray:
        """Outward co-normal theta = (x_1..x_{n-1}, 0)/r at each equator node."""
        return self.equator_nodes / self.r


def hemisphere_rule(n: int, r: float, order: int) -> HemisphereRule:
    """Product rule on the hemisphere of radius ``r`` plus its equator rule."""
    if n not in SUPPORTED_DIMENSIONS:
        raise QuadratureError(f"unsupported dimension n={n}; expected 3..7")
    if order < 2:
        raise QuadratureError("order must be at least 2")
    if not r > 0:
        raise QuadratureError("radius must be positive")
    t, wt = _half_interval(order, (n - 3) / 2.0)
    inner, win = unit_sphere_rule(n - 1, order)
    s = np.sqrt(1.0 - t * t)
    pts = np.concatenate([s[:, None, None] * inner[None, :, :],
                          np.broadcast_to(t[:, None, None], (len(t), len(win), 1))], axis=2)
    w = (wt[:, None] * win[None, :]).reshape(-1)
    nodes = r * pts.reshape(-1, n)
    eq = np.concatenate([inner, np.zeros((len(win), 1))], axis=1)
    return HemisphereRule(
        n=n, r=float(r), order=int(order),
        nodes=nodes, weights=w * r ** (n - 1),
        equator_nodes=r * eq, equator_weights=win * r ** (n - 2),
    )


def full_sphere_nodes(rule: HemisphereRule) -> tuple[np.ndarray, np.ndarray]:
    """Hemisphere rule joined with its reflection across x_n = 0."""
    refl = rule.nodes.copy()
    refl[:, -1] *= -1.0
    return np.concatenate([rule.nodes, refl]), np.concatenate([rule.weights, rule.weights])


def _values(v, pts: np.ndarray, what: str) -> np.ndarray:
    try:
        out = v(pts) if callable(v) else v
    except Exception as exc:  # evaluation failures surface with context
        raise QuadratureError(f"{what} evaluation failed: {exc}") from exc
    out = np.asarray(out, dtype=float)
    if not np.all(np.isfinite(out)):
        raise QuadratureError(f"{what} is not finite at some node")
    return out


def integrate_flux(v: Callable[[np.ndarray], np.ndarray] | np.ndarray, rule: HemisphereRule) -> float:
    """Sum of w <v(x), x/r> over the hemisphere nodes."""
    vals = _values(v, rule.nodes, "flux field")
    return float(np.sum(rule.weights * np.einsum("ki,ki->k", vals, rule.normals)))


def integrate_equator(f: Callable[[np.ndarray], np.ndarray] | np.ndarray, rule: HemisphereRule) -> float:
    """Sum of w f_alpha(x) theta^alpha over the equator nodes."""
    vals = _values(f, rule.equator_nodes, "covector field")
    m = rule.n - 1
    return float(np.sum(rule.equator_weights * np.einsum("ka,ka->k", vals[:, :m], rule.conormals[:, :m])))
