"""Finite differences on a truncated half-annulus, the image-kernel oracle,
conformal flattening and weighted decay norms.

Sign convention used throughout: the solver and the oracle both solve
``-Laplace u = f`` with boundary data ``du/deta = fbar`` where ``eta`` is the
outward normal of the half-space (``-e_n`` for the flat metric).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .expr import FunctionField, Jet2, ScalarField, constant
from .geometry import conformal_constants
from .metric import MetricField, MetricJet, _radial_jet, fit_decay
from .quadrature import hemisphere_rule, sphere_area, unit_sphere_rule, full_sphere_nodes

__all__ = [
    "EllipticError",
    "INTERIOR",
    "SIGMA",
    "INNER_CUT",
    "OUTER_CUT",
    "DiscreteHalfAnnulus",
    "DiscreteSolution",
    "solve_bvp",
    "DiscreteOperator",
    "assemble_rhs",
    "image_kernel",
    "image_kernel_gradient",
    "CompactSource",
    "harmonic_oracle",
    "radial_potential",
    "WeightedNormReport",
    "weighted_norm",
    "lq_norm",
    "asymptotic_coefficient",
    "mass_coefficient",
    "cutoff",
    "FlatteningResult",
    "conformal_flatten",
    "cutoff_field",
    "ConformalFactor",
    "FlatteningRejected",
    "AsymptoticFit",
    "OracleField",
]

INTERIOR, SIGMA, INNER_CUT, OUTER_CUT = 0, 1, 2, 3
CLASS_NAMES = {INTERIOR: "interior", SIGMA: "sigma", INNER_CUT: "inner_cut", OUTER_CUT: "outer_cut"}


class EllipticError(RuntimeError):
    pass


def _threads() -> int | None:
    v = os.environ.get("HALFMASS_THREADS")
    return int(v) if v else None


# ---------------------------------------------------------------- grid

_FACE = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
_EDGE = [(a, b, 0) for a in (1, -1) for b in (1, -1)] + \
        [(a, 0, c) for a in (1, -1) for c in (1, -1)] + \
        [(0, b, c) for b in (1, -1) for c in (1, -1)]


@dataclass(frozen=True, eq=False)
class DiscreteHalfAnnulus:
    """Uniform Cartesian nodes of ``{r_in <= |x| <= r_out, x_3 >= 0}`` (n = 3).

    A node is ``inner_cut``/``outer_cut`` when one of its face or edge
    neighbours (ignoring those below Sigma) leaves the annulus through the
    inner/outer sphere, ``sigma`` when it lies on ``x_3 = 0`` otherwise, and
    ``interior`` when its full 19-point stencil is available.
    """

    r_in: float
    r_out: float
    h: float
    n: int
    N: int
    ids: np.ndarray  # box -> node id or -1
    ijk: np.ndarray  # node -> integer box index (offset so that k >= 0)
    points: np.ndarray
    node_class: np.ndarray

    @classmethod
    def build(cls, r_in: float, r_out: float, h: float, n: int = 3) -> "DiscreteHalfAnnulus":
        if n != 3:
            raise EllipticError("grids are implemented for n = 3 only")
        if not (0 < r_in and r_out >= 4.0 * r_in):
            raise EllipticError("need 0 < r_in and r_out >= 4 r_in")
        if not 0 < h <= r_in:
            raise EllipticError("spacing must satisfy 0 < h <= r_in")
        N = int(math.ceil(r_out / h - 1e-9))
        ax = np.arange(-N, N + 1)
        az = np.arange(0, N + 1)
        I, J, K = np.meshgrid(ax, ax, az, indexing="ij")
        R = h * np.sqrt(I * I + J * J + K * K)
        tol = 1e-9 * h
        inside = (R >= r_in - tol) & (R <= r_out + tol)
        ids = np.full(inside.shape, -1, dtype=np.int64)
        ids[inside] = np.arange(int(inside.sum()))
        ijk = np.stack([I[inside] + N, J[inside] + N, K[inside]], axis=1)
        pts = h * np.stack([I[inside], J[inside], K[inside]], axis=1).astype(float)
        inner = np.zeros(len(pts), bool)
        outer = np.zeros(len(pts), bool)
        for off in _FACE + _EDGE:
            nb = ijk + np.array(off)
            valid_k = nb[:, 2] >= 0
            inbox = (nb[:, 0] >= 0) & (nb[:, 0] <= 2 * N) & (nb[:, 1] >= 0) & (nb[:, 1] <= 2 * N) & (nb[:, 2] <= N)
            rn = h * np.sqrt(((nb - np.array([N, N, 0])) ** 2).sum(axis=1))
            ok = valid_k
            inner |= ok & (rn < r_in - tol)
            outer |= ok & ((rn > r_out + tol) | ~inbox)
        cls_ = np.full(len(pts), INTERIOR, dtype=np.int8)
        cls_[pts[:, 2] == 0.0] = SIGMA
        cls_[outer] = OUTER_CUT
        cls_[inner] = INNER_CUT
        return cls(r_in=float(r_in), r_out=float(r_out), h=float(h), n=n, N=N, ids=ids, ijk=ijk,
                   points=pts, node_class=cls_)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def radii(self) -> np.ndarray:
        return np.sqrt((self.points ** 2).sum(axis=1))

    def neighbour(self, offset) -> np.ndarray:
        """Node id of ``node + offset`` for every node (-1 when outside)."""
        nb = self.ijk + np.asarray(offset)
        out = np.full(len(nb), -1, dtype=np.int64)
        ok = ((nb[:, 0] >= 0) & (nb[:, 0] <= 2 * self.N) & (nb[:, 1] >= 0) & (nb[:, 1] <= 2 * self.N)
              & (nb[:, 2] >= 0) & (nb[:, 2] <= self.N))
        out[ok] = self.ids[nb[ok, 0], nb[ok, 1], nb[ok, 2]]
        return out

    def node_ids(self, pts) -> np.ndarray:
        """Ids of the nodes at ``pts`` (which must be grid points)."""
        pts = np.asarray(pts, float)
        ijk = np.rint(pts / self.h).astype(np.int64) + np.array([self.N, self.N, 0])
        ids = self.ids[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
        if np.any(ids < 0):
            raise EllipticError("points are not nodes of this grid")
        return ids

    def nodal(self, values) -> "callable":
        """Wrap per-node values as a callable on node coordinates."""
        values = np.asarray(values, float)
        if values.shape != (self.size,):
            raise EllipticError("nodal values must have one entry per node")
        return lambda pts: values[self.node_ids(pts)]

    def counts(self) -> dict:
        return {CLASS_NAMES[c]: int(np.sum(self.node_class == c)) for c in CLASS_NAMES}


@dataclass(frozen=True, eq=False)
class DiscreteSolution:
    grid: DiscreteHalfAnnulus
    u: np.ndarray
    u_infinity: float
    residual: float  # relative residual of the linear system
    residual_rows: np.ndarray  # row residuals in equation units
    matrix: sp.csr_matrix = field(repr=False, default=None)
    rhs: np.ndarray = field(repr=False, default=None)
    iterations: int = 0

    @property
    def min_u(self) -> float:
        return float(np.min(self.u))

    def to_csv(self, path) -> None:
        g = self.grid
        with open(path, "w") as fh:
            fh.write("# n,h,r_in,r_out\n")
            fh.write(f"{g.n},{g.h!r},{g.r_in!r},{g.r_out!r}\n")
            fh.write("x1,x2,x3,u\n")
            for p, v in zip(g.points, self.u):
                fh.write(f"{p[0]!r},{p[1]!r},{p[2]!r},{v!r}\n")


# ---------------------------------------------------------------- assembly


class _Triplets:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows)
        vals = np.broadcast_to(np.asarray(vals, float), rows.shape)
        keep = vals != 0.0
        self.rows.append(rows[keep])
        self.cols.append(np.asarray(cols)[keep])
        self.vals.append(vals[keep])

    def matrix(self, size: int) -> sp.csr_matrix:
        r = np.concatenate(self.rows) if self.rows else np.zeros(0, int)
        c = np.concatenate(self.cols) if self.cols else np.zeros(0, int)
        v = np.concatenate(self.vals) if self.vals else np.zeros(0)
        return sp.csr_matrix((v, (r, c)), shape=(size, size))


def _metric_coefficients(g: MetricField | None, pts: np.ndarray, chunk: int = 20000):
    """``g^{ij}`` and the first-order coefficient ``b^k = -g^{ij} Gamma^k_ij`` of Laplace_g."""
    m = len(pts)
    n = pts.shape[1] if m else 3
    if g is None or (g.family.get("family") == "flat" and type(g) is MetricField):
        return np.broadcast_to(np.eye(n), (m, n, n)), np.zeros((m, n)), np.broadcast_to(np.eye(n), (m, n, n))
    ginv = np.broadcast_to(np.eye(n), (m, n, n)).copy()
    b = np.zeros((m, n))
    gg = np.broadcast_to(np.eye(n), (m, n, n)).copy()
    beyond = g.family.get("flat_beyond")
    todo = np.arange(m) if beyond is None else np.nonzero(np.sqrt(np.sum(pts * pts, axis=1)) < beyond)[0]
    for s in range(0, len(todo), chunk):
        sl = todo[s:s + chunk]
        c = g.components(pts[sl])
        gi = np.linalg.inv(c.g)
        low = 0.5 * (np.swapaxes(c.dg, -1, -2) + c.dg - np.moveaxis(c.dg, -1, -3))
        gam = np.einsum("...kl,...lij->...kij", gi, low)
        ginv[sl] = gi
        b[sl] = -np.einsum("...ij,...kij->...k", gi, gam)
        gg[sl] = c.g
    return ginv, b, gg


def _unit(k: int, s: int = 1) -> np.ndarray:
    e = np.zeros(3, dtype=np.int64)
    e[k] = s
    return e


def _gradient_stencil(grid: DiscreteHalfAnnulus, nodes: np.ndarray, axis: int, prefer,
                      centered_first: bool = False, width: int = 3):
    """Stencils for d/dx_axis at ``nodes`` as ``(cols, coeffs)`` arrays of ``width`` columns.

    Tries, per node: the three-point one-sided difference in the ``prefer``
    direction (+1/-1), the centred difference, the other one-sided
    difference, then a first-order two-point difference.  With
    ``centered_first`` the centred difference is tried first; with
    ``width=4`` a third-order four-point one-sided difference leads.
    """
    h = grid.h
    prefer = np.broadcast_to(np.asarray(prefer), (len(nodes),))
    ijk = grid.ijk[nodes]

    def nid(off):
        nb = ijk + off
        out = np.full(len(nb), -1, dtype=np.int64)
        ok = ((nb[:, 0] >= 0) & (nb[:, 0] <= 2 * grid.N) & (nb[:, 1] >= 0) & (nb[:, 1] <= 2 * grid.N)
              & (nb[:, 2] >= 0) & (nb[:, 2] <= grid.N))
        out[ok] = grid.ids[nb[ok, 0], nb[ok, 1], nb[ok, 2]]
        return out

    e = _unit(axis)
    near = {1: nid(e), -1: nid(-e)}
    far = {1: nid(2 * e), -1: nid(-2 * e)}
    third = {1: nid(3 * e), -1: nid(-3 * e)} if width == 4 else None
    cols = np.zeros((len(nodes), width), dtype=np.int64)
    coef = np.zeros((len(nodes), width))
    done = np.zeros(len(nodes), bool)

    def one_sided4(sign):
        s = np.asarray(sign)
        a = [np.where(s == 1, d[1], d[-1]) for d in (near, far, third)]
        ok = (a[0] >= 0) & (a[1] >= 0) & (a[2] >= 0)
        return ok, (nodes, *a), (-11.0 / 6 * s / h, 3.0 * s / h, -1.5 * s / h, s / (3.0 * h))

    def one_sided(sign):
        s = np.asarray(sign)
        a1 = np.where(s == 1, near[1], near[-1])
        a2 = np.where(s == 1, far[1], far[-1])
        ok = (a1 >= 0) & (a2 >= 0)
        return ok, (nodes, a1, a2), (-1.5 * s / h, 2.0 * s / h, -0.5 * s / h)

    def centred():
        ok = (near[1] >= 0) & (near[-1] >= 0)
        return ok, (nodes, near[1], near[-1]), (0.0, 0.5 / h, -0.5 / h)

    def two_point(sign):
        s = np.asarray(sign)
        a1 = np.where(s == 1, near[1], near[-1])
        return a1 >= 0, (nodes, a1, nodes), (-1.0 * s / h, 1.0 * s / h, 0.0)

    attempts = [one_sided(prefer), centred()]
    if centered_first:
        attempts.reverse()
    attempts += [one_sided(-prefer), two_point(prefer), two_point(-prefer)]
    if width == 4:
        attempts.insert(0, one_sided4(prefer))
    for ok, c, w in attempts:
        sel = ok & ~done
        for t in range(len(c)):
            cols[sel, t] = c[t][sel]
            coef[sel, t] = np.broadcast_to(w[t], (len(nodes),))[sel]
        done |= sel
    if not np.all(done):
        raise EllipticError("a boundary node has no usable difference stencil")
    return cols, coef


def _as_values(v, pts, default=0.0) -> np.ndarray:
    if v is None:
        return np.full(len(pts), float(default))
    if isinstance(v, ScalarField):
        return np.asarray(v.value(pts), float) if len(pts) else np.zeros(0)
    if callable(v):
        return np.asarray(v(pts), float) if len(pts) else np.zeros(0)
    arr = np.asarray(v, float)
    return np.broadcast_to(arr, (len(pts),)).astype(float) if arr.ndim == 0 else arr


def _assemble_matrix(grid: DiscreteHalfAnnulus, g: MetricField | None, h, hbar):
    """Sparse system for ``-Laplace_g u + h u = f``, ``du/deta + hbar u = fbar`` on Sigma,
    ``d_r u = inner_data`` on the inner cut and
    ``d_r (u - u_inf) + (n-2)(u - u_inf)/r = outer_data`` on the outer cut.

    Boundary rows are multiplied by ``1/h`` so all rows carry ``1/h^2`` scaling.
    Returns ``(A, row_scale, aux)``; ``aux`` holds the Sigma-row weight of ``fbar``.
    """
    n = grid.n
    hh = grid.h
    pts = grid.points
    cls_ = grid.node_class
    T = _Triplets()
    scale = np.ones(grid.size)
    aux = {}

    # interior rows
    nodes = np.nonzero(cls_ == INTERIOR)[0]
    P = pts[nodes]
    ginv, bvec, _ = _metric_coefficients(g, P)
    hv = _as_values(h, P)
    diag = hv.copy()
    for i in range(n):
        e = _unit(i)
        up = grid.neighbour(e)[nodes]
        dn = grid.neighbour(-e)[nodes]
        a = ginv[:, i, i] / hh ** 2
        diag += 2.0 * a
        T.add(nodes, up, -a - bvec[:, i] / (2 * hh))
        T.add(nodes, dn, -a + bvec[:, i] / (2 * hh))
        for j in range(i + 1, n):
            c = 2.0 * ginv[:, i, j] / (4 * hh ** 2)
            if not np.any(c):
                continue
            ej = _unit(j)
            for si, sj, sgn in ((1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)):
                nb = grid.neighbour(si * e + sj * ej)[nodes]
                T.add(nodes, nb, -sgn * c)
    T.add(nodes, nodes, diag)

    # Sigma rows: the interior equation with the ghost value below Sigma
    # eliminated through eta^i d_i u + hbar u = fbar, i.e.
    # d_n u = N = (sqrt(g^nn) (hbar u - fbar) - g^{n a} d_a u) / g^nn.
    nodes = np.nonzero(cls_ == SIGMA)[0]
    P = pts[nodes]
    gi, bv, _ = _metric_coefficients(g, P)
    m = n - 1
    gnn = gi[:, m, m]
    hb = _as_values(hbar, P)
    hv = _as_values(h, P)
    c_n = 2.0 * gnn / hh - bv[:, m]  # weight of N in the row
    up1 = grid.neighbour(_unit(m))[nodes]
    up2 = grid.neighbour(2 * _unit(m))[nodes]
    if np.any(up1 < 0):
        raise EllipticError("a Sigma node has no neighbour above it")
    diag = hv + 2.0 * gnn / hh ** 2 + c_n * hb / np.sqrt(gnn)
    T.add(nodes, up1, -2.0 * gnn / hh ** 2)
    for a_ in range(m):
        e = _unit(a_)
        lvl = [grid.neighbour(e + j * _unit(m))[nodes] for j in (0, 1, 2)]
        lvm = [grid.neighbour(-e + j * _unit(m))[nodes] for j in (0, 1, 2)]
        aa = gi[:, a_, a_] / hh ** 2
        diag += 2.0 * aa
        # first-order tangential coefficient: b^a plus the g^{na} part of N
        ca = -bv[:, a_] - c_n * gi[:, m, a_] / gnn
        T.add(nodes, lvl[0], -aa + ca * (-0.5 / hh))
        T.add(nodes, lvm[0], -aa + ca * (0.5 / hh))
        # mixed d_a d_n: one-sided in n, centred in a
        cm = -2.0 * gi[:, a_, m] / (2.0 * hh * hh)
        if np.any(cm):
            have2 = (lvl[2] >= 0) & (lvm[2] >= 0)
            w = np.where(have2[:, None], np.array([-1.5, 2.0, -0.5]), np.array([-1.0, 1.0, 0.0]))
            for j in range(3):
                ok = (w[:, j] != 0) & (lvl[j] >= 0) & (lvm[j] >= 0)
                T.add(nodes[ok], lvl[j][ok], cm[ok] * w[ok, j])
                T.add(nodes[ok], lvm[j][ok], -cm[ok] * w[ok, j])
        for b_ in range(a_ + 1, m):
            c = 2.0 * gi[:, a_, b_] / (4 * hh ** 2)
            if not np.any(c):
                continue
            eb = _unit(b_)
            for si, sj, sgn in ((1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)):
                T.add(nodes, grid.neighbour(si * e + sj * eb)[nodes], -sgn * c)
    T.add(nodes, nodes, diag)
    aux["sigma_fbar"] = np.zeros(grid.size)
    aux["sigma_fbar"][nodes] = c_n / np.sqrt(gnn)

    # cut rows
    for which in (INNER_CUT, OUTER_CUT):
        nodes = np.nonzero(cls_ == which)[0]
        if not len(nodes):
            continue
        P = pts[nodes]
        r = np.sqrt((P ** 2).sum(axis=1))
        nu = P / r[:, None]
        sgn = np.where(P >= 0, 1, -1)
        # inner cut: into the domain is away from the origin; outer cut: towards it
        prefer_all = sgn if which == INNER_CUT else -sgn
        prefer_all[:, n - 1] = 1 if which == INNER_CUT else -1
        for k in range(n):
            active = nu[:, k] != 0.0
            if not np.any(active):
                continue
            sub = nodes[active]
            cols, coef = _gradient_stencil(grid, sub, k, prefer_all[active, k], width=4)
            # rows use the outward derivative of the annulus: -d_r inside, +d_r outside
            out_sign = -1.0 if which == INNER_CUT else 1.0
            for t in range(cols.shape[1]):
                T.add(sub, cols[:, t], out_sign * nu[active, k] * coef[:, t] / hh)
        if which == OUTER_CUT:
            T.add(nodes, nodes, (n - 2) / r / hh)
        scale[nodes] = 1.0 / hh
    return T.matrix(grid.size), scale, aux


def assemble_rhs(grid: DiscreteHalfAnnulus, aux: dict, f=None, fbar=None, u_infinity: float = 0.0,
                 inner_data=None, outer_data=None) -> np.ndarray:
    """Right-hand side matching :func:`_assemble_matrix` row by row."""
    n, hh, pts, cls_ = grid.n, grid.h, grid.points, grid.node_class
    rhs = np.zeros(grid.size)
    sel = cls_ == INTERIOR
    rhs[sel] = _as_values(f, pts[sel])
    sel = cls_ == SIGMA
    rhs[sel] = _as_values(f, pts[sel]) + aux["sigma_fbar"][sel] * _as_values(fbar, pts[sel])
    sel = cls_ == INNER_CUT
    rhs[sel] = -_as_values(inner_data, pts[sel]) / hh
    sel = cls_ == OUTER_CUT
    r = np.sqrt((pts[sel] ** 2).sum(axis=1))
    rhs[sel] = (_as_values(outer_data, pts[sel]) + (n - 2) * u_infinity / r) / hh
    return rhs


class DiscreteOperator:
    """The assembled operator ``T`` on a grid, reusable across right-hand sides.

    Small systems are solved by sparse LU; larger ones by GMRES with a
    smoothed-aggregation AMG preconditioner, built once and cached.
    """

    direct_limit = 20_000

    def __init__(self, grid: DiscreteHalfAnnulus, g: MetricField | None = None, h=None, hbar=None,
                 check_signs: bool = True):
        for name, v, P in (("h", h, grid.points), ("hbar", hbar, grid.points[grid.node_class == SIGMA])):
            if check_signs and v is not None and np.any(_as_values(v, P) < 0.0):
                raise EllipticError(f"coefficient {name} must be non-negative")
        self.grid = grid
        self.metric = g
        self.matrix, self.scale, self._aux = _assemble_matrix(grid, g, h, hbar)
        d = self.matrix.diagonal()
        if np.any(d <= 0.0):
            worst = int(np.argmin(d))
            raise EllipticError(f"indefinite discrete operator: diagonal {d[worst]:.3g} at node {worst} "
                                f"({CLASS_NAMES[int(grid.node_class[worst])]})")
        self._lu = None
        self._amg = None

    def _raw_solve(self, b: np.ndarray, tol: float):
        A = self.matrix
        if A.shape[0] <= self.direct_limit:
            if self._lu is None:
                self._lu = spla.splu(A.tocsc())
            return self._lu.solve(b), 0
        if self._amg is None:
            import pyamg

            self._amg = pyamg.smoothed_aggregation_solver(A, symmetry="nonsymmetric", max_coarse=2000)
        M = self._amg.aspreconditioner(cycle="V")
        count = [0]

        def cb(_):
            count[0] += 1

        x, _ = spla.gmres(A, b, M=M, rtol=tol, atol=0.0, restart=60, maxiter=40,
                          callback=cb, callback_type="legacy")
        return x, count[0]

    def solve_rhs(self, b: np.ndarray, tol: float = 1e-10):
        nb = float(np.linalg.norm(b))
        if nb == 0.0:
            return np.zeros_like(b), 0.0, 0
        x, iters = self._raw_solve(b, 0.1 * tol)
        res = float(np.linalg.norm(self.matrix @ x - b)) / nb
        for _ in range(3):  # iterative refinement if the contract is missed
            if res <= tol:
                break
            dx, k = self._raw_solve(b - self.matrix @ x, 0.1)
            x, iters = x + dx, iters + k
            res = float(np.linalg.norm(self.matrix @ x - b)) / nb
        if not np.isfinite(res) or res > tol:
            raise EllipticError(f"linear solve did not reach relative residual {tol:g} (got {res:.3g})")
        return x, res, iters

    def solve(self, f=None, fbar=None, u_infinity: float = 0.0, inner_data=None, outer_data=None,
              tol: float = 1e-10) -> "DiscreteSolution":
        b = assemble_rhs(self.grid, self._aux, f, fbar, u_infinity, inner_data, outer_data)
        x, res, iters = self.solve_rhs(b, tol)
        rows = (self.matrix @ x - b) / self.scale
        return DiscreteSolution(grid=self.grid, u=x, u_infinity=float(u_infinity), residual=res,
                                residual_rows=rows, matrix=self.matrix, rhs=b, iterations=iters)


def solve_bvp(grid: DiscreteHalfAnnulus, g: MetricField | None = None, h=None, hbar=None, f=None, fbar=None,
              u_infinity: float = 0.0, inner_data=None, outer_data=None, tol: float = 1e-10) -> DiscreteSolution:
    """Second-order finite-difference solve of ``-Laplace_g u + h u = f``,
    ``du/deta + hbar u = fbar`` on Sigma, with ``u -> u_infinity``.

    ``h`` and ``hbar`` must be non-negative.  The cut closures are
    ``-d_r u = -inner_data`` on the inner sphere and
    ``d_r u + (n-2)(u - u_infinity)/r = outer_data`` on the outer one; both
    data default to zero.
    """
    return DiscreteOperator(grid, g, h, hbar).solve(f, fbar, u_infinity, inner_data, outer_data, tol)


# ---------------------------------------------------------------- image kernel and oracle


def _reflect(y: np.ndarray) -> np.ndarray:
    yt = np.array(y, dtype=float, copy=True)
    yt[..., -1] *= -1.0
    return yt


def image_kernel(x, y, n: int = 3) -> np.ndarray:
    """``phi(x, y) = |x - y|^(2-n) + |x - y~|^(2-n)`` with ``y~`` the reflection of ``y``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    d1 = np.sqrt(np.sum((x - y) ** 2, axis=-1))
    d2 = np.sqrt(np.sum((x - _reflect(y)) ** 2, axis=-1))
    if np.any(d1 == 0.0) or np.any(d2 == 0.0):
        raise EllipticError("image kernel evaluated at coincident points")
    return d1 ** (2 - n) + d2 ** (2 - n)


def image_kernel_gradient(x, y, n: int = 3, wrt: str = "x") -> np.ndarray:
    """Gradient of the image kernel in ``x`` (default) or in ``y``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    yt = _reflect(y)
    d1 = x - y
    d2 = x - yt
    r1 = np.sqrt(np.sum(d1 ** 2, axis=-1))[..., None]
    r2 = np.sqrt(np.sum(d2 ** 2, axis=-1))[..., None]
    if np.any(r1 == 0.0) or np.any(r2 == 0.0):
        raise EllipticError("image kernel evaluated at coincident points")
    gx1 = (2 - n) * d1 * r1 ** (-n)
    gx2 = (2 - n) * d2 * r2 ** (-n)
    if wrt == "x":
        return gx1 + gx2
    return -gx1 - _reflect(gx2)


@dataclass(frozen=True)
class CompactSource:
    """``amplitude * (1 - |x - c|^2 / radius^2)^power`` on a ball (volume) or on a
    disc of Sigma (boundary, ``center[-1] = 0``)."""

    center: np.ndarray
    radius: float
    amplitude: float
    power: int = 4
    boundary: bool = False

    def __post_init__(self):
        c = np.asarray(self.center, float)
        object.__setattr__(self, "center", c)
        if self.boundary and c[-1] != 0.0:
            raise EllipticError("boundary sources must be centred on Sigma")
        if not self.boundary and c[-1] < self.radius:
            raise EllipticError("volume source support must lie in the half-space")
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise EllipticError("support is not compact")

    @property
    def n(self) -> int:
        return len(self.center)

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        d = x - self.center
        if self.boundary:
            d = d[..., :-1]
        w = 1.0 - np.sum(d * d, axis=-1) / self.radius ** 2
        out = self.amplitude * np.where(w > 0, w, 0.0) ** self.power
        if self.boundary:
            out = np.where(x[..., -1] == 0.0, out, 0.0)
        return out

    def total(self) -> float:
        """Integral of the source over its support."""
        n = self.n
        k = n - 1 if self.boundary else n
        # int_0^rho (1 - t^2/rho^2)^q t^(k-1) dt = rho^k B(k/2, q+1) / 2
        beta = math.gamma(k / 2) * math.gamma(self.power + 1) / math.gamma(k / 2 + self.power + 1)
        return self.amplitude * sphere_area(k - 1) * self.radius ** k * beta / 2.0

    def quadrature(self, order: int):
        n = self.n
        q = order + 2
        s, ws = np.polynomial.legendre.leggauss(q)
        s = 0.5 * self.radius * (s + 1.0)
        k = n - 1 if self.boundary else n
        ws = 0.5 * self.radius * ws * s ** (k - 1)
        dirs, dw = unit_sphere_rule(k, order)
        if self.boundary:
            dirs = np.concatenate([dirs, np.zeros((len(dw), 1))], axis=1)
        pts = self.center + s[:, None, None] * dirs[None]
        w = (ws[:, None] * dw[None]).reshape(-1)
        pts = pts.reshape(-1, n)
        return pts, w * self.value(pts)


def _support_of(src):
    if isinstance(src, CompactSource):
        return src
    raise EllipticError("oracle sources must declare a compact support (use CompactSource)")


class OracleField(ScalarField):
    """Representation-formula solution.

    Boundary discs are always integrated by quadrature.  Volume sources use the
    closed-form integral of their radial profile when ``exact`` is set and by
    quadrature otherwise.
    """

    def __init__(self, sources, n: int, u_infinity: float, order: int, exact: bool = True):
        self.n = n
        self.sources = tuple(sources)
        self.u_infinity = float(u_infinity)
        self.order = order
        self.exact = exact
        self._closed = [s for s in self.sources if exact and not s.boundary]
        self._quad_sources = [s for s in self.sources if not (exact and not s.boundary)]
        self._rules = [s.quadrature(order) for s in self._quad_sources]
        self._norm = (n - 2) * sphere_area(n - 1)

    def value(self, y) -> np.ndarray:
        y = np.asarray(y, float)
        flat = y.reshape(-1, self.n)
        out = np.full(len(flat), self.u_infinity)
        for src in self._closed:
            out += _radial_parts(src, flat)[0]
        for src, (pts, w) in zip(self._quad_sources, self._rules):
            near = _near_disc(src, flat)
            if np.any(near):
                out[near] += _disc_near_field(src, flat[near], _NEAR_ORDER) / self._norm
            far = np.nonzero(~near)[0]
            step = max(1, 2_000_000 // len(w))
            for s in range(0, len(far), step):
                blk = flat[far[s:s + step]]
                out[far[s:s + step]] += image_kernel(pts[None, :, :], blk[:, None, :], self.n) @ w / self._norm
        return out.reshape(y.shape[:-1])

    def gradient(self, y) -> np.ndarray:
        y = np.asarray(y, float)
        flat = y.reshape(-1, self.n)
        out = np.zeros_like(flat)
        for src in self._closed:
            out += _radial_parts(src, flat)[1]
        for src, (pts, w) in zip(self._quad_sources, self._rules):
            near = _near_disc(src, flat)
            if np.any(near):
                out[near] += _disc_near_gradient(src, flat[near]) / self._norm
            far = np.nonzero(~near)[0]
            step = max(1, 1_000_000 // len(w))
            for s in range(0, len(far), step):
                blk = flat[far[s:s + step]]
                gk = image_kernel_gradient(pts[None, :, :], blk[:, None, :], self.n, wrt="y")
                out[far[s:s + step]] += np.einsum("qkj,k->qj", gk, w) / self._norm
        return out.reshape(y.shape)

    def jet(self, x) -> Jet2:
        x = np.asarray(x, float)
        shape = x.shape[:-1]
        return Jet2(self.value(x), self.gradient(x), np.full(shape + (self.n, self.n), np.nan))


_NEAR_ORDER = 16


def _near_disc(src: CompactSource, y: np.ndarray) -> np.ndarray:
    """Points where the product rule on a boundary disc loses accuracy."""
    if not src.boundary:
        return np.zeros(len(y), bool)
    d = np.sqrt(np.sum((y[:, :-1] - src.center[:-1]) ** 2, axis=1))
    return (y[:, -1] < 0.2 * src.radius) & (d < 1.2 * src.radius)


def _disc_near_gradient(src: CompactSource, y: np.ndarray, step: float = 1e-5) -> np.ndarray:
    # differences of the near-field value; on Sigma the normal part is the Neumann datum
    n = y.shape[1]
    out = np.zeros_like(y)
    for k in range(n - 1):
        e = np.zeros(n)
        e[k] = step
        out[:, k] = (_disc_near_field(src, y + e, _NEAR_ORDER)
                     - _disc_near_field(src, y - e, _NEAR_ORDER)) / (2 * step)
    e = np.zeros(n)
    e[-1] = step
    f0 = _disc_near_field(src, y, _NEAR_ORDER)
    f1 = _disc_near_field(src, y + e, _NEAR_ORDER)
    f2 = _disc_near_field(src, y + 2 * e, _NEAR_ORDER)
    fwd = (-3 * f0 + 4 * f1 - f2) / (2 * step)
    on = y[:, -1] == 0.0
    # -d_n u = fbar on Sigma, and u carries the 1/((n-2) omega) normalisation outside
    out[:, -1] = np.where(on, -src.value(y) * (n - 2) * sphere_area(n - 1), fwd)
    return out


def _disc_near_field(src: CompactSource, y: np.ndarray, order: int) -> np.ndarray:
    """``int phi(x, y) fbar(x) dsigma`` in polar coordinates about the projection of ``y``.

    The area element cancels ``1/|x - y|`` so points on or near the disc are
    handled accurately.  Projections outside the disc integrate over the
    tangent cone with a sine substitution that smooths the chord endpoints.
    """
    if not len(y):
        return np.zeros(0)
    q = order + 8
    t, wt = np.polynomial.legendre.leggauss(q)
    yp = y[:, :-1] - src.center[:-1]
    d = np.sqrt(np.sum(yp * yp, axis=1))
    yn = y[:, -1]
    inside = d <= src.radius
    m = 2 * q
    # angles [points, m] and weights
    th_in = np.broadcast_to(2.0 * np.pi * (np.arange(m) + 0.5) / m, (len(y), m))
    w_in = np.full((len(y), m), 2.0 * np.pi / m)
    phi, wphi = np.polynomial.legendre.leggauss(m)
    phi = 0.5 * np.pi * phi
    wphi = 0.5 * np.pi * wphi
    alpha = np.arcsin(np.clip(src.radius / np.where(d > 0, d, 1.0), 0.0, 1.0))
    th0 = np.arctan2(-yp[:, 1], -yp[:, 0])
    th_out = th0[:, None] + alpha[:, None] * np.sin(phi)[None, :]
    w_out = alpha[:, None] * np.cos(phi)[None, :] * wphi[None, :]
    th = np.where(inside[:, None], th_in, th_out)
    wth = np.where(inside[:, None], w_in, w_out)
    out = np.zeros(len(y))
    for j in range(m):
        e = np.stack([np.cos(th[:, j]), np.sin(th[:, j])], axis=1)
        b = np.sum(yp * e, axis=1)
        disc = b * b - (d * d - src.radius ** 2)
        ok = disc > 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        r1 = np.maximum(0.0, -b - sq)
        r2 = np.maximum(r1, -b + sq)
        rho = r1[:, None] + 0.5 * (r2 - r1)[:, None] * (t[None, :] + 1.0)
        w = 0.5 * (r2 - r1)[:, None] * wt[None, :]
        xp = yp[:, None, :] + rho[..., None] * e[:, None, :]
        ww = 1.0 - np.sum(xp * xp, axis=-1) / src.radius ** 2
        fb = src.amplitude * np.where(ww > 0, ww, 0.0) ** src.power
        dist = np.sqrt(rho * rho + yn[:, None] ** 2)
        ker = np.where(dist > 0, 2.0 * rho / np.where(dist > 0, dist, 1.0), 2.0)
        out += np.where(ok, np.sum(w * fb * ker, axis=1), 0.0) * wth[:, j]
    return out


def harmonic_oracle(f, fbar, n: int = 3, u_infinity: float = 0.0, order: int = 24,
                    exact: bool = True) -> OracleField:
    """Solution of ``-Laplace u = f``, ``du/deta = fbar`` on the half-space, ``u -> u_infinity``,
    from the image-kernel representation formula.

    ``f`` and ``fbar`` are :class:`CompactSource` objects, lists of them, or
    ``None``.  Accuracy degrades for evaluation points close to a support.
    """
    if n != 3:
        raise EllipticError("the oracle is implemented for n = 3")
    sources = []
    for group, boundary in ((f, False), (fbar, True)):
        if group is None:
            continue
        for s in (group if isinstance(group, (list, tuple)) else [group]):
            s = _support_of(s)
            if s.boundary != boundary:
                raise EllipticError("volume and boundary sources are swapped")
            sources.append(s)
    return OracleField(sources, n, u_infinity, order, exact)


def _radial_parts(src: CompactSource, y: np.ndarray):
    rho, q, A = src.radius, src.power, src.amplitude
    # psi(t) = (1 - t^2/rho^2)^q; Newtonian potential of a radial density, scaled by 1/(4 pi)
    base = np.polynomial.Polynomial([1.0, 0.0, -1.0 / rho ** 2]) ** q
    p2 = (base * np.polynomial.Polynomial([0, 0, 1])).integ()
    p1 = (base * np.polynomial.Polynomial([0, 1])).integ()
    val = np.zeros(len(y))
    grad = np.zeros_like(y)
    for c in (src.center, _reflect(src.center)):
        d = y - c
        s = np.sqrt(np.sum(d * d, axis=-1))
        inner = np.minimum(s, rho)
        safe = np.where(s > 0, s, 1.0)
        val += np.where(s > 0, p2(inner) / safe, 0.0) + p1(rho) - p1(inner)
        grad += (-p2(inner) / safe ** 3)[:, None] * d
    return A * val, A * grad


def radial_potential(src: CompactSource, y) -> np.ndarray:
    """Closed-form half-space solution for a single volume source (n = 3)."""
    if src.boundary or src.n != 3:
        raise EllipticError("closed form available for n = 3 volume sources only")
    y = np.asarray(y, float)
    return _radial_parts(src, y.reshape(-1, 3))[0].reshape(y.shape[:-1])


# ---------------------------------------------------------------- weighted norms and asymptotics


@dataclass(frozen=True)
class WeightedNormReport:
    gamma: float
    k: int
    estimated_norm: float
    fitted_decay: float  # |u| ~ r^(-fitted_decay) on dyadic spheres
    terms: tuple  # sup r^(-gamma+i) |grad^i u| for i = 0..k
    radii: tuple
    infinite: bool


def _dyadic(r_min: float, r_max: float) -> np.ndarray:
    count = max(2, int(math.floor(math.log2(r_max / r_min))) + 1)
    return r_min * 2.0 ** np.arange(count)


def _field_shell_jets(u: ScalarField, n: int, radii, order: int = 8):
    out = []
    for r in radii:
        pts = hemisphere_rule(n, r, order).nodes
        out.append((r, u.jet(pts)))
    return out


def _discrete_shell_derivs(sol: DiscreteSolution, radii, offset: float):
    """Sample ``u - offset`` and centred differences on nodes near each sphere."""
    grid = sol.grid
    v = sol.u - offset
    h = grid.h
    r = grid.radii
    inner = grid.node_class == INTERIOR
    nb = {}
    for k in range(3):
        e = _unit(k)
        nb[k] = (grid.neighbour(e), grid.neighbour(-e))
    out = []
    for R in radii:
        sel = np.nonzero(inner & (np.abs(r - R) <= 0.5 * h))[0]
        if not len(sel):
            continue
        grad = np.stack([(v[nb[k][0][sel]] - v[nb[k][1][sel]]) / (2 * h) for k in range(3)], axis=1)
        hess_diag = np.stack([(v[nb[k][0][sel]] - 2 * v[sel] + v[nb[k][1][sel]]) / h ** 2 for k in range(3)],
                             axis=1)
        out.append((R, v[sel], np.linalg.norm(grad, axis=1), np.linalg.norm(hess_diag, axis=1)))
    return out


def weighted_norm(u, gamma: float, k: int = 0, r_min: float | None = None, r_max: float | None = None,
                  n: int = 3, order: int = 8, offset: float | None = None,
                  slack: float = 0.25) -> WeightedNormReport:
    """Sampled ``C^k_gamma`` norm, ``sum_i sup r^(-gamma+i) |grad^i u|`` for ``i <= k``.

    ``u`` is a field (jets give exact derivatives) or a :class:`DiscreteSolution`
    (centred differences; ``offset`` defaults to ``u_infinity``; the Hessian
    is estimated from its diagonal).  Samples lie on dyadic spheres between
    ``r_min`` and ``r_max``.  When the weighted sups keep growing outward
    faster than ``slack`` allows, the norm is flagged infinite.
    """
    if not 0 <= k <= 2:
        raise EllipticError("k must be 0, 1 or 2")
    if isinstance(u, DiscreteSolution):
        g = u.grid
        r_min = g.r_in + 2 * g.h if r_min is None else r_min
        r_max = g.r_out - 2 * g.h if r_max is None else r_max
        radii = _dyadic(r_min, r_max)
        off = u.u_infinity if offset is None else offset
        rows = [(R, np.abs(a), b, c) for R, a, b, c in _discrete_shell_derivs(u, radii, off)]
    else:
        u = u if isinstance(u, ScalarField) else constant(float(u), n)
        n = getattr(u, "n", n)
        r_min = 1.0 if r_min is None else r_min
        r_max = 1024.0 * r_min if r_max is None else r_max
        radii = _dyadic(r_min, r_max)
        rows = []
        for R, j in _field_shell_jets(u, n, radii, order):
            v = j.value - (0.0 if offset is None else offset)
            rows.append((R, np.abs(v), np.linalg.norm(j.gradient, axis=-1),
                         np.linalg.norm(j.hessian, axis=(-2, -1))))
    if not rows:
        raise EllipticError("no samples in the requested radial range")
    R = np.array([row[0] for row in rows])
    per_shell = np.array([[np.max(row[1 + i]) * row[0] ** (-gamma + i) for i in range(k + 1)] for row in rows])
    sups = np.array([np.max(row[1]) for row in rows])
    decay = fit_decay(R, sups)
    terms = per_shell.max(axis=0)
    # growth of the weighted sups along the dyadic shells signals divergence
    infinite = False
    for i in range(k + 1):
        col = per_shell[:, i]
        if np.all(col > 0) and len(col) >= 2:
            slope = np.polyfit(np.log(R), np.log(col), 1)[0]
            if slope > slack:
                infinite = True
    norm = float("inf") if infinite else float(terms.sum())
    return WeightedNormReport(gamma=float(gamma), k=int(k), estimated_norm=norm, fitted_decay=float(decay),
                              terms=tuple(float(t) for t in terms), radii=tuple(float(r) for r in R),
                              infinite=infinite)


def lq_norm(u: ScalarField, q: float, beta: float, r_min: float, r_max: float, n: int = 3,
            order: int = 8, radial_points: int = 32) -> float:
    """``(int |r^(-beta) u|^q r^(-n) dx)^(1/q)`` over the flat half-annulus ``r_min <= r <= r_max``."""
    if q < 1:
        raise EllipticError("q must be at least 1")
    n = getattr(u, "n", n)
    s, ws = np.polynomial.legendre.leggauss(radial_points)
    a, b = math.log(r_min), math.log(r_max)
    lr = 0.5 * (b - a) * (s + 1) + a
    wl = 0.5 * (b - a) * ws
    total = 0.0
    for t, w in zip(lr, wl):
        r = math.exp(t)
        rule = hemisphere_rule(n, r, order)
        vals = np.abs(r ** (-beta) * u.value(rule.nodes)) ** q * r ** (-n)
        total += w * r * float(np.sum(rule.weights * vals))  # dr = r dt
    return total ** (1.0 / q)


def mass_coefficient(n: int) -> float:
    """``c(n) = 1 / (2 (n-1) omega_{n-1})``: the ``C`` of ``u = 1 + C r^(2-n)`` per unit mass."""
    return 1.0 / (2.0 * (n - 1) * sphere_area(n - 1))


@dataclass(frozen=True)
class AsymptoticFit:
    C: float
    correction: float  # coefficient of the next term r^(1-n) in (u - u_inf)
    residual: float  # relative rms misfit
    flagged: bool
    radii: tuple

    def __float__(self) -> float:
        return self.C


def asymptotic_coefficient(u, u_infinity: float | None = None, r_min: float | None = None,
                           r_max: float | None = None, n: int = 3, tolerance: float = 0.05) -> AsymptoticFit:
    """Least-squares ``C`` in ``u = u_inf + C r^(2-n) + D r^(1-n)`` on dyadic shells.

    The fit is flagged when the relative misfit exceeds ``tolerance``.
    """
    if isinstance(u, DiscreteSolution):
        g = u.grid
        n = g.n
        uinf = u.u_infinity if u_infinity is None else u_infinity
        r_min = max(g.r_in + 2 * g.h, g.r_out / 8) if r_min is None else r_min
        r_max = g.r_out - 2 * g.h if r_max is None else r_max
        r = g.radii
        sel = (g.node_class == INTERIOR) & (r >= r_min) & (r <= r_max)
        R, V = r[sel], u.u[sel] - uinf
    else:
        n = getattr(u, "n", n)
        uinf = 0.0 if u_infinity is None else u_infinity
        r_min = 8.0 if r_min is None else r_min
        r_max = 64.0 * r_min if r_max is None else r_max
        R, V = [], []
        for rr in _dyadic(r_min, r_max):
            pts = hemisphere_rule(n, rr, 6).nodes
            R.append(np.full(len(pts), rr))
            V.append(u.value(pts) - uinf)
        R, V = np.concatenate(R), np.concatenate(V)
    if len(R) < 3:
        raise EllipticError("not enough samples for the asymptotic fit")
    y = V * R ** (n - 2)
    X = np.stack([np.ones_like(R), 1.0 / R], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    scale = max(float(np.max(np.abs(y))), 1e-300)
    rel = float(np.sqrt(np.mean(res ** 2))) / scale if np.any(y) else 0.0
    shells = np.unique(np.round(R, 12))
    return AsymptoticFit(C=float(coef[0]), correction=float(coef[1]), residual=rel, flagged=rel > tolerance,
                         radii=(float(shells.min()), float(shells.max())))


# ---------------------------------------------------------------- cutoff and flattening


def _psi(s):
    s = np.asarray(s, float)
    pos = s > 0
    safe = np.where(pos, s, 1.0)
    v = np.where(pos, np.exp(-1.0 / safe), 0.0)
    d1 = np.where(pos, v / safe ** 2, 0.0)
    d2 = np.where(pos, v * (1.0 / safe ** 4 - 2.0 / safe ** 3), 0.0)
    return v, d1, d2


def cutoff(t, derivatives: bool = False):
    """Smooth ``chi`` with ``chi = 1`` for ``t <= 1`` and ``chi = 0`` for ``t >= 2``.

    Built from ``exp(-1/s)``; with ``derivatives`` returns ``(chi, chi', chi'')``.
    """
    t = np.asarray(t, float)
    A, A1, A2 = _psi(2.0 - t)
    B, B1, B2 = _psi(t - 1.0)
    A1, A2 = -A1, A2
    S, S1, S2 = A + B, A1 + B1, A2 + B2
    chi = A / S
    if not derivatives:
        return chi
    d1 = (A1 * S - A * S1) / S ** 2
    d2 = (A2 * S - A * S2) / S ** 2 - 2.0 * S1 * (A1 * S - A * S1) / S ** 3
    return chi, d1, d2


def cutoff_field(R: float, n: int = 3) -> FunctionField:
    """``chi(|x| / R)`` as a field with exact jets."""

    def jet(x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        c0, c1, c2 = cutoff(r / R, derivatives=True)
        xh = x / r[..., None]
        outer = xh[..., :, None] * xh[..., None, :]
        f1, f2 = c1 / R, c2 / R ** 2
        hess = f2[..., None, None] * outer + (f1 / r)[..., None, None] * (np.eye(x.shape[-1]) - outer)
        return Jet2(c0, f1[..., None] * xh, hess)

    return FunctionField(n, jet, label=f"chi(r/{R:g})")


class FlatteningRejected(EllipticError):
    """The computed conformal factor is not positive."""


@dataclass(frozen=True, eq=False)
class FlatteningResult:
    g_bar: MetricField
    u_R: "ConformalFactor"
    R_cut: float
    mass_delta: float
    min_u: float
    mass_g: float
    mass_g_bar: float
    C: AsymptoticFit
    scalar_residual: float  # sup |R_gbar| at nodes with r >= 2 R_cut
    mean_residual: float  # sup |H_gbar| at Sigma nodes with r >= 2 R_cut
    residual_scale: float
    hypotheses_ok: bool
    warnings: tuple = ()
    epsilon: float | None = None

    @property
    def within_epsilon(self) -> bool | None:
        return None if self.epsilon is None else self.mass_delta <= self.epsilon


class ConformalFactor(ScalarField):
    """``u_R``: the grid solution, a tensor cubic spline inside ``2 R_cut`` and
    the fitted harmonic tail ``1 + C r^(2-n)`` beyond it."""

    def __init__(self, solution: DiscreteSolution, C: float, R_cut: float, offset: float = 1.0):
        from scipy.interpolate import NdBSpline, make_interp_spline
        from scipy.ndimage import distance_transform_edt

        self.n = solution.grid.n
        self.solution = solution
        self.C = float(C)
        self.R_cut = float(R_cut)
        g = solution.grid
        box = np.full(g.ids.shape, np.nan)
        box[g.ijk[:, 0], g.ijk[:, 1], g.ijk[:, 2]] = solution.u + offset
        missing = np.isnan(box)
        idx = distance_transform_edt(missing, return_distances=False, return_indices=True)
        box = box[tuple(idx)]  # nearest-node fill outside the annulus
        axes = [g.h * (np.arange(s) - (g.N if k < 2 else 0)) for k, s in enumerate(box.shape)]
        c = box
        knots = []
        for k in range(3):
            spl = make_interp_spline(axes[k], c, k=3, axis=k)
            c = np.moveaxis(spl.c, 0, k)
            knots.append(spl.t)
        self._spline = NdBSpline(tuple(knots), c, 3)
        self.discrete = solution.u + offset

    def jet(self, x) -> Jet2:
        x = np.asarray(x, float)
        flat = x.reshape(-1, self.n)
        r = np.sqrt(np.sum(flat * flat, axis=1))
        val = np.empty(len(flat))
        grad = np.empty((len(flat), self.n))
        hess = np.empty((len(flat), self.n, self.n))
        far = r >= 2.0 * self.R_cut
        n = self.n
        if np.any(far):
            rf = r[far]
            f0 = 1.0 + self.C * rf ** (2 - n)
            f1 = (2 - n) * self.C * rf ** (1 - n)
            f2 = (2 - n) * (1 - n) * self.C * rf ** (-n)
            j = _radial_jet(flat[far], f0, f1, f2)
            val[far], grad[far], hess[far] = j.value, j.gradient, j.hessian
        near = ~far
        if np.any(near):
            P = flat[near]
            val[near] = self._spline(P)
            for a in range(n):
                nu = [0] * n
                nu[a] = 1
                grad[near, a] = self._spline(P, nu=tuple(nu))
                for b in range(a, n):
                    nu = [0] * n
                    nu[a] += 1
                    nu[b] += 1
                    hess[near, a, b] = hess[near, b, a] = self._spline(P, nu=tuple(nu))
        return Jet2(val.reshape(x.shape[:-1]), grad.reshape(x.shape), hess.reshape(x.shape + (n,)))


def _cutoff_metric(g: MetricField, R: float) -> MetricField:
    n = g.n
    chi = cutoff_field(R, n)
    one = constant(1.0, n)
    zero = constant(0.0, n)
    coeffs = []
    for (i, j), f in zip([(a, b) for a in range(n) for b in range(a, n)], g.coeffs):
        delta = one if i == j else zero
        coeffs.append(chi * f + (one - chi) * delta)
    return MetricField(n=n, tau=float("inf"), r0=g.r0, coeffs=tuple(coeffs),
                       is_conformally_flat=False, boundary_orthogonal=g.boundary_orthogonal,
                       exact_mass=0.0, label=f"cutoff({g.label}, R={R:g})",
                       family={"family": "cutoff", "base": dict(g.family), "R": float(R), "flat_beyond": 2.0 * R})


def _transition_sources(g: MetricField, gR: MetricField, pts: np.ndarray, R: float, chunk: int = 20000):
    """``gamma = R_{g_R} - chi R_g`` at ``pts`` (zero off the cutoff shell)."""
    from .geometry import curvature_from_jet

    out = np.zeros(len(pts))
    r = np.sqrt(np.sum(pts * pts, axis=1))
    sel = np.nonzero((r > R) & (r < 2.0 * R))[0]
    for s in range(0, len(sel), chunk):
        idx = sel[s:s + chunk]
        P = pts[idx]
        chi = cutoff(r[idx] / R)
        out[idx] = curvature_from_jet(gR.components(P)).scalar - chi * curvature_from_jet(g.components(P)).scalar
    return out


def _transition_boundary(g: MetricField, gR: MetricField, pts: np.ndarray, R: float) -> np.ndarray:
    from .geometry import boundary_from_jet

    out = np.zeros(len(pts))
    r = np.sqrt(np.sum(pts * pts, axis=1))
    sel = np.nonzero((r > R) & (r < 2.0 * R))[0]
    if len(sel):
        P = pts[sel]
        chi = cutoff(r[sel] / R)
        out[sel] = boundary_from_jet(gR.components(P)).H - chi * boundary_from_jet(g.components(P)).H
    return out


def _hypothesis_check(g: MetricField, R: float) -> list[str]:
    from .geometry import boundary_from_jet, curvature_from_jet
    from .metric import sample_points

    out = []
    pts = sample_points(g.n, g.r0)
    pts = pts[np.sqrt(np.sum(pts * pts, axis=1)) <= 2.0 * R + 1e-9] if len(pts) else pts
    if len(pts) and np.min(curvature_from_jet(g.components(pts)).scalar) < -1e-10:
        out.append("scalar curvature of the input is negative at some sample")
    bp = sample_points(g.n, g.r0, boundary=True)
    if len(bp) and np.min(boundary_from_jet(g.components(bp)).H) < -1e-10:
        out.append("boundary mean curvature of the input is negative at some sample")
    return out


def conformal_flatten(g: MetricField, R_cut: float, epsilon: float | None = None, h: float | None = None,
                      r_in: float | None = None, r_out: float | None = None, mass_g: float | None = None,
                      tol: float = 1e-10) -> FlatteningResult:
    """Replace ``g`` by ``g_bar = u_R^(4/(n-2)) g_R`` with ``g_R = chi_R g + (1 - chi_R) delta``.

    ``u_R = 1 + v`` solves ``a_n (-Laplace_{g_R} v) + gamma v = -gamma`` and
    ``b_n dv/deta + gammabar v = -gammabar`` on the truncated half-annulus
    ``[r_in, r_out]`` (defaults ``R_cut/2`` and ``4 R_cut``, spacing ``R_cut/8``).
    The closures are homogeneous Neumann inside and the ``C r^(2-n)`` Robin
    condition outside.
    """
    from .geometry import conformal_constants
    from .mass import mass as mass_of

    n = g.n
    if n != 3:
        raise EllipticError("flattening runs on n = 3 grids")
    if R_cut < 4.0 * g.r0:
        raise EllipticError("R_cut must be at least 4 r0")
    if not g.tau > (n - 2) / 2.0:
        raise EllipticError("decay rate must exceed (n-2)/2")
    warn = _hypothesis_check(g, R_cut)
    h = R_cut / 8.0 if h is None else float(h)
    r_in = R_cut / 2.0 if r_in is None else float(r_in)
    r_out = max(4.0 * R_cut, 4.0 * r_in) if r_out is None else float(r_out)
    a_n, b_n = conformal_constants(n)
    gR = _cutoff_metric(g, R_cut)
    grid = DiscreteHalfAnnulus.build(r_in, r_out, h, n)
    pts = grid.points
    gamma = _transition_sources(g, gR, pts, R_cut)
    sig = grid.node_class == SIGMA
    gbar = np.zeros(grid.size)
    gbar[sig] = _transition_boundary(g, gR, pts[sig], R_cut)
    op = DiscreteOperator(grid, gR, h=grid.nodal(gamma / a_n), hbar=grid.nodal(gbar / b_n), check_signs=False)
    sol = op.solve(f=grid.nodal(-gamma / a_n), fbar=grid.nodal(-gbar / b_n), u_infinity=0.0, tol=tol)
    u = 1.0 + sol.u
    min_u = float(np.min(u))
    if not min_u > 0:
        raise FlatteningRejected(f"conformal factor is not positive (min {min_u:.3g})")
    fit = asymptotic_coefficient(sol, r_min=max(2.0 * R_cut, r_out / 8))
    m_bar = fit.C / mass_coefficient(n)
    if mass_g is None:
        mass_g = g.exact_mass if g.exact_mass is not None else mass_of(g).extrapolated
    # residuals beyond 2 R_cut, where g_R is flat and gamma vanishes
    r = grid.radii
    rows = np.abs(sol.residual_rows)
    far = r >= 2.0 * R_cut
    inter = far & (grid.node_class == INTERIOR)
    scal = float(np.max(a_n * rows[inter] * u[inter] ** (-(n + 2) / (n - 2)))) if np.any(inter) else 0.0
    sfar = far & sig
    # a Sigma row carries the boundary condition with weight 2 g^nn / h
    mean = float(np.max(b_n * rows[sfar] * h / 2.0 * u[sfar] ** (-n / (n - 2)))) if np.any(sfar) else 0.0
    scale = a_n * tol * float(np.linalg.norm(sol.rhs))
    factor = ConformalFactor(sol, fit.C, R_cut)
    from .metric import conformal as conformal_metric

    g_bar = conformal_metric(gR, factor)
    g_bar = MetricField(n=n, tau=float(n - 2), r0=g.r0, coeffs=g_bar.coeffs, is_conformally_flat=False,
                        boundary_orthogonal=g.boundary_orthogonal, exact_mass=None,
                        label=f"flattened({g.label}, R={R_cut:g})",
                        family={"family": "flattened", "base": dict(g.family), "R_cut": float(R_cut)})
    return FlatteningResult(g_bar=g_bar, u_R=factor, R_cut=float(R_cut), mass_delta=abs(m_bar - mass_g),
                            min_u=min_u, mass_g=float(mass_g), mass_g_bar=float(m_bar), C=fit,
                            scalar_residual=scal, mean_residual=mean, residual_scale=scale,
                            hypotheses_ok=not warn, warnings=tuple(warn), epsilon=epsilon)
