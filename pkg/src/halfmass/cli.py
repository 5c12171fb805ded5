"""Command-line front end.

Metric files are line oriented::

    # comment
    n = 3
    tau = 1
    r0 = 0.5
    radii = 20 40 80 160          (optional)
    flags = boundary_orthogonal   (optional, checked against the metric)
    [half_schwarzschild]
    m = 1

Global keys come first.  Exactly one family block follows, opened by one of
``[flat]``, ``[half_schwarzschild]``, ``[conformal]``, ``[perturbation]`` or
``[shell_perturbed]``.  Family keys:

* ``half_schwarzschild``: ``m``
* ``conformal``: ``u`` (an expression in ``x1..xn``, ``r``, ``pi``, ``n``)
* ``perturbation``: ``gij`` entries of ``g - delta`` with 1-based ``i, j``
* ``shell_perturbed``: ``m``, ``dm``, optional ``r1``, ``r2``

Run ``halfmass --help`` for the commands.
"""

from __future__ import annotations

import os

_threads = os.environ.get("HALFMASS_THREADS")
if _threads:  # must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import json
import math
import re
import sys
import time
import warnings
from dataclasses import dataclass, field

import click
import numpy as np

from . import __version__
from .expr import ExprSyntaxError, parse_scalar_field
from .metric import (
    DecayWarning,
    MetricError,
    MetricField,
    conformal,
    double,
    flat_half_space,
    half_schwarzschild,
    perturbation,
    pullback_rigid,
    sample_points,
    shell_perturbed_schwarzschild,
)

SCHEMA = "halfmass/1"
FAMILIES = ("flat", "half_schwarzschild", "conformal", "perturbation", "shell_perturbed")
KNOWN_FLAGS = ("boundary_orthogonal", "conformally_flat")

EXIT_OK, EXIT_ERROR, EXIT_NONCONVERGED, EXIT_POSITIVITY, EXIT_VERIFY = 0, 1, 2, 3, 4


class MetricFileError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass
class MetricFile:
    n: int
    tau: float
    r0: float
    family: str
    params: dict
    flags: tuple = ()
    radii: tuple | None = None
    source: str = ""

    def echo(self) -> dict:
        out = {"n": self.n, "tau": self.tau, "r0": self.r0, "family": self.family, "params": dict(self.params)}
        if self.flags:
            out["flags"] = list(self.flags)
        if self.radii:
            out["radii"] = list(self.radii)
        return out


_KEY = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")


def _number(text: str, line: int, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise MetricFileError(f"{what} must be a number, got {text!r}", line) from None


def parse_metric_file(text: str) -> MetricFile:
    """Parse the metric file format described in the module docstring."""
    header: dict = {}
    family = None
    params: dict = {}
    lines: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise MetricFileError("unterminated family header", lineno)
            name = line[1:-1].strip()
            if name not in FAMILIES:
                raise MetricFileError(f"unknown family {name!r}; expected one of {', '.join(FAMILIES)}", lineno)
            if family is not None:
                raise MetricFileError("exactly one family block is allowed", lineno)
            family = name
            continue
        m = _KEY.match(line)
        if not m:
            raise MetricFileError(f"expected 'key = value', got {line!r}", lineno)
        key, value = m.group(1), m.group(2).strip()
        target = header if family is None else params
        if key in target:
            raise MetricFileError(f"duplicate key {key!r}", lineno)
        target[key] = value
        lines[(family is None, key)] = lineno
    if family is None:
        raise MetricFileError("missing family block")
    for key in header:
        if key not in ("n", "tau", "r0", "radii", "flags"):
            raise MetricFileError(f"unknown key {key!r}", lines[(True, key)])
    if "n" not in header:
        raise MetricFileError("missing dimension 'n'")
    n_val = _number(header["n"], lines[(True, "n")], "n")
    if not n_val.is_integer() or not 3 <= n_val <= 7:
        raise MetricFileError("n must be an integer between 3 and 7", lines[(True, "n")])
    n = int(n_val)
    tau = _number(header["tau"], lines[(True, "tau")], "tau") if "tau" in header else None
    r0 = _number(header["r0"], lines[(True, "r0")], "r0") if "r0" in header else None
    flags: tuple = ()
    if "flags" in header:
        flags = tuple(f for f in re.split(r"[\s,]+", header["flags"]) if f)
        for f in flags:
            if f not in KNOWN_FLAGS:
                raise MetricFileError(f"unknown flag {f!r}", lines[(True, "flags")])
    radii = None
    if "radii" in header:
        radii = tuple(_number(v, lines[(True, "radii")], "radii")
                      for v in re.split(r"[\s,]+", header["radii"]) if v)

    def expr_ok(key, value):
        try:
            parse_scalar_field(value, n)
        except ExprSyntaxError as exc:
            raise MetricFileError(f"{key}: {exc}", lines[(False, key)]) from None

    allowed = {"flat": set(), "half_schwarzschild": {"m"}, "conformal": {"u"},
               "shell_perturbed": {"m", "dm", "r1", "r2"}}
    if family == "perturbation":
        entries = {}
        for key, value in params.items():
            mm = re.fullmatch(r"g([1-9])([1-9])", key)
            if not mm:
                raise MetricFileError(f"perturbation keys are gij, got {key!r}", lines[(False, key)])
            i, j = int(mm.group(1)), int(mm.group(2))
            if not (i <= n and j <= n):
                raise MetricFileError(f"{key} is out of range for n={n}", lines[(False, key)])
            expr_ok(key, value)
            entries[(i, j)] = value
        for (i, j), value in entries.items():
            other = entries.get((j, i))
            if other is not None and i != j:
                a = parse_scalar_field(value, n)
                b = parse_scalar_field(other, n)
                if a != b:
                    raise MetricFileError(f"g{i}{j} and g{j}{i} differ; the metric must be symmetric",
                                          lines[(False, f"g{j}{i}")])
    else:
        for key in params:
            if key not in allowed[family]:
                raise MetricFileError(f"unknown key {key!r} for family {family}", lines[(False, key)])
        if family == "conformal":
            if "u" not in params:
                raise MetricFileError("conformal family needs 'u'")
            expr_ok("u", params["u"])
        for key in ("m", "dm", "r1", "r2"):
            if key in params:
                params[key] = _number(params[key], lines[(False, key)], key)
        if family == "half_schwarzschild" and "m" not in params:
            raise MetricFileError("half_schwarzschild needs 'm'")
        if family == "shell_perturbed" and not {"m", "dm"} <= set(params):
            raise MetricFileError("shell_perturbed needs 'm' and 'dm'")
    if tau is None:
        if family in ("half_schwarzschild", "shell_perturbed"):
            tau = float(n - 2)
        elif family == "flat":
            tau = math.inf
        else:
            raise MetricFileError("missing decay rate 'tau'")
    if r0 is None:
        if family in ("half_schwarzschild", "shell_perturbed"):
            r0 = (params["m"] / 2.0) ** (1.0 / (n - 2))
        else:
            r0 = 1.0
    if not r0 > 0:
        raise MetricFileError("r0 must be positive")
    return MetricFile(n=n, tau=float(tau), r0=float(r0), family=family, params=params, flags=flags,
                      radii=radii, source=text)


def build_metric(mf: MetricFile) -> tuple[MetricField, list[str]]:
    """The metric described by a parsed file, plus warnings."""
    notes: list[str] = []
    n = mf.n
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DecayWarning)
        if mf.family == "flat":
            g = flat_half_space(n, mf.r0)
        elif mf.family == "half_schwarzschild":
            g = half_schwarzschild(n, mf.params["m"])
        elif mf.family == "shell_perturbed":
            p = mf.params
            g = shell_perturbed_schwarzschild(n, p["m"], p["dm"], p.get("r1", 2.0), p.get("r2", 4.0))
        elif mf.family == "conformal":
            g = conformal(flat_half_space(n, mf.r0), mf.params["u"])
        else:
            a = {}
            for key, value in mf.params.items():
                i, j = int(key[1]), int(key[2])
                if (j, i) not in a:
                    a[(i, j)] = value
            g = perturbation(a, mf.tau, n=n, r0=mf.r0)
    notes.extend(str(w.message) for w in caught)
    from dataclasses import replace

    if mf.family in ("conformal", "perturbation", "flat"):
        g = replace(g, tau=mf.tau, r0=mf.r0)
    elif abs(mf.tau - g.tau) > 1e-12:
        notes.append(f"declared tau={mf.tau:g} differs from the family value {g.tau:g}; using the declared value")
        g = replace(g, tau=mf.tau)
    for flag in mf.flags:
        actual = g.boundary_orthogonal if flag == "boundary_orthogonal" else g.is_conformally_flat
        if not actual:
            notes.append(f"flag {flag} is declared but not detected on the metric")
    return g, notes


# ---------------------------------------------------------------- reports


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


@dataclass
class Report:
    command: str
    inputs: dict
    results: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # name -> (columns, rows)
    warnings: list = field(default_factory=list)
    wall_time: float = 0.0

    def as_json(self, timing: bool = False) -> str:
        doc = {"schema": SCHEMA, "command": self.command, "inputs": self.inputs, "results": self.results,
               "tables": {k: {"columns": list(c), "rows": r} for k, (c, r) in self.tables.items()},
               "warnings": list(self.warnings)}
        if timing:
            doc["wall_time"] = self.wall_time
        return json.dumps(_clean(doc), indent=2, sort_keys=True)

    def as_csv(self, table: str) -> str:
        cols, rows = self.tables[table]
        out = [",".join(cols)]
        for row in rows:
            out.append(",".join(_fmt(v) for v in row))
        for key in sorted(self.results):
            val = self.results[key]
            if not isinstance(val, (dict, list, tuple, np.ndarray)):
                out.append(f"# {key}={_fmt(val)}")
        for w in self.warnings:
            out.append(f"# warning: {w}")
        return "\n".join(out)

    def as_text(self, timing: bool = True) -> str:
        out = [f"halfmass {self.command}"]
        for key in sorted(self.results):
            val = self.results[key]
            if isinstance(val, (dict, list, tuple, np.ndarray)):
                val = json.dumps(_clean(val), sort_keys=True)
            else:
                val = _fmt(val)
            out.append(f"  {key}: {val}")
        for name, (cols, rows) in self.tables.items():
            out.append(f"  [{name}]")
            out.append("    " + "  ".join(f"{c:>18}" for c in cols))
            for row in rows:
                out.append("    " + "  ".join(f"{_fmt(v):>18}" for v in row))
        for w in self.warnings:
            out.append(f"  warning: {w}")
        if timing:
            out.append(f"  wall_time: {self.wall_time:.3f} s")
        return "\n".join(out)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _emit(report: Report, fmt: str, table: str | None, timing: bool = False) -> None:
    if fmt == "json":
        click.echo(report.as_json(timing))
    elif fmt == "csv":
        if table is None:
            raise click.UsageError("this command has no CSV table; use --format json or text")
        click.echo(report.as_csv(table))
    else:
        click.echo(report.as_text())


def _load(path: str) -> tuple[MetricFile, MetricField, list[str]]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise click.ClickException(f"cannot read {path}: {exc}") from None
    try:
        mf = parse_metric_file(text)
        g, notes = build_metric(mf)
    except (MetricFileError, MetricError, ExprSyntaxError) as exc:
        raise click.ClickException(str(exc)) from None
    return mf, g, notes


def _floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(v) for v in re.split(r"[\s,]+", text.strip()) if v]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from None


FORMAT = click.option("--format", "fmt", type=click.Choice(["csv", "json", "text"]), default="text",
                      show_default=True, help="Output format.")
TIMING = click.option("--timing/--no-timing", default=False,
                      help="Include wall time in JSON output (breaks byte-identical reports).")


@click.group()
@click.version_option(__version__, prog_name="halfmass")
def main():
    """Mass of asymptotically flat manifolds with a non-compact boundary."""


# ---------------------------------------------------------------- mass


def _mass_report(path, radii, order, terms):
    from .mass import MassError, RegimeError, mass

    t0 = time.perf_counter()
    mf, g, notes = _load(path)
    radii = radii or (list(mf.radii) if mf.radii else None)
    if not g.tau > (g.n - 2) / 2.0:
        raise click.ClickException(
            f"mass requires decay tau > (n-2)/2 = {(g.n - 2) / 2:g}; the file declares tau = {g.tau:g}")
    try:
        est = mass(g, schedule=radii, order=order, terms=terms)
    except (MassError, RegimeError) as exc:
        raise click.ClickException(str(exc)) from None
    rows = [[s.r, s.hemisphere_term, s.equator_term, s.total] for s in est.terms]
    rep = Report("mass", {"file": mf.echo(), "order": order, "terms": terms}, warnings=notes + list(est.notes))
    rep.tables["samples"] = (("r", "hemisphere_term", "equator_term", "total"), rows)
    rep.results.update(extrapolated=est.extrapolated, fitted_exponent=est.fitted_exponent,
                       error_bound=est.error_bound, nonconvergent=est.nonconvergent,
                       exponent_consistent=est.exponent_consistent, exact_mass=g.exact_mass)
    rep.wall_time = time.perf_counter() - t0
    return rep, est


def _plot_samples(rep: Report, path: str) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise click.ClickException("--plot needs matplotlib (pip install 'halfmass[plot]')") from None
    cols, rows = rep.tables["samples"]
    r = np.array([row[0] for row in rows])
    m = np.array([row[3] for row in rows])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogx(r, m, "o-", label="m(r)")
    ax.axhline(rep.results["extrapolated"], ls="--", color="k", label="extrapolated")
    ax.set_xlabel("r")
    ax.set_ylabel("mass")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


@main.command("mass")
@click.argument("file", type=click.Path(dir_okay=False))
@click.option("--radii", help="Comma-separated dyadic radii (at least four).")
@click.option("--order", default=12, show_default=True, help="Quadrature order.")
@click.option("--terms", type=click.IntRange(1, 2), default=1, show_default=True,
              help="Power-law terms in the extrapolation fit.")
@click.option("--plot", "plot_path", type=click.Path(dir_okay=False),
              help="Also write a figure of (r, m(r)) to this file (needs matplotlib).")
@FORMAT
@TIMING
def cmd_mass(file, radii, order, terms, plot_path, fmt, timing):
    """Extrapolated mass.  Exit 0 on convergence, 2 when flagged nonconvergent."""
    rep, est = _mass_report(file, _floats(radii), order, terms)
    _emit(rep, fmt, "samples", timing)
    if plot_path:
        _plot_samples(rep, plot_path)
    sys.exit(EXIT_NONCONVERGED if est.nonconvergent else EXIT_OK)


# ---------------------------------------------------------------- curvature


@main.command("curvature")
@click.argument("file", type=click.Path(dir_okay=False))
@click.option("--at", "at", help="Point x1,..,xn.")
@click.option("--sphere", "spheres", multiple=True, type=float, help="Radius (repeatable) for sphere sups.")
@click.option("--order", default=8, show_default=True)
@FORMAT
@TIMING
def cmd_curvature(file, at, spheres, order, fmt, timing):
    """Pointwise or sphere-sup curvature and boundary quantities."""
    from .geometry import (
        GeometryError,
        boundary_from_jet,
        curvature_from_jet,
        expansion_residuals,
        mass_density_from_jet,
    )
    from .quadrature import hemisphere_rule

    t0 = time.perf_counter()
    mf, g, notes = _load(file)
    if (at is None) == (not spheres):
        raise click.UsageError("give exactly one of --at or --sphere")
    rep = Report("curvature", {"file": mf.echo(), "at": at, "sphere": list(spheres), "order": order},
                 warnings=notes)
    if at is not None:
        x = np.array(_floats(at))
        if len(x) != g.n:
            raise click.BadParameter(f"--at needs {g.n} coordinates")
        if x[-1] < 0 or np.linalg.norm(x) < g.r0:
            raise click.ClickException(f"point is outside the region r >= r0 = {g.r0:g}, x_n >= 0")
        c = g.components(x[None])
        cur = curvature_from_jet(c)
        rep.results.update(point=x, scalar=float(cur.scalar[0]), ricci=cur.ricci[0],
                           mass_density=mass_density_from_jet(c)[0])
        if x[-1] == 0.0:
            b = boundary_from_jet(c)
            rep.results.update(H=float(b.H[0]), shape_operator=b.A[0], eta=b.eta[0])
    else:
        rows = []
        for r in spheres:
            if r < 2 * g.r0:
                raise click.ClickException(f"sphere radius must be at least 2 r0 = {2 * g.r0:g}")
            rule = hemisphere_rule(g.n, r, order)
            cur = curvature_from_jet(g.components(rule.nodes))
            b = boundary_from_jet(g.components(rule.equator_nodes))
            try:
                ex = expansion_residuals(g, r, order)
            except GeometryError as exc:
                raise click.ClickException(str(exc)) from None
            rows.append([r, float(np.max(np.abs(cur.scalar))), float(np.max(np.abs(b.H))),
                         float(np.max(np.abs(b.A))), ex["theta_sup"], ex["theta_prime_sup"]])
        rep.tables["spheres"] = (("r", "scalar_sup", "H_sup", "A_sup", "theta_sup", "theta_prime_sup"), rows)
        if len(rows) >= 2:
            r1, r2 = rows[0], rows[-1]
            ratio = math.log(r2[0] / r1[0])
            decay = {}
            for k, name in ((4, "theta"), (5, "theta_prime")):
                decay[name] = (-(math.log(r2[k]) - math.log(r1[k])) / ratio
                               if r1[k] > 0 and r2[k] > 0 else "inf")
            rep.results["residual_decay"] = decay
    rep.wall_time = time.perf_counter() - t0
    _emit(rep, fmt, "spheres" if spheres else None, timing)


# ---------------------------------------------------------------- flatten


@main.command("flatten")
@click.argument("file", type=click.Path(dir_okay=False))
@click.option("--rcut", type=float, required=True, help="Flattening radius R_cut.")
@click.option("--epsilon", type=float, default=None, help="Target bound on the mass change.")
@click.option("--h", "spacing", type=float, default=None, help="Grid spacing (default R_cut/8).")
@click.option("--output", type=click.Path(dir_okay=False), help="Write the u_R grid as CSV.")
@FORMAT
@TIMING
def cmd_flatten(file, rcut, epsilon, spacing, output, fmt, timing):
    """Conformal flattening outside R_cut.  Exit 3 if the conformal factor is not positive."""
    from .elliptic import EllipticError, FlatteningRejected, conformal_flatten

    t0 = time.perf_counter()
    mf, g, notes = _load(file)
    rep = Report("flatten", {"file": mf.echo(), "rcut": rcut, "epsilon": epsilon, "h": spacing}, warnings=notes)
    try:
        res = conformal_flatten(g, rcut, epsilon=epsilon, h=spacing)
    except FlatteningRejected as exc:
        rep.results["rejected"] = str(exc)
        _emit(rep, fmt, None, timing)
        sys.exit(EXIT_POSITIVITY)
    except EllipticError as exc:
        raise click.ClickException(str(exc)) from None
    if not res.hypotheses_ok:
        rep.warnings.extend(f"flattening hypotheses violated: {w}" for w in res.warnings)
    rep.results.update(mass_delta=res.mass_delta, mass_g=res.mass_g, mass_g_bar=res.mass_g_bar,
                       min_u=res.min_u, C=res.C.C, C_fit_residual=res.C.residual,
                       scalar_residual=res.scalar_residual, mean_residual=res.mean_residual,
                       residual_scale=res.residual_scale, hypotheses_ok=res.hypotheses_ok,
                       within_epsilon=res.within_epsilon,
                       g_bar={"description": res.g_bar.label, "family": res.g_bar.family},
                       grid_nodes=res.u_R.solution.grid.size)
    if output:
        res.u_R.solution.to_csv(output)
        rep.results["grid_file"] = output
    rep.wall_time = time.perf_counter() - t0
    _emit(rep, fmt, None, timing)


# ---------------------------------------------------------------- double


@main.command("double")
@click.argument("file", type=click.Path(dir_okay=False))
@click.option("--radii", help="Comma-separated dyadic radii.")
@click.option("--samples", default=16, show_default=True, help="Corner samples in the table.")
@click.option("--order", default=12, show_default=True)
@FORMAT
@TIMING
def cmd_double(file, radii, samples, order, fmt, timing):
    """Corner condition table and doubled ADM mass against twice the mass."""
    from .mass import MassError, adm_mass_double, mass

    t0 = time.perf_counter()
    mf, g, notes = _load(file)
    if not g.boundary_orthogonal:
        notes.append("metric is not boundary-orthogonal; the double may have a genuine corner")
    d = double(g)
    rep = Report("double", {"file": mf.echo(), "order": order, "samples": samples}, warnings=notes)
    corner = d.corner_report(samples=samples)
    rows = [[*p, hp, hm, hp + hm] for p, hp, hm in zip(corner["points"], corner["H_plus"], corner["H_minus"])]
    cols = tuple(f"x{i + 1}" for i in range(g.n)) + ("H_plus", "H_minus", "sum")
    rep.tables["corner"] = (cols, rows)
    sched = _floats(radii) or (list(mf.radii) if mf.radii else None)
    try:
        half = mass(g, schedule=sched, order=order)
        full = adm_mass_double(d, schedule=sched, order=order)
    except MassError as exc:
        raise click.ClickException(str(exc)) from None
    ratio = full.extrapolated / (2 * half.extrapolated) if half.extrapolated != 0 else float("nan")
    rep.results.update(mass=half.extrapolated, adm_mass_double=full.extrapolated, ratio=ratio,
                       max_corner_jump=corner["max_jump"])
    rep.wall_time = time.perf_counter() - t0
    _emit(rep, fmt, "corner", timing)


# ---------------------------------------------------------------- oracle


@main.command("oracle")
@click.option("--source", "sources", multiple=True,
              help="Volume source x1,x2,x3,radius,amplitude (repeatable).")
@click.option("--disc", "discs", multiple=True, help="Boundary source x1,x2,radius,amplitude (repeatable).")
@click.option("--r-in", "r_in", default=1.0, show_default=True)
@click.option("--r-out", "r_out", default=4.0, show_default=True)
@click.option("--h", "spacing", default=0.125, show_default=True)
@click.option("--output", type=click.Path(dir_okay=False), help="Write the solver grid as CSV.")
@FORMAT
@TIMING
def cmd_oracle(sources, discs, r_in, r_out, spacing, output, fmt, timing):
    """Solve a flat Neumann problem on the grid and compare with the image-kernel oracle.

    Cut data on the inner and outer spheres come from the oracle, so both
    sides solve the same problem.
    """
    from .elliptic import CompactSource, DiscreteHalfAnnulus, EllipticError, harmonic_oracle, solve_bvp

    t0 = time.perf_counter()
    try:
        vols = []
        for s in sources:
            v = _floats(s)
            if len(v) != 5:
                raise click.BadParameter("--source needs x1,x2,x3,radius,amplitude")
            vols.append(CompactSource(np.array(v[:3]), v[3], v[4]))
        bnds = []
        for s in discs:
            v = _floats(s)
            if len(v) != 4:
                raise click.BadParameter("--disc needs x1,x2,radius,amplitude")
            bnds.append(CompactSource(np.array([v[0], v[1], 0.0]), v[2], v[3], boundary=True))
        if not vols and not bnds:
            vols = [CompactSource(np.array([0.0, 0.0, 3.0]), 3.0, 1.0, power=2)]
        grid = DiscreteHalfAnnulus.build(r_in, r_out, spacing)
        o = harmonic_oracle(vols, bnds)

        def radial(x):
            return np.einsum("ij,ij->i", o.gradient(x), x) / np.linalg.norm(x, axis=1)

        sol = solve_bvp(grid, f=lambda x: sum(s.value(x) for s in vols) if vols else 0.0,
                        fbar=lambda x: sum(s.value(x) for s in bnds) if bnds else 0.0,
                        inner_data=radial, outer_data=lambda x: radial(x) + o.value(x) / np.linalg.norm(x, axis=1))
    except EllipticError as exc:
        raise click.ClickException(str(exc)) from None
    exact = o.value(grid.points)
    err = float(np.max(np.abs(sol.u - exact)) / np.max(np.abs(exact)))
    rep = Report("oracle", {"sources": [list(map(float, [*s.center, s.radius, s.amplitude])) for s in vols],
                            "discs": [list(map(float, [*s.center[:2], s.radius, s.amplitude])) for s in bnds],
                            "r_in": r_in, "r_out": r_out, "h": spacing})
    rep.results.update(relative_sup_error=err, residual=sol.residual, nodes=grid.size,
                       node_counts=grid.counts(), min_u=sol.min_u)
    if output:
        sol.to_csv(output)
        rep.results["grid_file"] = output
    rep.wall_time = time.perf_counter() - t0
    _emit(rep, fmt, None, timing)


# ---------------------------------------------------------------- verify


def builtin_families() -> list[tuple[str, MetricField]]:
    out = [("half_schwarzschild(3,1)", half_schwarzschild(3, 1.0)),
           ("half_schwarzschild(4,1)", half_schwarzschild(4, 1.0)),
           ("conformal(3, 1+0.25/r)", conformal(flat_half_space(3), "1 + 0.25*r^(-1)")),
           ("conformal(4, 1+0.25/r^2)", conformal(flat_half_space(4), "1 + 0.25*r^(-2)")),
           ("shell_perturbed(3,1,0.5)", shell_perturbed_schwarzschild(3, 1.0, 0.5))]
    return out


def _nonnegative_curvature(g: MetricField) -> bool:
    from .geometry import boundary_from_jet, curvature_from_jet

    pts = sample_points(g.n, max(g.r0, 1e-3) * 1.01, levels=5)
    bp = sample_points(g.n, max(g.r0, 1e-3) * 1.01, levels=5, boundary=True)
    return bool(np.min(curvature_from_jet(g.components(pts)).scalar) >= -1e-10
                and np.min(boundary_from_jet(g.components(bp)).H) >= -1e-10)


def verify_metric(name: str, g: MetricField, seed: int = 0, quick: bool = False) -> list[dict]:
    """Invariant checks on one metric; each entry has name, passed and details."""
    from .mass import BumpTensor, mass, variational_check

    rng = np.random.default_rng(seed)
    checks = []
    base = mass(g, terms=2)  # a translation shifts the r^-2 term; fit it
    # rigid invariance
    worst = 0.0
    for _ in range(3 if quick else 10):
        th = rng.uniform(0, 2 * np.pi)
        Q = np.eye(g.n)
        Q[:2, :2] = [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]
        if rng.random() < 0.5:
            Q[0] *= -1.0
        b = np.zeros(g.n)
        b[:-1] = rng.uniform(-1.0, 1.0, g.n - 1)
        moved = mass(pullback_rigid(g, Q, b), terms=2)
        scale = max(abs(base.extrapolated), 1e-12)
        worst = max(worst, abs(moved.extrapolated - base.extrapolated) / scale
                    if base.extrapolated != 0 else abs(moved.extrapolated))
    checks.append({"name": f"{name}: rigid-motion invariance", "passed": worst <= 1e-4,
                   "details": {"max_relative_change": worst, "tolerance": 1e-4}})
    # positivity sweep
    if _nonnegative_curvature(g):
        ok = base.extrapolated >= -base.error_bound
        checks.append({"name": f"{name}: positivity", "passed": bool(ok),
                       "details": {"mass": base.extrapolated, "error_bound": base.error_bound}})
    # variational identity
    if g.n == 3 and not quick:
        p = np.array([3.0 * max(g.r0, 1.0), 0.0, 0.0]) if g.r0 < 1 else np.array([3.0 * g.r0, 0.0, 0.0])
        K = rng.normal(size=(3, 3))
        k = BumpTensor(p, float(np.linalg.norm(p)) / 4.0, 0.5 * (K + K.T))
        a = variational_check(g, k, dt=1e-3)
        bb = variational_check(g, k, dt=5e-4)
        ratio = a.mismatch / bb.mismatch if bb.mismatch > 0 else float("inf")
        ok = (3.0 <= ratio <= 5.0 or a.mismatch <= 1e-10) and a.mismatch <= 1e-5
        checks.append({"name": f"{name}: variational identity", "passed": bool(ok),
                       "details": {"mismatch": a.mismatch, "richardson_ratio": ratio}})
    # corner condition of the double
    if g.boundary_orthogonal:
        jump = double(g).corner_report(samples=32, seed=seed)["max_jump"]
        checks.append({"name": f"{name}: corner condition", "passed": jump <= 1e-8,
                       "details": {"max_jump": jump, "tolerance": 1e-8}})
    return checks


@main.command("verify")
@click.argument("file", required=False, type=click.Path(dir_okay=False))
@click.option("--suite", type=click.Choice(["builtin"]), help="Run the invariant suite on the shipped families.")
@click.option("--seed", default=0, show_default=True)
@click.option("--quick", is_flag=True, help="Fewer samples; skips the variational identity.")
@FORMAT
@TIMING
def cmd_verify(file, suite, seed, quick, fmt, timing):
    """Invariant suites: rigid invariance, positivity, variational identity, corner condition.

    Exit 4 naming the failing invariants.
    """
    t0 = time.perf_counter()
    if (file is None) == (suite is None):
        raise click.UsageError("give a metric file or --suite builtin")
    notes: list[str] = []
    if suite:
        targets = builtin_families()
        inputs = {"suite": suite}
    else:
        mf, g, notes = _load(file)
        targets = [(mf.family, g)]
        inputs = {"file": mf.echo()}
    inputs.update(seed=seed, quick=quick)
    rep = Report("verify", inputs, warnings=notes)
    checks = []
    for name, g in targets:
        checks.extend(verify_metric(name, g, seed=seed, quick=quick))
    rep.tables["checks"] = (("invariant", "passed"), [[c["name"], c["passed"]] for c in checks])
    rep.results["checks"] = checks
    failed = [c["name"] for c in checks if not c["passed"]]
    rep.results["failed"] = failed
    rep.wall_time = time.perf_counter() - t0
    _emit(rep, fmt, "checks", timing)
    if failed:
        click.echo("failed invariants: " + "; ".join(failed), err=True)
        sys.exit(EXIT_VERIFY)


if __name__ == "__main__":  # pragma: no cover
    main()
