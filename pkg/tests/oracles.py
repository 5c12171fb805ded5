"""Independent oracles shared by the test modules.

Nothing here imports the jet machinery: derivatives come from finite
differences of plain numpy evaluations, integrals from scipy.
"""

import math

import numpy as np
from scipy import integrate


def random_expression(rng, n, depth=3):
    """A random expression string that is smooth on 1 <= r <= 3, x_n >= 0."""

    def positive(d):
        if d == 0:
            return rng.choice(["r", f"(1 + x{rng.integers(1, n + 1)}^2)", f"{rng.uniform(0.5, 2):.3f}"])
        k = rng.integers(0, 5)
        a = positive(d - 1)
        if k == 0:
            return f"({a} + {positive(d - 1)})"
        if k == 1:
            return f"({a} * {positive(d - 1)})"
        if k == 2:
            return f"({a}^({rng.choice([-2, -1, -0.5, 0.5, 1.5, 3])}))"
        if k == 3:
            return f"sqrt({a})"
        return f"exp(0.2*{general(d - 1)})"

    def general(d):
        if d == 0:
            return rng.choice([f"x{rng.integers(1, n + 1)}", "r", f"{rng.uniform(-2, 2):.3f}"])
        k = rng.integers(0, 5)
        if k == 0:
            return f"({general(d - 1)} - {general(d - 1)})"
        if k == 1:
            return f"({general(d - 1)} * {general(d - 1)})"
        if k == 2:
            return f"({general(d - 1)} / {positive(d - 1)})"
        if k == 3:
            return f"log({positive(d - 1)})"
        return positive(d - 1)

    return general(depth)


def random_point(rng, n, rmin=1.0, rmax=3.0):
    d = rng.normal(size=n)
    d[-1] = abs(d[-1])
    d /= np.linalg.norm(d)
    return d * rng.uniform(rmin, rmax)


def fd_mixed(f, x, i, j, step):
    """4th-order mixed partial via Richardson on the 2x2 cross stencil."""
    x = np.asarray(x, float)
    n = len(x)
    e = np.eye(n)

    def cross(h):
        return (f(x + h * e[i] + h * e[j]) - f(x + h * e[i] - h * e[j])
                - f(x - h * e[i] + h * e[j]) + f(x - h * e[i] - h * e[j])) / (4 * h * h)

    return (4 * cross(step) - cross(2 * step)) / 3


def fd_hessian(f, x, step):
    x = np.asarray(x, float)
    n = len(x)
    e = np.eye(n) * step
    f0 = f(x)
    hess = np.empty((n, n))
    for i in range(n):
        hess[i, i] = (-f(x + 2 * e[i]) + 16 * f(x + e[i]) - 30 * f0 + 16 * f(x - e[i]) - f(x - 2 * e[i])) / (
            12 * step ** 2)
        for j in range(i + 1, n):
            hess[i, j] = hess[j, i] = fd_mixed(f, x, i, j, step)
    return hess


def fd_gradient(f, x, step):
    x = np.asarray(x, float)
    e = np.eye(len(x)) * step
    return np.array([(8 * (f(x + ei) - f(x - ei)) - (f(x + 2 * ei) - f(x - 2 * ei))) / (12 * step) for ei in e])


def sphere_area(k):
    """Area of the unit k-sphere."""
    return 2 * math.pi ** ((k + 1) / 2) / math.gamma((k + 1) / 2)


def hemisphere_flux_3d(vec, r):
    """Brute-force adaptive integral of <vec, x/r> over the n=3 upper hemisphere."""

    def integrand(phi, theta):
        x = r * np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
        return float(np.dot(vec(x), x / r)) * r * r * math.sin(theta)

    val, _ = integrate.dblquad(integrand, 0.0, math.pi / 2, 0.0, 2 * math.pi, epsabs=1e-12, epsrel=1e-12)
    return val


def conformal_mass_density(u, du, n, x):
    """C_i = g_ij,j - g_jj,i for g = u^p delta, p = 4/(n-2), from the scalar u and its gradient."""
    p = 4.0 / (n - 2)
    grad = p * u(x) ** (p - 1) * du(x)
    return grad - n * grad


def scaled_error(approx, exact, value, gradient):
    scale = max(np.max(np.abs(exact)), abs(float(value)), float(np.max(np.abs(gradient))))
    return float(np.max(np.abs(approx - exact))) / (scale if scale > 0 else 1.0)


def check_against_fd(source, n, x, step=3e-3):
    """Scaled error of the jet of ``source`` at ``x`` against 4th-order finite differences."""
    from halfmass.expr import eval_jet, parse_scalar_field

    e = parse_scalar_field(source, n)
    j = eval_jet(e, x)

    def f(y):
        return float(e.value(y))

    g = fd_gradient(f, x, step * 0.2)
    h = fd_hessian(f, x, step)
    return max(scaled_error(g, j.gradient, j.value, j.gradient), scaled_error(h, j.hessian, j.value, j.gradient))
