"""Shared independent oracles: truncated Taylor series for the matrix
exponential, central finite differences, and exhaustive grid search.
These deliberately avoid the library's own computational paths."""

import numpy as np


def taylor_expm(a, terms=60):
    """Power-series exponential; accurate to machine precision for
    moderate norms."""
    d = a.shape[0]
    acc = np.eye(d)
    term = np.eye(d)
    for k in range(1, terms + 1):
        term = term @ a / k
        acc = acc + term
    return acc


def central_diff_grad(f, x, h=1e-6):
    """Entrywise central-difference gradient of a scalar function over a
    flat array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        bump = np.zeros_like(xf)
        bump[i] = h
        flat[i] = (f((xf + bump).reshape(x.shape))
                   - f((xf - bump).reshape(x.shape))) / (2 * h)
    return grad


def rel_err(approx, exact):
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(np.linalg.norm(exact.reshape(-1)),
                np.linalg.norm(approx.reshape(-1)), 1e-12)
    return np.linalg.norm((approx - exact).reshape(-1)) / denom


def grid_search_1d(f, lo, hi, num=2001):
    """Best value of a 1-D function on a uniform grid."""
    grid = np.linspace(lo, hi, num)
    values = np.array([f(np.array([t])) for t in grid])
    best = int(np.argmin(values))
    return grid[best], values[best]


def grid_search_2d(f, lo, hi, num=41):
    """Best value of a 2-D function on a uniform grid over [lo, hi]^2."""
    axis = np.linspace(lo, hi, num)
    best_val = np.inf
    best_point = None
    for a in axis:
        for b in axis:
            val = f(np.array([a, b]))
            if val < best_val:
                best_val = val
                best_point = np.array([a, b])
    return best_point, best_val
