"""Adaptive Simpson quadrature.

Used for flux integrals and warped-slice volumes where the flux-saturation
radius must later be located to 1e-6, so the integrator runs at an absolute
tolerance of 1e-10 by default.
"""

import numpy as np


def _simpson(f, a, fa, b, fb, m, fm):
    return (b - a) / 6.0 * (fa + 4.0 * fm + fb)


def _adaptive(f, a, fa, b, fb, m, fm, whole, tol, depth):
    lm = 0.5 * (a + m)
    rm = 0.5 * (m + b)
    flm = f(lm)
    frm = f(rm)
    left = _simpson(f, a, fa, m, fm, lm, flm)
    right = _simpson(f, m, fm, b, fb, rm, frm)
    if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
        return left + right + (left + right - whole) / 15.0
    return (_adaptive(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
            + _adaptive(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1))


def adaptive_simpson(f, a, b, tol=1e-10, max_depth=48):
    """Integrate scalar f on [a, b] to absolute tolerance tol."""
    if a == b:
        return 0.0
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = _simpson(f, a, fa, b, fb, m, fm)
    return _adaptive(f, a, fa, b, fb, m, fm, whole, tol, max_depth)


def cumulative(f, grid, tol=1e-10):
    """Antiderivative of f sampled on an increasing grid, F(grid[0]) = 0."""
    vals = np.zeros(len(grid))
    for i in range(1, len(grid)):
        vals[i] = vals[i - 1] + adaptive_simpson(f, grid[i - 1], grid[i], tol)
    return vals
