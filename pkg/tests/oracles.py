"""Independent brute-force oracles shared by the unit and acceptance tests.

Nothing in here calls the solvers under test; the point is to compute the
same answers by a method slow enough to be obviously correct.
"""

from itertools import combinations

import numpy as np


def brute_force_qp(q, c, a, b, feas_tol=1e-9):
    """Global minimizer of 1/2 x'Qx + c'x s.t. a x >= b by active-set enumeration.

    Tries every subset of constraints as the active set, solves the equality
    KKT system, and keeps candidates that are primal feasible with nonnegative
    multipliers on the active rows.  Only sensible for a handful of rows.
    """
    q = np.asarray(q, float)
    c = np.asarray(c, float)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = c.size
    m = b.size
    best_x, best_val = None, np.inf
    for size in range(0, min(m, d) + 1):
        for subset in combinations(range(m), size):
            rows = a[list(subset)]
            kkt = np.zeros((d + size, d + size))
            kkt[:d, :d] = q
            if size:
                kkt[:d, d:] = -rows.T
                kkt[d:, :d] = rows
            rhs = np.concatenate([-c, b[list(subset)]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:d], sol[d:]
            if size and np.min(lam) < -feas_tol:
                continue
            if m and np.min(a @ x - b) < -feas_tol:
                continue
            val = 0.5 * x @ q @ x + c @ x
            if val < best_val - 1e-12:
                best_val, best_x = val, x
    return best_x, best_val


def random_feasible_qp(rng, d_max=4, m_max=6):
    """Random strictly convex QP with a guaranteed non-empty feasible region."""
    d = int(rng.integers(1, d_max + 1))
    m = int(rng.integers(1, m_max + 1))
    half = rng.standard_normal((d, d))
    q = half @ half.T + 0.5 * np.eye(d)
    c = rng.standard_normal(d) * 2.0
    a = rng.standard_normal((m, d))
    witness = rng.standard_normal(d)
    b = a @ witness - rng.uniform(0.1, 2.0, size=m)
    return q, c, a, b


def truncated_standard_normal_mean() -> float:
    """Mean of a standard normal conditioned on being nonnegative."""
    return float(np.sqrt(2.0 / np.pi))
