"""Direct solvers for the KL-constrained worst-case reweighting problem.

Given per-sample losses ``L`` and a KL budget ``c``, the inner problem is::

    maximize    sum_i L_i w_i
    subject to  sum_i w_i log w_i + log N <= c,   w on the probability simplex

Its closed-form solution is ``softmax(L / T)`` for the temperature ``T`` whose
weights exhaust the budget. The solvers here attack the problem without that
formula so the closed form can be checked against them:

* :func:`solve_inner_max_grid` enumerates a simplex grid (N <= 4).
* :func:`solve_inner_max_ascent` runs projected gradient ascent with an exact
  Euclidean projection onto the simplex intersected with the KL ball.
* :func:`temperature_for_budget` maps ``c`` to ``T`` by bisection on ``log T``.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.optimize import brentq
from scipy.special import wrightomega

from .core import as_loss_vector, empirical_kl, is_weights
from .exceptions import ConvergenceError, DegenerateInputError, DomainError, UnsupportedSizeError

__all__ = [
    "T_MIN",
    "T_MAX",
    "OracleSolution",
    "BudgetTemperature",
    "check_budget",
    "solve_inner_max_grid",
    "solve_inner_max_ascent",
    "temperature_for_budget",
    "project_simplex",
    "project_simplex_kl_ball",
]

T_MIN = 1e-6
T_MAX = 1e6
BISECTION_ITERS = 200
MAX_GRID_SIZE = 4

INTERIOR = "interior"
UNIFORM = "uniform"
POINT_MASS = "point-mass"


@dataclass(frozen=True)
class OracleSolution:
    weights: np.ndarray
    objective: float
    kl: float
    method: str
    budget: float
    clamped: bool = False

    @property
    def regime(self):
        n = self.weights.size
        if self.clamped or (n > 1 and self.budget >= math.log(n)):
            return POINT_MASS
        if self.budget == 0.0:
            return UNIFORM
        return INTERIOR


@dataclass(frozen=True)
class BudgetTemperature:
    """Temperature attaining a KL budget.

    ``regime`` is ``"interior"`` when ``temp`` lies inside ``[T_MIN, T_MAX]``.
    Outside the bracket no finite answer is returned: ``"uniform"`` carries
    ``temp = inf`` and ``"point-mass"`` carries ``temp = 0.0``.
    """

    temp: float
    regime: str
    kl: float


def check_budget(budget, n):
    """Validate a KL budget for an ``n``-sample problem.

    Returns ``(c, clamped)``; budgets above ``log n`` are reduced to ``log n``
    and flagged.
    """
    c = float(budget)
    if not math.isfinite(c) or c < 0.0:
        raise DomainError(f"KL budget must be a nonnegative real, got {budget!r}")
    cap = math.log(n)
    if c >= cap and n > 1:
        return cap, c > cap
    return c, False


def _solution(L, w, method, c, clamped):
    return OracleSolution(
        weights=w,
        objective=float(np.dot(L, w)),
        kl=empirical_kl(w),
        method=method,
        budget=c,
        clamped=clamped,
    )


@njit(cache=True)
def _grid_argmax(L, res, budget, xlogx, init):
    n = L.shape[0]
    lim = budget + 1e-12 - math.log(n)
    best = init
    arg = np.full(n, -1, dtype=np.int64)
    if n == 1:
        arg[0] = res
        return arg, L[0]
    for a in range(res + 1):
        if n == 2:
            b = res - a
            if xlogx[a] + xlogx[b] <= lim:
                obj = (a * L[0] + b * L[1]) / res
                if obj > best:
                    best = obj
                    arg[0] = a
                    arg[1] = b
            continue
        for b in range(res - a + 1):
            if n == 3:
                c = res - a - b
                if xlogx[a] + xlogx[b] + xlogx[c] <= lim:
                    obj = (a * L[0] + b * L[1] + c * L[2]) / res
                    if obj > best:
                        best = obj
                        arg[0] = a
                        arg[1] = b
                        arg[2] = c
                continue
            ab = xlogx[a] + xlogx[b]
            for c in range(res - a - b + 1):
                d = res - a - b - c
                if ab + xlogx[c] + xlogx[d] <= lim:
                    obj = (a * L[0] + b * L[1] + c * L[2] + d * L[3]) / res
                    if obj > best:
                        best = obj
                        arg[0] = a
                        arg[1] = b
                        arg[2] = c
                        arg[3] = d
    return arg, best


def solve_inner_max_grid(losses, budget, resolution=400):
    """Exhaustive search over simplex points with spacing ``1/resolution``.

    The exact uniform vector is always a candidate (it is feasible for every
    budget but rarely lies on the grid); a grid point replaces it only with a
    strictly larger objective. Among equal grid objectives the first in
    lexicographic order of the weight vector wins.
    """
    L = as_loss_vector(losses)
    n = L.size
    if n > MAX_GRID_SIZE:
        raise UnsupportedSizeError(f"grid oracle supports N <= {MAX_GRID_SIZE}, got {n}")
    resolution = int(resolution)
    if resolution < 100:
        raise DomainError(f"resolution must be >= 100, got {resolution}")
    c, clamped = check_budget(budget, n)
    uniform = np.full(n, 1.0 / n)
    if c == 0.0:
        return _solution(L, uniform, "grid", c, clamped)
    k = np.arange(resolution + 1, dtype=np.float64) / resolution
    xlogx = np.zeros(resolution + 1)
    xlogx[1:] = k[1:] * np.log(k[1:])
    arg, _ = _grid_argmax(L, resolution, c, xlogx, float(np.mean(L)))
    if arg[0] < 0:
        w = uniform
    else:
        w = arg.astype(np.float64) / resolution
    return _solution(L, w, "grid", c, clamped)


def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u * k > css - 1.0)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _kkt_point(y, lam, mu):
    # v + lam * log v = y - mu - lam, solved with the Wright omega function
    return lam * np.real(wrightomega((y - mu - lam) / lam - math.log(lam)))


def _kkt_mu(y, lam):
    n = y.size
    base = y - lam - 1.0 / n + lam * math.log(n)
    lo, hi = float(base.min()), float(base.max())
    if hi - lo <= 0.0:
        return lo
    return brentq(lambda mu: _kkt_point(y, lam, mu).sum() - 1.0, lo, hi, xtol=1e-15, rtol=1e-15)


def project_simplex_kl_ball(y, budget):
    """Euclidean projection onto ``{w in simplex : KL(w || uniform) <= budget}``.

    When the plain simplex projection violates the budget, the KKT conditions
    give ``w_i + lam log w_i = y_i - mu - lam``; ``mu`` enforces the sum and
    ``lam`` the KL budget, each found by a bracketed 1-D root search.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    c = float(budget)
    if c <= 0.0:
        return np.full(n, 1.0 / n)
    s = project_simplex(y)
    if empirical_kl(s) <= c:
        return s

    def excess(log_lam):
        lam = math.exp(log_lam)
        v = _kkt_point(y, lam, _kkt_mu(y, lam))
        return empirical_kl(v / v.sum()) - c

    log_lam = brentq(excess, math.log(1e-12), math.log(1e12), xtol=1e-14)
    lam = math.exp(log_lam)
    v = _kkt_point(y, lam, _kkt_mu(y, lam))
    return v / v.sum()


def solve_inner_max_ascent(losses, budget, step=1.0, iters=100):
    """Projected gradient ascent from the uniform vector.

    Raises :class:`ConvergenceError` (carrying the last iterate) if the exit
    point violates the budget by more than ``1e-6``.
    """
    L = as_loss_vector(losses)
    n = L.size
    step = float(step)
    iters = int(iters)
    if not step > 0.0:
        raise DomainError(f"step must be positive, got {step!r}")
    if iters < 1:
        raise DomainError(f"iters must be >= 1, got {iters}")
    c, clamped = check_budget(budget, n)
    w = np.full(n, 1.0 / n)
    for _ in range(iters):
        w = project_simplex_kl_ball(w + step * L, c)
    kl = empirical_kl(w)
    if kl > c + 1e-6 or abs(w.sum() - 1.0) > 1e-9:
        raise ConvergenceError(f"ascent exited infeasible: kl={kl!r}, budget={c!r}", iterate=w)
    return _solution(L, w, "projected-ascent", c, clamped)


def temperature_for_budget(losses, budget):
    """Temperature whose importance weights have empirical KL equal to ``budget``.

    Bisects on ``log T`` over ``[T_MIN, T_MAX]``, relying on the KL of
    ``softmax(L / T)`` being non-increasing in ``T``.
    """
    L = as_loss_vector(losses)
    n = L.size
    if np.ptp(L) == 0.0:
        raise DegenerateInputError("constant losses: every temperature gives uniform weights")
    c, clamped = check_budget(budget, n)
    kl_hot = empirical_kl(is_weights(L, T_MAX))
    if c <= kl_hot:
        return BudgetTemperature(math.inf, UNIFORM, kl_hot)
    kl_cold = empirical_kl(is_weights(L, T_MIN))
    if clamped or c >= kl_cold:
        return BudgetTemperature(0.0, POINT_MASS, kl_cold)
    lo, hi = math.log(T_MIN), math.log(T_MAX)
    for _ in range(BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if empirical_kl(is_weights(L, math.exp(mid))) > c:
            lo = mid
        else:
            hi = mid
    # pick whichever end of the final bracket sits closer to the budget
    best = min((lo, hi), key=lambda x: abs(empirical_kl(is_weights(L, math.exp(x))) - c))
    t = math.exp(best)
    return BudgetTemperature(t, INTERIOR, empirical_kl(is_weights(L, t)))
