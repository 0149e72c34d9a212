"""Global L2 budget allocation.

Maximize ``sum_i w_i * eps_i`` subject to ``sum_i eps_i**2 <= C`` and
``eps >= 0`` where ``w_i = |delta_i|``. Stationarity of the Lagrangian gives
``w_i = 2 * lam * eps_i`` so the optimum is the budget sphere point along ``w``::

    eps_i = sqrt(C) * w_i / ||w||,    lam = ||w|| / (2 sqrt(C))

``numerical_allocate_oracle`` reaches the same point by projected gradient
ascent and shares no code with the closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, NumericalError

FEASIBILITY_SLACK = 1e-9


@dataclass
class AllocationPlan:
    epsilons: np.ndarray
    lam: float
    c_total: float
    objective_value: float
    feasible: bool
    status: str = "ok"  # ok | degenerate | unsaturated
    iterations: int = 0

    @property
    def spent(self) -> float:
        return float(np.sum(self.epsilons ** 2))


def _check_inputs(abs_deltas, c_total):
    w = np.asarray(abs_deltas, dtype=np.float64).reshape(-1)
    if not (isinstance(c_total, (int, float, np.floating, np.integer)) and math.isfinite(c_total) and c_total > 0):
        raise ConfigError("c_total", f"must be finite and > 0, got {c_total!r}")
    if w.size == 0:
        raise ConfigError("abs_deltas", "empty input")
    if not np.all(np.isfinite(w)):
        raise ConfigError("abs_deltas", "non-finite entry")
    if np.any(w < 0):
        raise ConfigError("abs_deltas", "entries must be >= 0")
    return w, float(c_total)


def _plan(eps, w, lam, c_total, status="ok", iterations=0):
    return AllocationPlan(eps, float(lam), c_total, float(np.dot(w, eps)),
                          bool(np.sum(eps ** 2) <= c_total + FEASIBILITY_SLACK * max(1.0, c_total)),
                          status, iterations)


def global_allocate(abs_deltas, c_total) -> AllocationPlan:
    w, c_total = _check_inputs(abs_deltas, c_total)
    top = w.max()
    if top == 0:
        return _plan(np.zeros_like(w), w, 0.0, c_total, status="degenerate")
    unit = w / top  # rescale first so the norm cannot overflow
    norm = np.sqrt(np.dot(unit, unit))
    root_c = math.sqrt(c_total)
    eps = root_c * (unit / norm)
    lam = top * norm / (2.0 * root_c)
    return _plan(eps, w, lam, c_total)


def numerical_allocate_oracle(abs_deltas, c_total, tol: float = 1e-13, max_iter: int = 100_000) -> AllocationPlan:
    """Projected gradient ascent on the nonnegative part of the budget ball."""
    w, c_total = _check_inputs(abs_deltas, c_total)
    if tol <= 0:
        raise ConfigError("tol", "must be > 0")
    top = w.max()
    if top == 0:
        return _plan(np.zeros_like(w), w, 0.0, c_total, status="degenerate")
    # unit ball, unit-max weights; step of one "radius per gradient norm"
    w_unit = w / top
    step = 1.0 / np.linalg.norm(w_unit)
    u, iters = _kernels.project_ascent(w_unit, 1.0, step, tol, max_iter)
    if iters < 0:
        raise NumericalError(f"projected ascent did not converge in {max_iter} iterations")
    eps = math.sqrt(c_total) * u
    # multiplier from the least-squares fit of w = 2 lam eps
    lam = float(np.dot(w, eps) / (2.0 * np.dot(eps, eps)))
    return _plan(eps, w, lam, c_total, iterations=int(iters))


def allocate_with_caps(abs_deltas, c_total, cap: float, max_bisect: int = 400) -> AllocationPlan:
    """Water-filling: ``eps_i = min(cap, w_i / (2 lam))`` with the budget spent where possible."""
    w, c_total = _check_inputs(abs_deltas, c_total)
    if not (math.isfinite(cap) and cap > 0) and cap != math.inf:
        raise ConfigError("cap", f"must be > 0, got {cap!r}")
    nz = w > 0
    n_nz = int(nz.sum())
    if n_nz == 0:
        return _plan(np.zeros_like(w), w, 0.0, c_total, status="degenerate")
    if n_nz * cap * cap <= c_total:
        eps = np.where(nz, cap, 0.0)
        lam = 0.0 if n_nz * cap * cap < c_total else float(w[nz].min() / (2.0 * cap))
        return _plan(eps, w, lam, c_total, status="unsaturated" if lam == 0.0 else "ok")

    def spent(lam):
        return float(np.sum(np.minimum(cap, w / (2.0 * lam)) ** 2))

    lo = float(w[nz].min() / (2.0 * cap))  # everything capped: spent(lo) = n_nz cap^2 > C
    hi = float(np.linalg.norm(w) / (2.0 * math.sqrt(c_total)))  # uncapped optimum: spent(hi) <= C
    if spent(hi) > c_total * (1 + 1e-12):
        raise NumericalError("water-filling bracket is invalid")
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        if spent(mid) > c_total:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    else:
        raise NumericalError("bisection for the water level did not converge")
    # polish: with the active set fixed the level has a closed form
    capped = w / (2.0 * hi) >= cap
    rest = c_total - capped.sum() * cap * cap
    free = ~capped & nz
    if rest > 0 and free.any():
        lam = math.sqrt(float(np.sum(w[free] ** 2)) / (4.0 * rest))
        if np.all(w[free] / (2.0 * lam) <= cap * (1 + 1e-12)):
            hi = lam
    eps = np.minimum(cap, w / (2.0 * hi))
    return _plan(eps, w, hi, c_total)
