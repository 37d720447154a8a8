"""Closed-form minimizer of ``alpha * <lam, d> + ||lam||^2`` over the probability simplex."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NoActiveColumnsError(ValueError):
    pass


@dataclass(frozen=True)
class LambdaVec:
    weights: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        a = np.asarray(self.active, dtype=bool)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "active", a)

    @classmethod
    def uniform(cls, num_columns: int, active=None) -> LambdaVec:
        active = np.ones(num_columns, dtype=bool) if active is None else np.asarray(active, dtype=bool)
        if not active.any():
            raise NoActiveColumnsError("no active pseudo-attributes")
        w = np.where(active, 1.0 / active.sum(), 0.0)
        return cls(w, active)

    def check(self, tol: float = 1e-9) -> None:
        w = self.weights
        if (w < 0).any():
            raise AssertionError(f"negative weight in {w}")
        if abs(w.sum() - 1.0) > tol:
            raise AssertionError(f"weights sum to {w.sum()}")
        if (w[~self.active] != 0).any():
            raise AssertionError("inactive column carries weight")


def solve_lambda(d, alpha: float, active=None) -> LambdaVec:
    """Sorted threshold search for the simplex-constrained quadratic.

    With ``c = alpha * d`` sorted descending over the active columns, the
    multiplier ``b = -(2 + sum_{i>=j} c'_i) / (m - j + 1)`` is taken from the
    first segment where it lies in ``[-c'_{j-1}, -c'_j]``; then
    ``lam_i = max(0, (-b - c_i) / 2)``. Inactive columns get weight 0.
    """
    d = np.asarray(d, dtype=np.float64)
    if not np.isfinite(d).all() or (d < 0).any():
        raise ValueError("disparities must be finite and nonnegative")
    active = np.ones(len(d), dtype=bool) if active is None else np.asarray(active, dtype=bool)
    if not active.any():
        raise NoActiveColumnsError("no active pseudo-attributes")
    c = alpha * d[active]
    m = len(c)
    cs = np.sort(c)[::-1]
    tails = np.cumsum(cs[::-1])[::-1]  # tails[j] = sum_{i>=j} cs[i]
    tol = 1e-12 * max(1.0, float(cs[0]))
    b = None
    for j in range(m):
        cand = -(2.0 + tails[j]) / (m - j)
        upper_ok = -cand >= cs[j] - tol
        lower_ok = j == 0 or -cand <= cs[j - 1] + tol
        if upper_ok and lower_ok:
            b = cand
            break
    if b is None:  # unreachable for finite input; keep the all-active solution
        b = -(2.0 + tails[0]) / m
    lam_active = np.maximum(0.0, (-b - c) / 2.0)
    lam_active /= lam_active.sum()
    weights = np.zeros(len(d))
    weights[active] = lam_active
    return LambdaVec(weights, active)


def kkt_residuals(d, alpha: float, lam: LambdaVec) -> dict:
    """Recover (b, a) from a candidate solution and report KKT violations."""
    d = np.asarray(d, dtype=np.float64)
    act = lam.active
    c = alpha * d[act]
    w = lam.weights[act]
    pos = w > 0
    b = -float(np.mean(c[pos] + 2.0 * w[pos]))
    a = c + 2.0 * w + b
    return {
        "b": b,
        "a": a,
        "stationarity": float(np.max(np.abs(a[pos]))) if pos.any() else 0.0,
        "dual_feasibility": float(max(0.0, -a.min())),
        "complementarity": float(np.max(np.abs(a * w))),
        "primal_sum": float(abs(w.sum() - 1.0)),
        "primal_nonneg": float(max(0.0, -w.min())),
    }


def lambda_objective(lam, d, alpha: float) -> float:
    lam = np.asarray(lam, dtype=np.float64)
    return float(alpha * lam @ np.asarray(d, dtype=np.float64) + lam @ lam)
