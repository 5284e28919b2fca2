"""Entropic assignment between keypoint names and marked locations.

A cost matrix (negated similarity scores) is turned into a Gibbs kernel
K = exp(-tau*C), balanced to a doubly stochastic transport plan by
alternating row/column normalization, and decoded into an assignment by
per-row argmax, per-column argmax, or an exact matching.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

#: Default inverse-temperature for the Gibbs kernel.
DEFAULT_TAU = 1.0 / 150.0

DECODE_MODES = ("row_argmax", "col_argmax", "hungarian")

# exp() overflows float64 just above 709; stay clear of it.
_EXP_GUARD = 700.0

_BRUTE_FORCE_MAX = 9


@dataclass(frozen=True)
class TransportPlan:
    """A balanced coupling matrix plus bookkeeping about how it got there.

    On convergence every row and column sums to 1 within `marginal_error`;
    when the iteration budget runs out first, `converged` is False and the
    plan is the best iterate reached (no exception is raised).
    """

    matrix: np.ndarray
    iterations: int
    marginal_error: float
    converged: bool

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class Assignment:
    """A decoded mapping between the two sides of a plan.

    mode "row": mapping[q] is the column chosen for row q.
    mode "col": mapping[a] is the row chosen for column a.
    """

    mapping: tuple[int, ...]
    mode: str
    is_permutation: bool


def _validate_square(matrix: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if m.shape[0] < 1:
        raise ValueError(f"{name} must be at least 1x1")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} must be finite")
    return m


def gibbs_kernel(cost: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """K = exp(-tau * cost), elementwise and strictly positive.

    When the exponents would overflow float64, the per-matrix minimum of
    -tau*cost is subtracted first; the constant factor cancels in the
    balanced plan, so downstream results are unchanged.
    """
    c = _validate_square(cost, "cost matrix")
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    exponents = -tau * c
    if exponents.max() > _EXP_GUARD:
        exponents = exponents - exponents.min()
    return np.exp(exponents)


def sinkhorn(kernel: np.ndarray, max_iter: int = 1000, tol: float = 1e-9) -> TransportPlan:
    """Balance a positive kernel to uniform unit row and column sums.

    One iteration = one row normalization followed by one column
    normalization; the reported error is the max absolute deviation of any
    row or column sum from 1.
    """
    k = _validate_square(kernel, "kernel")
    if np.any(k <= 0):
        raise ValueError("kernel entries must be strictly positive")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    if not tol > 0:
        raise ValueError(f"tol must be > 0, got {tol}")

    plan = k.copy()
    iterations = 0
    error = np.inf
    for iterations in range(1, max_iter + 1):
        plan /= plan.sum(axis=1, keepdims=True)
        plan /= plan.sum(axis=0, keepdims=True)
        row_err = np.abs(plan.sum(axis=1) - 1.0).max()
        col_err = np.abs(plan.sum(axis=0) - 1.0).max()
        error = float(max(row_err, col_err))
        if error <= tol:
            return TransportPlan(plan, iterations, error, True)
    return TransportPlan(plan, iterations, error, False)


def _plan_matrix(plan) -> np.ndarray:
    matrix = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    return _validate_square(matrix, "plan")


def decode_assignment(plan, mode: str = "row_argmax") -> Assignment:
    """Read an assignment off a plan (or any square score matrix).

    Argmax ties resolve to the lowest index. "hungarian" returns the exact
    maximum-sum matching and is always a permutation.
    """
    matrix = _plan_matrix(plan)
    m = matrix.shape[0]
    if mode == "row_argmax":
        cols = tuple(int(i) for i in np.argmax(matrix, axis=1))
        return Assignment(cols, "row", len(set(cols)) == m)
    if mode == "col_argmax":
        rows = tuple(int(i) for i in np.argmax(matrix, axis=0))
        return Assignment(rows, "col", len(set(rows)) == m)
    if mode == "hungarian":
        from scipy.optimize import linear_sum_assignment

        _, cols = linear_sum_assignment(matrix, maximize=True)
        return Assignment(tuple(int(i) for i in cols), "row", True)
    raise ValueError(f"unknown decode mode {mode!r}; expected one of {DECODE_MODES}")


def brute_force_assignment(cost: np.ndarray, tau: float = DEFAULT_TAU) -> Assignment:
    """Exhaustive best permutation under summed exp(-tau*cost) scores.

    Exists as an independent oracle for the decoders; refuses matrices
    larger than 9x9 (enumeration grows factorially). Ties resolve to the
    lexicographically smallest permutation.
    """
    kernel = gibbs_kernel(cost, tau)
    m = kernel.shape[0]
    if m > _BRUTE_FORCE_MAX:
        raise ValueError(f"brute force enumeration supports m <= {_BRUTE_FORCE_MAX}, got {m}")
    rows = np.arange(m)
    best_perm: tuple[int, ...] | None = None
    best_score = -np.inf
    for perm in permutations(range(m)):
        score = float(kernel[rows, perm].sum())
        if score > best_score:
            best_score = score
            best_perm = perm
    assert best_perm is not None
    return Assignment(best_perm, "row", True)
