"""Discrete assignment machinery: exact solvers, Sinkhorn, and rounding.

Permutations are carried as 1-D int64 arrays ``assign`` with assign[i] = the
column holding the single 1 of row i; ``perm_matrix`` gives the one-hot view.
The exact solver is scipy's linear assignment routine; ``brute_force_min`` is
the independent exhaustive oracle used to cross-check it.
"""

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .matgeo import as_square


class NumericError(RuntimeError):
    """A numeric computation produced non-finite intermediates."""


def check_perm(assign: np.ndarray) -> np.ndarray:
    """Validate that assign is a bijection on {0,..,n-1}; return as int64."""
    a = np.asarray(assign, dtype=np.int64)
    if a.ndim != 1:
        raise ValueError("assign must be one-dimensional")
    n = a.shape[0]
    if not np.array_equal(np.sort(a), np.arange(n)):
        raise ValueError(f"assign is not a permutation of 0..{n - 1}: {a}")
    return a


def perm_matrix(assign: np.ndarray) -> np.ndarray:
    """One-hot (n, n) matrix view of an assignment array."""
    a = check_perm(assign)
    n = a.shape[0]
    p = np.zeros((n, n))
    p[np.arange(n), a] = 1.0
    return p


def perm_cost(cost: np.ndarray, assign: np.ndarray) -> float:
    """Total cost sum_i cost[i, assign[i]]."""
    a = np.asarray(assign, dtype=np.int64)
    return float(cost[np.arange(len(a)), a].sum())


def hungarian_min(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment of a square cost matrix.

    Returns (assign, total_cost).  Among equal-cost optima the returned
    permutation follows the solver's internal order; only the objective value
    is contractual (brute_force_min provides the canonical tie-break).
    """
    c = as_square(cost)
    rows, cols = linear_sum_assignment(c)
    assign = np.asarray(cols, dtype=np.int64)
    return assign, perm_cost(c, assign)


def brute_force_min(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Exhaustive minimum over all n! permutations, n <= 9.

    Ties break toward the lexicographically smallest assign array, which
    makes the result canonical and usable as an oracle.
    """
    c = as_square(cost)
    n = c.shape[0]
    if n > 9:
        raise ValueError(f"brute force limited to n <= 9, got n = {n}")
    best_assign = None
    best_total = np.inf
    for p in permutations(range(n)):
        total = perm_cost(c, np.asarray(p, dtype=np.int64))
        if total < best_total - 0.0:  # strict improvement keeps lexicographic first
            best_total = total
            best_assign = p
    return np.asarray(best_assign, dtype=np.int64), float(best_total)


@dataclass
class SinkhornResult:
    """Output of the log-domain Sinkhorn iteration.

    matrix is approximately doubly stochastic with nonnegative entries;
    max_marginal_residual records the worst row/column-sum deviation from 1
    rather than assuming convergence.
    """

    matrix: np.ndarray
    iters_run: int
    max_marginal_residual: float
    residual_history: list[float] = field(default_factory=list)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def sinkhorn_log(
    score: np.ndarray, tau: float, iters: int, record_history: bool = False
) -> SinkhornResult:
    """Entropy-regularized soft assignment via log-domain Sinkhorn.

    Operates on score/tau throughout, alternately subtracting row and column
    log-sum-exp, and exponentiates only at the end.  record_history
    additionally tracks the marginal residual after each iteration (costs one
    exp per iteration; off by default).
    """
    s = as_square(score)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    log_x = s / tau
    history: list[float] = []
    for it in range(iters):
        log_x = log_x - _logsumexp(log_x, axis=1)
        log_x = log_x - _logsumexp(log_x, axis=0)
        if not np.all(np.isfinite(log_x)):
            raise NumericError(
                f"sinkhorn_log: non-finite values at iteration {it + 1}; "
                "tau is likely too small for the score scale"
            )
        if record_history:
            x = np.exp(log_x)
            history.append(
                float(
                    max(
                        np.abs(x.sum(axis=1) - 1.0).max(),
                        np.abs(x.sum(axis=0) - 1.0).max(),
                    )
                )
            )
    x = np.exp(log_x)
    residual = float(
        max(np.abs(x.sum(axis=1) - 1.0).max(), np.abs(x.sum(axis=0) - 1.0).max())
    )
    return SinkhornResult(x, iters, residual, history)


def round_to_perm(x: np.ndarray) -> np.ndarray:
    """Nearest permutation in the inner-product sense: assignment on -x."""
    return hungarian_min(-as_square(x))[0]


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel(0,1) noise via inverse CDF, clamped away from 0 and 1."""
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_sinkhorn_sample(
    score: np.ndarray,
    tau: float,
    iters: int,
    k: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """k independent hard permutations from Gumbel-perturbed Sinkhorn.

    Each draw perturbs the score with i.i.d. Gumbel(0,1) noise, runs
    log-domain Sinkhorn on (score + G)/tau, and rounds the result.
    """
    s = as_square(score)
    if k < 1:
        raise ValueError("k must be at least 1")
    out = []
    for _ in range(k):
        g = gumbel_noise(s.shape, rng)
        soft = sinkhorn_log(s + g, tau, iters).matrix
        out.append(round_to_perm(soft))
    return out
