"""Dense small-matrix geometry for the affine row/column-sum constraint set.

Matrices here are plain float64 numpy arrays of shape (n, n), n >= 2.  The
central object is the centering projector ``center``: the orthogonal
projector onto the tangent space of matrices with zero row and column sums.
Everything downstream (noise initialization, path perturbation, velocity
projection) leans on it to keep states on the unit row/column-sum manifold
without any iterative correction.
"""

import numpy as np

# Test-only fault injection hook: when nonzero, ``center`` is deliberately
# broken so the verification suite's negative control has something to catch.
_FAULT_INJECT = 0.0


def as_square(x) -> np.ndarray:
    """Validate and return x as a float64 (n, n) array with n >= 2."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 2:
        raise ValueError("matrix side must be at least 2")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    return a


def center(u: np.ndarray) -> np.ndarray:
    """Project u onto the zero row/column-sum tangent space.

    Implements u - rowmean*1^T - 1*colmean^T + grandmean, equivalently the
    sandwich (I - J) u (I - J) with J = (1/n) 11^T.  Supports a trailing
    (..., n, n) batch.
    """
    u = np.asarray(u, dtype=np.float64)
    row = u.mean(axis=-1, keepdims=True)
    col = u.mean(axis=-2, keepdims=True)
    grand = row.mean(axis=-2, keepdims=True)
    out = u - row - col + grand
    if _FAULT_INJECT:
        out = out.copy()
        out[..., 0, 0] += _FAULT_INJECT
    return out


def uniform_doubly_stochastic(n: int) -> np.ndarray:
    """The barycenter (1/n) 11^T, the flat doubly stochastic matrix."""
    return np.full((n, n), 1.0 / n)


def marginal_residual(x: np.ndarray) -> float:
    """Max absolute deviation of any row or column sum from 1."""
    rows = np.abs(x.sum(axis=-1) - 1.0).max()
    cols = np.abs(x.sum(axis=-2) - 1.0).max()
    return float(max(rows, cols))


def is_affine_feasible(x: np.ndarray, tol: float) -> bool:
    """True iff every row and column sum of x is within tol of 1."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    return marginal_residual(x) <= tol


def doubly_centered_noise(
    n: int, rng: np.random.Generator, unit_frobenius: bool = True
) -> np.ndarray:
    """Gaussian noise projected to zero row/column sums.

    Entries are sampled i.i.d. standard normal and centered.  With
    unit_frobenius the result is rescaled to Frobenius norm 1; a numerically
    zero centered sample is resampled (bounded at 16 attempts, which cannot
    plausibly be reached).
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    for _ in range(16):
        eps = center(rng.standard_normal((n, n)))
        norm = float(np.sqrt((eps * eps).sum()))
        if norm > 1e-12:
            return eps / norm if unit_frobenius else eps
    raise RuntimeError("doubly_centered_noise: centered sample vanished 16 times")


def noisy_uniform_start(
    n: int,
    sigma0: float,
    rng: np.random.Generator,
    unit_frobenius: bool = True,
) -> np.ndarray:
    """Uniform matrix plus sigma0 times doubly-centered noise.

    Feasibility holds by construction: the noise lives in the tangent space,
    so row and column sums stay exactly 1 up to accumulation error.
    """
    if sigma0 < 0:
        raise ValueError("sigma0 must be nonnegative")
    x0 = uniform_doubly_stochastic(n)
    if sigma0 == 0:
        return x0
    return x0 + sigma0 * doubly_centered_noise(n, rng, unit_frobenius)


def noisy_uniform_batch(
    count: int,
    n: int,
    sigma0: float,
    rng: np.random.Generator,
    unit_frobenius: bool = True,
) -> np.ndarray:
    """Batch of ``count`` independent noisy uniform starts, shape (count, n, n)."""
    if sigma0 < 0:
        raise ValueError("sigma0 must be nonnegative")
    x0 = np.broadcast_to(uniform_doubly_stochastic(n), (count, n, n)).copy()
    if sigma0 == 0:
        return x0
    eps = center(rng.standard_normal((count, n, n)))
    if unit_frobenius:
        norms = np.sqrt((eps * eps).sum(axis=(-2, -1), keepdims=True))
        bad = np.nonzero(norms[:, 0, 0] <= 1e-12)[0]
        for i in bad:  # pragma: no cover - probability ~0
            eps[i] = doubly_centered_noise(n, rng, unit_frobenius=True)
            norms[i, 0, 0] = 1.0
        eps = eps / norms
    return x0 + sigma0 * eps


def frobenius_dist(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius distance sqrt(sum((a-b)^2)) between same-shape matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt((d * d).sum()))
