"""Seeded RNG, PCA bases, deterministic sub-sampling and 1-D quantile
clustering shared by the rest of the package.

Every function here is a pure function of its inputs plus an explicit seed,
so results are reproducible run to run and values can be shared freely
across threads.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "QUANT_COEFF",
    "RandomSource",
    "as_matrix",
    "pca_basis",
    "sub_sample",
    "variance_cluster",
]

# Distribution-dependent constants of the high-resolution error model
#   E[err^2] ~ coeff * variance * 4**(-bits)
# Reference values for reporting only; empirical estimates are produced by
# quant.error_variance and are never asserted against these numbers.
QUANT_COEFF = {"gaussian": 1.42, "laplace": 0.72}


class RandomSource:
    """Deterministic random stream with named distributions.

    The same seed yields the same draw sequence on every run and under any
    thread count. ``counter`` is the number of draw calls made so far.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0
        self._rng = np.random.Generator(np.random.PCG64(self.seed))

    def gaussian(self, mean=0.0, std=1.0, size=None):
        self.counter += 1
        return self._rng.normal(mean, std, size)

    def laplace(self, mean=0.0, std=1.0, size=None):
        # numpy's scale parameter is the diversity b; variance equals 2*b**2
        self.counter += 1
        return self._rng.laplace(mean, std / np.sqrt(2.0), size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.counter += 1
        return self._rng.uniform(low, high, size)

    def pick(self, population: int, k: int):
        """k distinct indices from range(population), in draw order."""
        self.counter += 1
        return self._rng.choice(int(population), size=int(k), replace=False)


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D array of finite floats and return it as float64."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def pca_basis(samples) -> np.ndarray:
    """Orthonormal eigenbasis of the column-centered sample covariance.

    Columns are sorted by descending eigenvalue, and the sign of each column
    is fixed so that its largest-magnitude entry is positive, which keeps
    downstream reports reproducible bit for bit. A zero covariance (for
    example a single sample) maps to the identity basis so accumulation can
    still run on degenerate inputs.
    """
    x = as_matrix(samples, "samples")
    count, dim = x.shape
    if count < 1 or dim < 1:
        raise ValueError("samples must be non-empty")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / count
    if not cov.any():
        return np.eye(dim)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    basis = np.ascontiguousarray(evecs[:, order])
    anchor = np.abs(basis).argmax(axis=0)
    flip = basis[anchor, np.arange(dim)] < 0.0
    basis[:, flip] *= -1.0
    return basis


def sub_sample(total: int, k: int, source: RandomSource) -> np.ndarray:
    """k distinct indices in [0, total), ascending, deterministic per seed."""
    if not 1 <= k <= total:
        raise ValueError(f"need 1 <= k <= total, got k={k}, total={total}")
    return np.sort(source.pick(total, k))


def variance_cluster(scores, groups: int) -> np.ndarray:
    """Assign each score to one of ``groups`` similarly sized clusters.

    Items are ordered by (score, original index) and that order is cut into
    ``groups`` contiguous runs whose sizes differ by at most one; cluster 0
    holds the smallest scores. Sorting plus a quantile split is
    deterministic and O(N log N), which is all a similar-size grouping
    needs.
    """
    vals = np.asarray(scores, dtype=np.float64)
    if vals.ndim != 1:
        raise ValueError("scores must be 1-D")
    if vals.size == 0:
        raise ValueError("scores must be non-empty")
    if not np.isfinite(vals).all() or (vals < 0).any():
        raise ValueError("scores must be finite and non-negative")
    n = vals.shape[0]
    m = int(groups)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= groups <= {n}, got {m}")
    order = np.argsort(vals, kind="stable")  # stable sort breaks ties by index
    assignment = np.empty(n, dtype=np.int64)
    base, extra = divmod(n, m)
    start = 0
    for g in range(m):
        size = base + (1 if g < extra else 0)
        assignment[order[start:start + size]] = g
        start += size
    return assignment
