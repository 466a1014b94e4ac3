"""Bit-budget allocation across weight groups.

Each group owns a separable distortion model

    d(bits) = grad_var * weight_var * 4**(-bits)

and the solver balances marginal distortion across groups subject to a mean
bit-depth budget. The per-group optimum given the trade-off ``dual`` is the
closed-form water-filling rule clamp(log2(grad_var*weight_var/dual)/2, 0,
max_bits); the dual variable is then driven to meet the budget.

The dual update is normalized per weight (the step applies to the residual
divided by the total weight count) so one step size behaves uniformly
across model sizes, and a bisection fallback engages once the residual has
bracketed the root, since the residual is monotone in the dual variable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "GroupStat",
    "Allocation",
    "group_distortion",
    "bit_update",
    "dual_ascent",
    "integerize",
    "partition_gain",
    "overhead_bits",
]

# Bits charged per group by the parameter-overhead model: one float16 scale
# plus one float16 offset. The container format additionally stores a bit
# depth byte per group; that byte is charged to the format accounting, not
# here, so the percentage tracks the quantization parameters themselves.
GROUP_PARAM_BITS = 32


@dataclass(frozen=True)
class GroupStat:
    """Sufficient statistics of one weight group."""

    count: int            # number of weights sharing the spec
    grad_var: float       # mean squared gradient per element
    weight_var: float     # variance of the group's weights
    label: tuple = ()     # (matrix, column range, row cluster)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.grad_var < 0 or self.weight_var < 0:
            raise ValueError("variances must be non-negative")


@dataclass(frozen=True)
class Allocation:
    """Solver output: real-valued bits plus the dual state that made them."""

    bits_real: np.ndarray
    dual: float
    residual: float           # signed budget miss, bits per weight
    converged: bool
    iterations: int
    counts: np.ndarray
    target_rate: float
    max_bits: float
    labels: tuple = ()
    bits_int: np.ndarray | None = None
    residual_int: float | None = None

    @property
    def total_weights(self) -> float:
        return float(math.fsum(self.counts))


def group_distortion(stat: GroupStat, bits) -> float:
    """Per-element modeled distortion of a group at a given bit depth."""
    if bits < 0:
        raise ValueError("bits must be non-negative")
    return stat.grad_var * stat.weight_var * 4.0 ** (-float(bits))


def bit_update(stat: GroupStat, dual: float, max_bits: float) -> float:
    """Closed-form optimal bit depth for one group at a given trade-off.

    Groups with a zero gradient-times-weight variance product contribute no
    distortion at any depth, so they are pinned to zero bits without
    entering the logarithm.
    """
    if not dual > 0:
        raise ValueError("dual variable must be positive")
    product = stat.grad_var * stat.weight_var
    if product <= 0:
        return 0.0
    return float(np.clip(0.5 * math.log2(product / dual), 0.0, max_bits))


def _bits_for(products: np.ndarray, dual: float, max_bits: float) -> np.ndarray:
    bits = np.zeros_like(products)
    live = products > 0
    bits[live] = np.clip(0.5 * np.log2(products[live] / dual), 0.0, max_bits)
    return bits


def dual_iterate(counts, products, target_rate, max_bits, step, dual,
                 max_steps, tol):
    """Shared primal/dual iteration.

    Takes one additive dual step per pass, switching to bisection in the
    log domain whenever the additive candidate leaves the bracket
    established by previously seen residual signs. Sums use exact rounding
    (math.fsum) so the result does not depend on group ordering.

    Returns (bits, dual, residual, converged, iterations).
    """
    counts = np.asarray(counts, dtype=np.float64)
    products = np.asarray(products, dtype=np.float64)
    total = math.fsum(counts)
    low = high = None
    best = None
    iterations = 0
    for iterations in range(1, max_steps + 1):
        bits = _bits_for(products, dual, max_bits)
        residual = math.fsum(counts * bits) / total - target_rate
        if best is None or abs(residual) < abs(best[2]):
            best = (bits, dual, residual)
        if abs(residual) < tol:
            return bits, dual, residual, True, iterations
        if residual > 0:
            low = dual if low is None else max(low, dual)
        else:
            high = dual if high is None else min(high, dual)
        candidate = dual + step * residual
        if low is not None and high is not None:
            if not low < candidate < high:
                candidate = math.sqrt(low * high)
        elif candidate <= 0:
            candidate = 0.5 * dual
        dual = candidate
    bits, dual, residual = best
    return bits, dual, residual, False, iterations


def dual_ascent(stats, target_rate, max_bits=8.0, step=2.0, tol=1e-6,
                max_iter=1000, initial_dual=1e-6) -> Allocation:
    """Drive the dual variable until the budget residual is within ``tol``.

    Non-convergence within ``max_iter`` returns the best iterate flagged as
    such rather than raising; callers decide whether that is fatal.
    """
    stats = list(stats)
    if not stats:
        raise ValueError("need at least one group")
    if not 0 < target_rate <= max_bits:
        raise ValueError("target rate must lie in (0, max_bits]")
    products = np.array([s.grad_var * s.weight_var for s in stats])
    if not (products > 0).any():
        raise ValueError("need at least one group with positive variance product")
    counts = np.array([float(s.count) for s in stats])
    bits, dual, residual, ok, iters = dual_iterate(
        counts, products, target_rate, max_bits, step, initial_dual,
        max_iter, tol)
    return Allocation(bits_real=bits, dual=dual, residual=residual,
                      converged=ok, iterations=iters, counts=counts,
                      target_rate=float(target_rate), max_bits=float(max_bits),
                      labels=tuple(s.label for s in stats))


def integerize(allocation: Allocation) -> Allocation:
    """Round converged real bits to integers, ties to even.

    The integer allocation may miss the budget by up to half a bit per
    group; the miss is reported, not repaired.
    """
    bits_int = np.round(allocation.bits_real).astype(np.int64)
    total = allocation.total_weights
    residual = (math.fsum(allocation.counts * bits_int) / total
                - allocation.target_rate)
    return replace(allocation, bits_int=bits_int, residual_int=residual)


def partition_gain(column_products, whole=None) -> float:
    """Average bit savings of per-column specs over one matrix-wide spec.

    ``column_products`` holds each column's gradient-variance times
    weight-variance product. With ``whole`` defaulting to the arithmetic
    mean of those products, concavity of log2 makes the gain non-negative.
    """
    arr = np.asarray(column_products, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("column products must be a non-empty 1-D sequence")
    bad = np.flatnonzero(~(arr > 0))
    if bad.size:
        raise ValueError(f"column {int(bad[0])} has a non-positive product")
    if whole is None:
        whole = float(arr.mean())
    elif not whole > 0:
        raise ValueError("matrix-level product must be positive")
    return 0.5 * (math.log2(whole) - float(np.mean(np.log2(arr))))


def overhead_bits(num_weights, cluster_size, clusters_per_column, avg_bits):
    """Parameter overhead as a percentage of the quantized payload bits.

    Charges float16 scale and offset per group (one group per column and
    row cluster) plus ceil(log2(clusters)) bits per row to signal each
    row's cluster index. ``num_weights`` must be divisible by
    cluster_size * clusters_per_column, the row count of the matrix.
    """
    if min(num_weights, cluster_size, clusters_per_column) < 1 or avg_bits <= 0:
        raise ValueError("all arguments must be positive")
    rows = int(cluster_size) * int(clusters_per_column)
    if num_weights % rows:
        raise ValueError(f"{num_weights} weights do not tile rows of {rows}")
    cols = num_weights // rows
    groups = cols * int(clusters_per_column)
    index_bits = rows * math.ceil(math.log2(clusters_per_column)) \
        if clusters_per_column > 1 else 0
    payload = num_weights * avg_bits
    return 100.0 * (groups * GROUP_PARAM_BITS + index_bits) / payload
