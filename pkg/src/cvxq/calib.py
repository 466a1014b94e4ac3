"""The quantization driver: accumulate gradient statistics on a quantized
view of the model, re-solve the bit budget, re-quantize, correct biases,
and repeat.

Each outer iteration runs a minibatch of calibration sequences through the
current quantized view, updating exponential moving averages of (a) each
weight matrix's per-element squared gradients of one projected output
coefficient, and (b) the column means of each layer's input. Groups are
then re-formed (per-column ranges crossed with row clusters of similar
variance), the dual-ascent inner loop re-balances bit depths against the
budget, and every group is re-quantized from the original weights with a
companded quantizer, followed by a bias correction that preserves each
layer's output at the running mean input.

Statistics accumulation is a single sequential reducer applied in a fixed
batch order, which keeps full runs bit-reproducible for a given seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import alloc
from .alloc import Allocation, GroupStat, dual_ascent, dual_iterate, integerize
from .netmodel import ModelBundle, forward, substitute, sum_squared_gradients
from .numkit import RandomSource, pca_basis, sub_sample, variance_cluster
from .quant import compand_quantize, compand_reconstruct

__all__ = [
    "CvxqConfig",
    "GradStats",
    "MatrixGrouping",
    "GroupView",
    "GroupCode",
    "TraceRow",
    "CvxqResult",
    "DivergenceError",
    "GridSpec",
    "accumulate_stats",
    "bias_correct",
    "build_grouping",
    "grouped_views",
    "finetune_scale_mean",
    "cvxq",
    "zero_fraction",
    "overhead_percent",
]

# smallest positive normal float16; stored scales are floored here so a
# degenerate group still decodes
F16_TINY = 6.103515625e-05


class DivergenceError(RuntimeError):
    """Raised when the budget residual grows for too many iterations."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class CvxqConfig:
    """Driver hyperparameters. Defaults follow the reference operating point
    (batch 16, 17 tokens per sequence, cluster size 512, 64 iterations,
    8-bit cap)."""

    target_rate: float
    max_bits: float = 8.0
    batch_size: int = 16
    tokens_per_seq: int = 17
    cluster_size: int = 512
    clusters_per_column: int | None = None
    max_iter: int = 64
    inner_steps: int = 10
    inner_tol: float = 1e-6
    ema_rate: float = 0.1
    dual_step: float = 2.0
    seed: int = 0
    finetune: bool = True

    def __post_init__(self):
        if not 0 < self.target_rate <= self.max_bits:
            raise ValueError("target rate must lie in (0, max_bits]")
        if not 0 < self.ema_rate <= 1:
            raise ValueError("ema_rate must lie in (0, 1]")
        for name in ("batch_size", "tokens_per_seq", "cluster_size",
                     "max_iter", "inner_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dual_step <= 0:
            raise ValueError("dual_step must be positive")


@dataclass
class GradStats:
    """EMA state: per-element squared gradients and per-layer input means."""

    ema_rate: float
    sq_grads: dict[str, np.ndarray]
    input_means: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, model: ModelBundle, ema_rate: float) -> "GradStats":
        if not 0 < ema_rate <= 1:
            raise ValueError("ema_rate must lie in (0, 1]")
        sq = {nm: np.zeros_like(w) for nm, w in model.weights.items()}
        means = {nm: np.zeros(w.shape[0]) for nm, w in model.weights.items()}
        return cls(ema_rate=ema_rate, sq_grads=sq, input_means=means)

    def update(self, squared_grads, layer_inputs) -> "GradStats":
        """One EMA step from one sample's mean squared gradients and inputs."""
        rate = self.ema_rate
        for nm, sq in squared_grads.items():
            old = self.sq_grads.get(nm)
            if old is None or old.shape != np.shape(sq):
                raise ValueError(f"squared gradients for {nm!r} have the wrong shape")
            self.sq_grads[nm] = (1.0 - rate) * old + rate * sq
        for nm, x in layer_inputs.items():
            old = self.input_means.get(nm)
            col_mean = np.asarray(x, dtype=np.float64).mean(axis=0)
            if old is None or old.shape != col_mean.shape:
                raise ValueError(f"layer input for {nm!r} has the wrong shape")
            self.input_means[nm] = (1.0 - rate) * old + rate * col_mean
        return self


def accumulate_stats(stats: GradStats, grads, layer_inputs) -> GradStats:
    """Fold one sample's gradients into the running statistics.

    ``grads`` maps weight names to a gradient array (same shape as the
    weight) or to a stack of per-scalar gradients with a leading axis; the
    squared mean over that axis is what enters the EMA.
    """
    squared = {}
    for nm, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if g.ndim == 2:
            squared[nm] = g ** 2
        elif g.ndim == 3:
            squared[nm] = np.mean(g ** 2, axis=0)
        else:
            raise ValueError(f"gradient for {nm!r} must be 2-D or stacked 3-D")
    return stats.update(squared, layer_inputs)


def bias_correct(bias, weights, quantized, input_mean):
    """Bias that preserves the layer output at the running mean input.

    For the row-vector convention y = x @ W + b, returns
    b + input_mean @ (W - W_quantized), so that
    input_mean @ W_quantized + b_new == input_mean @ W + b exactly.
    """
    w = np.asarray(weights, dtype=np.float64)
    wq = np.asarray(quantized, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    xm = np.asarray(input_mean, dtype=np.float64)
    if w.shape != wq.shape or b.shape != (w.shape[1],) or xm.shape != (w.shape[0],):
        raise ValueError("bias correction arguments have inconsistent shapes")
    return b + xm @ (w - wq)


@dataclass(frozen=True)
class MatrixGrouping:
    """Column ranges crossed with row clusters for one weight matrix.

    Groups are enumerated range-major: group index = range_index *
    n_clusters + cluster_index.
    """

    shape: tuple[int, int]
    ranges: tuple[tuple[int, int], ...]
    clusters: np.ndarray  # per-row cluster id in [0, n_clusters)
    n_clusters: int

    @property
    def n_groups(self) -> int:
        return len(self.ranges) * self.n_clusters

    def column_range_map(self) -> np.ndarray:
        out = np.empty(self.shape[1], dtype=np.int64)
        for ri, (c0, c1) in enumerate(self.ranges):
            out[c0:c1] = ri
        return out

    def cluster_rows(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.clusters == cluster)

    def iter_groups(self):
        for ri, (c0, c1) in enumerate(self.ranges):
            for m in range(self.n_clusters):
                yield ri, m, (c0, c1), self.cluster_rows(m)


def build_grouping(model: ModelBundle, stats: GradStats,
                   config: CvxqConfig) -> dict[str, MatrixGrouping]:
    """Re-derive groupings from the current row statistics.

    Columns get individual ranges while matrices stay narrow (under 256
    columns); wider matrices fall back to a single full-width range. Rows
    are clustered by the product of their mean squared gradient and weight
    variance, so rows of similar sensitivity share a spec.
    """
    out = {}
    for nm in model.weight_names():
        w = model.weights[nm]
        rows, cols = w.shape
        ranges = (tuple((c, c + 1) for c in range(cols)) if cols < 256
                  else ((0, cols),))
        if config.clusters_per_column is not None:
            m = config.clusters_per_column
        else:
            m = int(round(rows / config.cluster_size))
        m = max(1, min(m, rows))
        scores = stats.sq_grads[nm].mean(axis=1) * w.var(axis=1)
        out[nm] = MatrixGrouping(shape=(rows, cols), ranges=ranges,
                                 clusters=variance_cluster(scores, m),
                                 n_clusters=m)
    return out


@dataclass(frozen=True)
class GroupView:
    """One group's membership plus the statistics the solver needs."""

    name: str
    range_index: int
    cluster_index: int
    col_start: int
    col_end: int
    rows: np.ndarray
    stat: GroupStat
    mean: float
    scale: float  # sqrt of the weight variance, floored to stay positive


def grouped_views(model: ModelBundle, stats: GradStats,
                  grouping: dict[str, MatrixGrouping]) -> list[GroupView]:
    """Per-group statistics, enumerated in matrix order then group order."""
    views = []
    for nm in model.weight_names():
        w = model.weights[nm]
        msq = stats.sq_grads[nm]
        g = grouping[nm]
        for ri, m, (c0, c1), rows in g.iter_groups():
            block = w[rows, c0:c1]
            mean = float(block.mean())
            var = float(block.var())
            grad_var = float(msq[rows, c0:c1].mean())
            stat = GroupStat(count=block.size, grad_var=grad_var,
                             weight_var=var, label=(nm, (c0, c1), m))
            views.append(GroupView(name=nm, range_index=ri, cluster_index=m,
                                   col_start=c0, col_end=c1, rows=rows,
                                   stat=stat, mean=mean,
                                   scale=max(math.sqrt(var), 1e-30)))
    return views


def _quantize_matrix(w, grouping: MatrixGrouping, bits, scales, means):
    """Companded reconstruction of a full matrix from per-group specs.

    ``bits``/``scales``/``means`` are flat arrays over this matrix's groups
    in enumeration order; bit depths may be fractional during the loop.
    """
    n_ranges = len(grouping.ranges)
    m = grouping.n_clusters
    col_map = grouping.column_range_map()
    b2 = np.asarray(bits, dtype=np.float64).reshape(n_ranges, m)
    s2 = np.asarray(scales, dtype=np.float64).reshape(n_ranges, m)
    mu2 = np.asarray(means, dtype=np.float64).reshape(n_ranges, m)
    out = np.empty_like(w)
    for cluster in range(m):
        rows = grouping.cluster_rows(cluster)
        out[rows] = compand_reconstruct(
            w[rows],
            b2[col_map, cluster][None, :],
            s2[col_map, cluster][None, :],
            mu2[col_map, cluster][None, :])
    return out


def _quantized_view(model, views, bits, grouping, provenance="quantized"):
    """Quantize every matrix at the given per-group bits, then fix biases."""
    per_matrix = {}
    for view, b in zip(views, bits):
        per_matrix.setdefault(view.name, []).append((view, float(b)))
    qweights = {}
    for nm, entries in per_matrix.items():
        n = grouping[nm].n_groups
        barr = np.empty(n)
        sarr = np.empty(n)
        marr = np.empty(n)
        for view, b in entries:
            gi = view.range_index * grouping[nm].n_clusters + view.cluster_index
            barr[gi], sarr[gi], marr[gi] = b, view.scale, view.mean
        qweights[nm] = _quantize_matrix(model.weights[nm], grouping[nm],
                                        barr, sarr, marr)
    return qweights


def _corrected_biases(model, qweights, input_means):
    return {nm: bias_correct(model.biases[nm], model.weights[nm],
                             qweights[nm], input_means[nm])
            for nm in qweights}


@dataclass(frozen=True)
class GridSpec:
    """Coarse 1-D grids for the post-run scale/offset refinement: 16
    multiplicative steps spanning [0.5, 2.0] around the group's standard
    deviation and 8 additive steps spanning one scale either side of the
    mean. Both grids contain the starting point."""

    scale_factors: tuple = tuple(2.0 ** f for f in np.linspace(-1.0, 1.0, 17))
    mean_offsets: tuple = tuple(np.linspace(-1.0, 1.0, 9))


def finetune_scale_mean(group, bits, grid: GridSpec | None = None):
    """Coordinate grid search for the (scale, mean) of one group.

    One pass over the scale grid holding the mean, then one pass over the
    mean grid holding the chosen scale. Because the starting point (std,
    mean) lies on the grid, the result never reconstructs worse than it.
    """
    grid = grid or GridSpec()
    g = np.asarray(group, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("cannot tune an empty group")
    mu0 = float(g.mean())
    s0 = float(g.std())
    if s0 <= 0:
        s0 = 1e-12 * max(1.0, abs(mu0))

    def mse(scale, mean):
        return float(np.mean((g - compand_reconstruct(g, bits, scale, mean)) ** 2))

    scale_errs = [mse(s0 * f, mu0) for f in grid.scale_factors]
    best = int(np.argmin(scale_errs))
    unit = grid.scale_factors.index(1.0) if 1.0 in grid.scale_factors else best
    if scale_errs[unit] <= scale_errs[best]:
        best = unit
    scale = s0 * grid.scale_factors[best]

    mean_errs = [mse(scale, mu0 + off * scale) for off in grid.mean_offsets]
    best = int(np.argmin(mean_errs))
    zero = grid.mean_offsets.index(0.0) if 0.0 in grid.mean_offsets else best
    if mean_errs[zero] <= mean_errs[best]:
        best = zero
    return scale, mu0 + grid.mean_offsets[best] * scale


@dataclass(frozen=True)
class GroupCode:
    """Final integer encoding of one group, ready for serialization."""

    name: str
    range_index: int
    cluster_index: int
    col_start: int
    col_end: int
    bits: int
    scale: float  # exactly float16-representable
    mean: float   # exactly float16-representable
    codes: np.ndarray


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    residual: float
    modeled_distortion: float
    output_mse: float
    output_mse_rel: float


@dataclass
class CvxqResult:
    model: ModelBundle
    allocation: Allocation
    grouping: dict[str, MatrixGrouping]
    group_codes: list[GroupCode]
    trace: list[TraceRow]
    config: CvxqConfig
    output_mse: float
    output_mse_rel: float
    modeled_distortion: float
    avg_bits: float
    signal_power: float

    def total_weights(self) -> int:
        return int(sum(w.size for w in self.model.weights.values()))


def _pooled_mse(outputs_a, outputs_b):
    num = math.fsum(float(((a - b) ** 2).sum())
                    for a, b in zip(outputs_a, outputs_b))
    den = sum(a.size for a in outputs_a)
    return num / den


def _coprime_stride(n: int) -> int:
    """Stride near 0.618*n and coprime to n, for low-discrepancy cycling."""
    if n <= 2:
        return 1
    target = max(1, round(0.618 * n))
    for delta in range(n):
        for cand in (target - delta, target + delta):
            if 1 <= cand < n and math.gcd(cand, n) == 1:
                return cand
    return 1


def cvxq(model: ModelBundle, calib_batches, config: CvxqConfig) -> CvxqResult:
    """Run the full quantize/measure/reallocate loop.

    Returns the final quantized bundle (integer bit depths, float16 scale
    and offset per group, corrected biases), the converged allocation, and
    the per-iteration trace. Aborts with :class:`DivergenceError` if the
    budget residual grows for ten consecutive outer iterations.
    """
    model.validate()
    batches = [np.asarray(b, dtype=np.float64) for b in calib_batches]
    if not batches:
        raise ValueError("need at least one calibration batch")
    for b in batches:
        if b.ndim != 2 or b.shape[1] != model.input_dim:
            raise ValueError("calibration batches must match the model input dim")

    rng = RandomSource(config.seed)
    originals = [forward(model, x)[0] for x in batches]
    basis = pca_basis(np.vstack(originals))
    signal = math.fsum(float((z ** 2).sum()) for z in originals) \
        / sum(z.size for z in originals)

    selections: dict[int, np.ndarray] = {}

    def rows_for(length: int) -> np.ndarray:
        if length not in selections:
            selections[length] = sub_sample(
                length, min(config.tokens_per_seq, length), rng)
        return selections[length]

    stats = GradStats.zeros(model, config.ema_rate)
    current = model  # bit depths start unbounded: the view is the original
    dual = 1e-6
    trace: list[TraceRow] = []
    cursor = 0
    grow_streak = 0
    grouping = None
    views = None
    bits = None
    stride = _coprime_stride(basis.shape[1])

    for it in range(1, config.max_iter + 1):
        # one EMA update per minibatch: the expectation over the batch is
        # taken first, then folded into the running averages, so the
        # statistics move at the iteration scale rather than jittering with
        # individual samples
        batch_sq: dict[str, np.ndarray] = {}
        batch_inputs: dict[str, np.ndarray] = {}
        for _ in range(config.batch_size):
            # every sample backpropagates one projected coefficient,
            # cycling through the whole basis; the stride is coprime to the
            # basis size so any window of samples sees a representative mix
            # of large and small eigendirections instead of one stratum
            direction = basis[:, (cursor * stride) % basis.shape[1]]
            x = batches[cursor % len(batches)]
            cursor += 1
            _, inputs = forward(current, x)
            sel = rows_for(x.shape[0])
            sq_sum = sum_squared_gradients(current, x, sel, direction)
            for nm, s in sq_sum.items():
                contrib = s / sel.size
                batch_sq[nm] = batch_sq.get(nm, 0.0) + contrib
            for nm, xin in inputs.items():
                col = xin.mean(axis=0)
                batch_inputs[nm] = batch_inputs.get(nm, 0.0) + col
        mean_sq = {nm: s / config.batch_size for nm, s in batch_sq.items()}
        mean_in = {nm: v[None, :] / config.batch_size
                   for nm, v in batch_inputs.items()}
        stats.update(mean_sq, mean_in)

        grouping = build_grouping(model, stats, config)
        views = grouped_views(model, stats, grouping)
        counts = np.array([v.stat.count for v in views], dtype=np.float64)
        products = np.array([v.stat.grad_var * v.stat.weight_var for v in views])
        if not (products > 0).any():
            raise ValueError("gradient statistics vanished; cannot allocate bits")
        bits, dual, residual, _, _ = dual_iterate(
            counts, products, config.target_rate, config.max_bits,
            config.dual_step, dual, config.inner_steps, config.inner_tol)

        qweights = _quantized_view(model, views, bits, grouping)
        qbiases = _corrected_biases(model, qweights, stats.input_means)
        current = substitute(model, qweights, qbiases)

        modeled = math.fsum(counts * products * 4.0 ** -bits)
        mse = _pooled_mse([forward(current, x)[0] for x in batches], originals)
        trace.append(TraceRow(iteration=it, residual=residual,
                              modeled_distortion=modeled, output_mse=mse,
                              output_mse_rel=mse / signal))

        if len(trace) > 1 and abs(residual) > abs(trace[-2].residual):
            grow_streak += 1
            if grow_streak >= 10:
                raise DivergenceError(
                    "budget residual grew for 10 consecutive iterations", trace)
        else:
            grow_streak = 0

    # final pass: converge the dual fully on the last statistics, round bit
    # depths to integers, refine (scale, mean) on their grids, and re-encode
    # with float16 parameters so the serialized form decodes to exactly the
    # weights deployed here
    allocation = integerize(dual_ascent(
        [v.stat for v in views], config.target_rate, config.max_bits,
        step=config.dual_step, initial_dual=dual))
    group_codes, qweights = _encode_groups(model, views, grouping,
                                           allocation.bits_int, config)
    qbiases = _corrected_biases(model, qweights, stats.input_means)
    counts = allocation.counts
    payload_bits = math.fsum(counts * allocation.bits_int)
    avg_bits = payload_bits / allocation.total_weights
    bundle = substitute(model, qweights, qbiases,
                        provenance=f"quantized(avg_bits={avg_bits:.3f})")
    final_outputs = [forward(bundle, x)[0] for x in batches]
    final_mse = _pooled_mse(final_outputs, originals)
    products = np.array([v.stat.grad_var * v.stat.weight_var for v in views])
    modeled = math.fsum(counts * products * 4.0 ** -np.asarray(
        allocation.bits_int, dtype=np.float64))
    return CvxqResult(model=bundle, allocation=allocation, grouping=grouping,
                      group_codes=group_codes, trace=trace, config=config,
                      output_mse=final_mse, output_mse_rel=final_mse / signal,
                      modeled_distortion=modeled, avg_bits=avg_bits,
                      signal_power=signal)


def _encode_groups(model, views, grouping, bits_int, config):
    """Integer-encode every group and rebuild the quantized matrices."""
    qweights = {nm: np.empty_like(w) for nm, w in model.weights.items()}
    codes = []
    for view, b in zip(views, bits_int):
        b = int(b)
        w = model.weights[view.name]
        block = w[view.rows, view.col_start:view.col_end]
        flat = block.ravel()
        scale, mean = view.scale, view.mean
        if config.finetune and b > 0 and flat.size > 1:
            scale, mean = finetune_scale_mean(flat, b)
        scale = max(float(np.float16(scale)), F16_TINY)
        mean = float(np.float16(mean))
        qg = compand_quantize(flat, b, scale, mean)
        recon = qg.decode()
        qweights[view.name][view.rows, view.col_start:view.col_end] = \
            recon.reshape(block.shape)
        codes.append(GroupCode(name=view.name, range_index=view.range_index,
                               cluster_index=view.cluster_index,
                               col_start=view.col_start, col_end=view.col_end,
                               bits=b, scale=scale, mean=mean, codes=qg.codes))
    return codes, qweights


def zero_fraction(result: CvxqResult) -> dict[str, float]:
    """Percent of each matrix's weights sitting on a zero-bit level."""
    pruned = {nm: 0 for nm in result.model.weights}
    for code in result.group_codes:
        if code.bits == 0:
            pruned[code.name] += code.codes.size
    return {nm: 100.0 * pruned[nm] / result.model.weights[nm].size
            for nm in pruned}


def overhead_percent(result: CvxqResult) -> float:
    """Parameter overhead of the final encoding, relative to payload bits."""
    param_bits = alloc.GROUP_PARAM_BITS * len(result.group_codes)
    index_bits = 0
    for nm, g in result.grouping.items():
        if g.n_clusters > 1:
            index_bits += g.shape[0] * math.ceil(math.log2(g.n_clusters))
    payload = math.fsum(result.allocation.counts * result.allocation.bits_int)
    return 100.0 * (param_bits + index_bits) / payload if payload else math.inf
