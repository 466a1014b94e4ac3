"""Scalar quantizers and their error statistics.

Four quantizer families live here:

* ``uniform_quantize``: mid-rise uniform quantization with saturation.
* ``compand_quantize``: map weights through a Laplace-matched sigmoid onto
  (0, 1), quantize uniformly there, and map back. Cell widths then track the
  cube root of the density, which is the asymptotically optimal level
  density for mean squared error.
* ``rtn_quantize``: round-to-nearest with the step chosen so the grid just
  covers the data range.
* ``lloyd_max``: the classic alternating centroid/threshold iteration, used
  as an oracle for the companded quantizer.

``error_variance`` estimates E[(x - q(x))^2] by Monte Carlo for a named
source distribution and an arbitrary quantizer callable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import RandomSource

__all__ = [
    "QuantSpec",
    "QuantizedGroup",
    "uniform_quantize",
    "compander",
    "compander_inverse",
    "compand_reconstruct",
    "compand_quantize",
    "rtn_quantize",
    "lloyd_max",
    "error_variance",
]

# Slope of the sigmoid exponent per unit of (value - mean) / scale. The
# companding map integrates the cube root of a Laplace density, hence the
# factor 3 under the sqrt(2).
_COMPAND_RATE = math.sqrt(2.0) / 3.0

_MODES = ("uniform", "companded", "rtn")


@dataclass(frozen=True)
class QuantSpec:
    """Bit depth, step, and affine parameters of one quantizer instance."""

    bits: float  # non-negative, may be math.inf
    step: float
    scale: float = 1.0
    mean: float = 0.0
    mode: str = "uniform"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (self.bits >= 0):
            raise ValueError("bits must be non-negative")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.mode == "companded" and not self.scale > 0:
            raise ValueError("companded mode requires a positive scale")

    @property
    def levels(self) -> np.ndarray:
        """All reconstruction values, in code order."""
        if math.isinf(self.bits):
            raise ValueError("infinite bit depth has no finite level set")
        n = _cells(self.bits)
        codes = np.arange(n, dtype=np.int64)
        return _decode(codes, self)


@dataclass(frozen=True)
class QuantizedGroup:
    """Integer codes for a run of weights plus the spec to decode them."""

    codes: np.ndarray
    spec: QuantSpec

    @property
    def count(self) -> int:
        return int(self.codes.size)

    def decode(self) -> np.ndarray:
        return _decode(self.codes, self.spec)


def _cells(bits) -> np.ndarray:
    """Number of usable mid-rise cells on (0, 1) at 2**-bits spacing.

    For integer depths this is exactly 2**bits; for fractional depths the
    top cell is dropped whenever its center would fall outside (0, 1).
    """
    count = np.ceil(2.0 ** np.asarray(bits, dtype=np.float64) - 0.5)
    return np.maximum(count, 1.0)


def uniform_quantize(values, bits, step):
    """Mid-rise uniform quantization of ``values``.

    Reconstructs to step*(k + 1/2) with k = clip(floor(v/step),
    -2**(bits-1), 2**(bits-1) - 1). bits=0 collapses everything onto the
    single level at zero, and bits=inf returns the input unchanged. Total on
    finite reals; no exceptions beyond argument validation.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    v = np.asarray(values, dtype=np.float64)
    if math.isinf(bits):
        out = v.copy()
        return out if out.ndim else float(out)
    b = int(bits)
    if b != bits or b < 0:
        raise ValueError("bits must be a non-negative integer or inf")
    lo = -(2.0 ** (b - 1))
    hi = 2.0 ** (b - 1) - 1.0
    k = np.clip(np.floor(v / step), lo, hi)
    out = step * (k + 0.5)
    return out if out.ndim else float(out)


def compander(values, scale, mean):
    """Map reals into (0, 1) so uniform cells there track a Laplace density.

    Implements the normalized integral of the cube root of a
    Laplace(mean, scale**2) density: strictly increasing, equal to 1/2 at
    the mean, and flattening in the tails so that probable values receive
    finer cells. ``scale`` and ``mean`` broadcast against ``values``.
    """
    scale_arr = np.asarray(scale, dtype=np.float64)
    if np.any(scale_arr <= 0):
        raise ValueError("scale must be positive")
    v = np.asarray(values, dtype=np.float64)
    t = (v - mean) * (_COMPAND_RATE / scale_arr)
    out = np.where(t < 0, 0.5 * np.exp(t), 1.0 - 0.5 * np.exp(-t))
    return out if out.ndim else float(out)


def compander_inverse(values, scale, mean):
    """Exact analytic inverse of :func:`compander`."""
    scale_arr = np.asarray(scale, dtype=np.float64)
    if np.any(scale_arr <= 0):
        raise ValueError("scale must be positive")
    u = np.asarray(values, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("companded values must lie strictly inside (0, 1)")
    slope = scale_arr / _COMPAND_RATE
    lower = mean + slope * np.log(2.0 * u)
    upper = mean - slope * np.log(2.0 * (1.0 - u))
    out = np.where(u < 0.5, lower, upper)
    return out if out.ndim else float(out)


def _compand_codes(values, bits, scale, mean) -> np.ndarray:
    """Cell index of each value on the (0, 1) mid-rise grid at 2**-bits."""
    u = compander(values, scale, mean)
    n = 2.0 ** np.asarray(bits, dtype=np.float64)
    top = _cells(bits) - 1.0
    return np.clip(np.floor(np.asarray(u) * n), 0.0, top)


def compand_reconstruct(values, bits, scale, mean):
    """Companded quantization straight to reconstruction values.

    ``bits`` may be fractional (the optimizer works with real-valued depths
    before the final rounding) and, like ``scale`` and ``mean``, broadcasts
    against ``values``. bits=0 maps every value to ``mean``.
    """
    codes = _compand_codes(values, bits, scale, mean)
    n = 2.0 ** np.asarray(bits, dtype=np.float64)
    out = compander_inverse((codes + 0.5) / n, scale, mean)
    return out if np.ndim(out) else float(out)


def _decode(codes, spec: QuantSpec) -> np.ndarray:
    codes = np.asarray(codes)
    if spec.mode == "companded":
        u = (codes + 0.5) * spec.step
        return np.asarray(compander_inverse(u, spec.scale, spec.mean))
    # uniform and rtn store unsigned codes offset by half the grid
    half = 2.0 ** (spec.bits - 1)
    return spec.mean + spec.step * (codes + 0.5 - half)


def compand_quantize(group, bits, scale, mean) -> QuantizedGroup:
    """Quantize a run of weights with a shared companded spec.

    bits=0 produces an empty payload in spirit: every weight decodes to
    ``mean``, which is how low-variance groups get pruned toward zero when
    their mean is near zero.
    """
    g = np.asarray(group, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("cannot quantize an empty group")
    if math.isinf(bits) or bits < 0:
        raise ValueError("bits must be finite and non-negative")
    if not scale > 0:
        raise ValueError("scale must be positive")
    codes = _compand_codes(g, bits, scale, mean).astype(np.int64)
    spec = QuantSpec(bits=float(bits), step=2.0 ** -float(bits),
                     scale=float(scale), mean=float(mean), mode="companded")
    return QuantizedGroup(codes=codes, spec=spec)


def rtn_quantize(group, bits) -> QuantizedGroup:
    """Round-to-nearest: 2**bits mid-rise steps spanning the data range.

    The step halves whenever bits increases by one for a fixed range. A
    zero-range group reconstructs exactly to its constant value with the
    step pinned at a tiny floor.
    """
    b = int(bits)
    if b != bits or b < 1:
        raise ValueError("bits must be an integer >= 1")
    g = np.asarray(group, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("cannot quantize an empty group")
    lo, hi = float(g.min()), float(g.max())
    half = 2 ** (b - 1)
    if hi == lo:
        step = 1e-12 * max(1.0, abs(lo))
        # offset the grid so the level at code `half` lands exactly on the
        # constant value
        center = lo - step * 0.5
        codes = np.full(g.size, half, dtype=np.int64)
    else:
        step = (hi - lo) / 2.0 ** b
        center = 0.5 * (lo + hi)
        k = np.clip(np.floor((g - center) / step), -half, half - 1)
        codes = (k + half).astype(np.int64)
    spec = QuantSpec(bits=float(b), step=step, scale=1.0, mean=center, mode="rtn")
    return QuantizedGroup(codes=codes, spec=spec)


def lloyd_max(samples, bits, tol=1e-7, max_iter=500):
    """Alternating centroid/threshold iteration for a scalar quantizer.

    Runs until the largest level movement drops below ``tol`` or
    ``max_iter`` passes elapse. Empty cells are re-seeded by splitting the
    most populated cell at its median, which keeps the distortion
    non-increasing and guarantees progress. Returns (levels, thresholds).
    """
    b = int(bits)
    if b != bits or b < 1:
        raise ValueError("bits must be an integer >= 1")
    x = np.asarray(samples, dtype=np.float64).ravel()
    n_levels = 2 ** b
    if np.unique(x).size < n_levels:
        raise ValueError(f"need at least {n_levels} distinct samples")

    # density-matched init: spread levels per the cube-root rule around the
    # sample moments, then let the iterations refine. A plain quantile init
    # stalls in a poor stationary point at high level counts because it
    # overcrowds the mode.
    grid = (np.arange(n_levels) + 0.5) / n_levels
    levels = compander_inverse(grid, max(float(x.std()), 1e-30), float(x.mean()))
    levels = np.sort(levels)

    for _ in range(max_iter):
        thresholds = 0.5 * (levels[1:] + levels[:-1])
        cells = np.searchsorted(thresholds, x)
        counts = np.bincount(cells, minlength=n_levels)

        guard = 0
        while (counts == 0).any():
            empty = int(np.argmin(counts))
            crowded = int(np.argmax(counts))
            members = np.sort(x[cells == crowded])
            cut = members.size // 2
            levels[crowded] = members[:cut].mean()
            levels[empty] = members[cut:].mean()
            levels = np.sort(levels)
            thresholds = 0.5 * (levels[1:] + levels[:-1])
            cells = np.searchsorted(thresholds, x)
            counts = np.bincount(cells, minlength=n_levels)
            guard += 1
            if guard > n_levels:
                raise RuntimeError("could not populate all quantizer cells")

        sums = np.bincount(cells, weights=x, minlength=n_levels)
        new_levels = sums / counts
        movement = float(np.max(np.abs(new_levels - levels)))
        levels = np.sort(new_levels)
        if movement < tol:
            break

    thresholds = 0.5 * (levels[1:] + levels[:-1])
    return levels, thresholds


def error_variance(distribution, quantizer, bits, trials, seed, scale=1.0):
    """Monte-Carlo estimate of E[(x - quantizer(x, bits))^2].

    ``distribution`` is one of gaussian / laplace / uniform; gaussian and
    laplace draw zero-mean samples with standard deviation ``scale``, while
    uniform draws from a window of full width ``scale`` centered on zero.
    ``quantizer`` is any callable (values, bits) -> values.
    """
    if trials < 10_000:
        raise ValueError("need at least 10000 trials for a stable estimate")
    src = RandomSource(seed)
    if distribution == "gaussian":
        x = src.gaussian(0.0, scale, trials)
    elif distribution == "laplace":
        x = src.laplace(0.0, scale, trials)
    elif distribution == "uniform":
        x = src.uniform(-0.5 * scale, 0.5 * scale, trials)
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    q = np.asarray(quantizer(x, bits), dtype=np.float64)
    return float(np.mean((x - q) ** 2))
