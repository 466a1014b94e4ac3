"""A small differentiable network used as the desk-scale test vehicle.

Models are stacks of linear layers (with biases), elementwise activations,
and optionally a single-head attention block. The module provides forward
evaluation with per-layer input capture, reverse-mode gradients of a single
selected output scalar with respect to every weight matrix, and a
copy-on-substitute operation for swapping in quantized weights.

Forward and backward are pure given a bundle, so evaluations can run
concurrently on shared bundles; any accumulation of their results is the
caller's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import RandomSource

__all__ = [
    "LayerSpec",
    "ModelBundle",
    "forward",
    "backward",
    "sum_squared_gradients",
    "substitute",
    "build_mlp",
    "build_attention_model",
    "build_calibration",
]

_KINDS = ("linear", "activation", "attention")
_ATTN_PARTS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_dim: int = 0
    out_dim: int = 0
    has_bias: bool = True
    activation: str = "tanh"  # used when kind == "activation"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "attention" and self.in_dim != self.out_dim:
            raise ValueError("attention requires in_dim == out_dim")


@dataclass
class ModelBundle:
    """Ordered layers plus named weight matrices and bias vectors."""

    layers: list[LayerSpec]
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    provenance: str = "original"

    def weight_names(self) -> list[str]:
        """Weight-matrix names in execution order."""
        names = []
        for layer in self.layers:
            if layer.kind == "linear":
                names.append(layer.name)
            elif layer.kind == "attention":
                names.extend(f"{layer.name}.{p}" for p in _ATTN_PARTS)
        return names

    @property
    def input_dim(self) -> int:
        for layer in self.layers:
            if layer.kind in ("linear", "attention"):
                return layer.in_dim
        raise ValueError("model has no weighted layers")

    @property
    def output_dim(self) -> int:
        for layer in reversed(self.layers):
            if layer.kind in ("linear", "attention"):
                return layer.out_dim
        raise ValueError("model has no weighted layers")

    def has_attention(self) -> bool:
        return any(l.kind == "attention" for l in self.layers)

    def validate(self) -> None:
        dim = None
        for layer in self.layers:
            if layer.kind == "activation":
                continue
            if dim is not None and layer.in_dim != dim:
                raise ValueError(f"layer {layer.name!r} expects {layer.in_dim} "
                                 f"inputs but receives {dim}")
            dim = layer.out_dim
            names = ([layer.name] if layer.kind == "linear"
                     else [f"{layer.name}.{p}" for p in _ATTN_PARTS])
            for nm in names:
                w = self.weights.get(nm)
                if w is None:
                    raise ValueError(f"missing weight matrix {nm!r}")
                if nm not in self.biases:
                    raise ValueError(f"missing bias vector {nm!r}")
                rows = layer.in_dim if layer.kind == "linear" else layer.in_dim
                if w.shape != (rows, layer.out_dim):
                    raise ValueError(f"weight {nm!r} has shape {w.shape}, "
                                     f"expected {(rows, layer.out_dim)}")
                if self.biases[nm].shape != (layer.out_dim,):
                    raise ValueError(f"bias {nm!r} has wrong length")


def _activation(kind, x):
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def _forward_trace(model: ModelBundle, x: np.ndarray):
    """Run the stack, returning the output and a per-layer cache."""
    trace = []
    h = x
    for layer in model.layers:
        if layer.kind == "linear":
            w = model.weights[layer.name]
            h_next = h @ w + model.biases[layer.name]
            trace.append((layer, {"x": h}))
            h = h_next
        elif layer.kind == "activation":
            if layer.activation == "tanh":
                y = np.tanh(h)
                trace.append((layer, {"y": y}))
            else:
                trace.append((layer, {"x": h}))
                y = _activation(layer.activation, h)
            h = y
        else:  # attention
            nm = layer.name
            wq, wk, wv, wo = (model.weights[f"{nm}.{p}"] for p in _ATTN_PARTS)
            bq, bk, bv, bo = (model.biases[f"{nm}.{p}"] for p in _ATTN_PARTS)
            q = h @ wq + bq
            k = h @ wk + bk
            v = h @ wv + bv
            scores = (q @ k.T) / np.sqrt(layer.out_dim)
            scores = scores - scores.max(axis=1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=1, keepdims=True)
            mixed = attn @ v
            out = mixed @ wo + bo
            trace.append((layer, {"x": h, "q": q, "k": k, "v": v,
                                  "attn": attn, "mixed": mixed}))
            h = out
    return h, trace


def forward(model: ModelBundle, x):
    """Evaluate the model on a batch of row vectors.

    Returns (output, layer_inputs) where layer_inputs maps each weight
    matrix name to the exact input that matrix saw, which is what the
    running input means are accumulated from.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected "
                         f"(*, {model.input_dim})")
    z, trace = _forward_trace(model, x)
    inputs = {}
    for layer, cache in trace:
        if layer.kind == "linear":
            inputs[layer.name] = cache["x"]
        elif layer.kind == "attention":
            for p in ("q", "k", "v"):
                inputs[f"{layer.name}.{p}"] = cache["x"]
            inputs[f"{layer.name}.o"] = cache["mixed"]
    return z, inputs


def _seed_gradient(z_shape, row, coeff):
    rows, out_dim = z_shape
    if not 0 <= row < rows:
        raise ValueError(f"row {row} out of range for {rows} rows")
    g = np.zeros(z_shape)
    if np.ndim(coeff) == 0:
        j = int(coeff)
        if not 0 <= j < out_dim:
            raise ValueError(f"coefficient {j} out of range for {out_dim} outputs")
        g[row, j] = 1.0
    else:
        direction = np.asarray(coeff, dtype=np.float64)
        if direction.shape != (out_dim,):
            raise ValueError("projection vector has the wrong length")
        g[row, :] = direction
    return g


def backward(model: ModelBundle, x, row, coeff):
    """Gradient of one output scalar with respect to every weight matrix.

    The scalar is z[row, coeff] when ``coeff`` is an integer index, or
    z[row] @ coeff when ``coeff`` is a projection vector (one column of a
    PCA basis, in the calibration loop). Returns a dict mapping weight names
    to gradient arrays of the same shape as the weights.
    """
    x = np.asarray(x, dtype=np.float64)
    z, trace = _forward_trace(model, x)
    g = _seed_gradient(z.shape, row, coeff)
    grads = {}
    for layer, cache in reversed(trace):
        if layer.kind == "linear":
            grads[layer.name] = cache["x"].T @ g
            g = g @ model.weights[layer.name].T
        elif layer.kind == "activation":
            if layer.activation == "tanh":
                g = g * (1.0 - cache["y"] ** 2)
            else:  # relu; gradient at the kink is taken as zero
                g = g * (cache["x"] > 0)
        else:
            nm = layer.name
            wq, wk, wv, wo = (model.weights[f"{nm}.{p}"] for p in _ATTN_PARTS)
            xin, q, k, v = cache["x"], cache["q"], cache["k"], cache["v"]
            attn, mixed = cache["attn"], cache["mixed"]
            grads[f"{nm}.o"] = mixed.T @ g
            d_mixed = g @ wo.T
            d_attn = d_mixed @ v.T
            d_v = attn.T @ d_mixed
            d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
            d_scores = d_scores / np.sqrt(layer.out_dim)
            d_q = d_scores @ k
            d_k = d_scores.T @ q
            grads[f"{nm}.q"] = xin.T @ d_q
            grads[f"{nm}.k"] = xin.T @ d_k
            grads[f"{nm}.v"] = xin.T @ d_v
            g = d_q @ wq.T + d_k @ wk.T + d_v @ wv.T
    return grads


def sum_squared_gradients(model: ModelBundle, x, rows, direction):
    """Sum over selected rows of the squared per-row scalar gradients.

    Equivalent to calling :func:`backward` once per row with the same
    projection vector and summing the squares, but vectorized for stacks
    whose rows do not interact (linear plus elementwise activations). An
    attention block mixes rows, so those models fall back to the per-row
    loop.
    """
    x = np.asarray(x, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.int64)
    if model.has_attention():
        total = {}
        for r in rows:
            for nm, g in backward(model, x, int(r), direction).items():
                if nm in total:
                    total[nm] += g ** 2
                else:
                    total[nm] = g ** 2
        return total

    z, trace = _forward_trace(model, x)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (z.shape[1],):
        raise ValueError("projection vector has the wrong length")
    delta = np.zeros_like(z)
    delta[rows, :] = direction
    total = {}
    for layer, cache in reversed(trace):
        if layer.kind == "linear":
            # per-row gradient is the outer product x_r^T d_r, so the sum of
            # its square over rows is (x*x)^T (d*d)
            total[layer.name] = (cache["x"] ** 2).T @ (delta ** 2)
            delta = delta @ model.weights[layer.name].T
        else:
            if layer.activation == "tanh":
                delta = delta * (1.0 - cache["y"] ** 2)
            else:
                delta = delta * (cache["x"] > 0)
    return total


def substitute(model: ModelBundle, weights=None, biases=None,
               provenance="quantized") -> ModelBundle:
    """New bundle with some weights/biases replaced; nothing is aliased.

    The source bundle is left untouched and the result holds copies of
    every array, so later mutation of either side cannot leak across.
    """
    weights = weights or {}
    biases = biases or {}
    for nm, w in weights.items():
        if nm not in model.weights:
            raise ValueError(f"unknown weight matrix {nm!r}")
        if np.shape(w) != model.weights[nm].shape:
            raise ValueError(f"weight {nm!r}: shape {np.shape(w)} does not "
                             f"match {model.weights[nm].shape}")
    for nm, b in biases.items():
        if nm not in model.biases:
            raise ValueError(f"unknown bias vector {nm!r}")
        if np.shape(b) != model.biases[nm].shape:
            raise ValueError(f"bias {nm!r} has the wrong shape")
    new_weights = {nm: np.array(weights.get(nm, w), dtype=np.float64)
                   for nm, w in model.weights.items()}
    new_biases = {nm: np.array(biases.get(nm, b), dtype=np.float64)
                  for nm, b in model.biases.items()}
    return ModelBundle(layers=list(model.layers), weights=new_weights,
                       biases=new_biases, provenance=provenance)


def _as_f32_exact(arr):
    # keep values exactly float32-representable so bundles round-trip
    # bit for bit through the on-disk f32 format
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def build_mlp(widths=(64, 64, 64, 64), seed=0, activation="tanh",
              weight_dist="laplace", col_spread=1.5, row_spread=1.0) -> ModelBundle:
    """Seeded MLP whose weight scales vary per column and per row.

    Transformer weight matrices are light tailed with strong per-channel
    scale variation, which is what makes mixed bit depths pay off; the
    spread factors reproduce that texture at desk scale. Spread 0 gives
    plain iid weights.
    """
    if len(widths) < 2:
        raise ValueError("need at least one linear layer")
    src = RandomSource(seed)
    layers, weights, biases = [], {}, {}
    n_linear = len(widths) - 1
    for i, (din, dout) in enumerate(zip(widths[:-1], widths[1:])):
        name = f"fc{i}"
        base = 1.0 / np.sqrt(din)
        col_fac = 2.0 ** src.uniform(-col_spread, col_spread, dout)
        row_fac = 2.0 ** src.uniform(-row_spread, row_spread, din)
        if weight_dist == "laplace":
            raw = src.laplace(0.0, 1.0, (din, dout))
        elif weight_dist == "gaussian":
            raw = src.gaussian(0.0, 1.0, (din, dout))
        else:
            raise ValueError(f"unknown weight distribution {weight_dist!r}")
        weights[name] = _as_f32_exact(raw * base * np.outer(row_fac, col_fac))
        biases[name] = _as_f32_exact(src.gaussian(0.0, 0.01, dout))
        layers.append(LayerSpec("linear", name, din, dout))
        if i < n_linear - 1:
            layers.append(LayerSpec("activation", activation=activation))
    model = ModelBundle(layers=layers, weights=weights, biases=biases)
    model.validate()
    return model


def build_attention_model(dim=8, seed=0) -> ModelBundle:
    """Single-head attention block followed by tanh and a linear head."""
    src = RandomSource(seed)
    layers = [LayerSpec("attention", "attn0", dim, dim),
              LayerSpec("activation"),
              LayerSpec("linear", "fc1", dim, dim)]
    weights, biases = {}, {}
    base = 1.0 / np.sqrt(dim)
    for part in _ATTN_PARTS:
        weights[f"attn0.{part}"] = _as_f32_exact(src.gaussian(0.0, base, (dim, dim)))
        biases[f"attn0.{part}"] = np.zeros(dim)
    weights["fc1"] = _as_f32_exact(src.gaussian(0.0, base, (dim, dim)))
    biases["fc1"] = _as_f32_exact(src.gaussian(0.0, 0.01, dim))
    model = ModelBundle(layers=layers, weights=weights, biases=biases)
    model.validate()
    return model


def build_calibration(dim, batches=16, rows=64, seed=1, mean_scale=0.5):
    """Calibration batches sharing a common nonzero mean.

    The offset makes layer outputs systematically biased under quantization,
    which is exactly the effect the bias correction is there to cancel.
    """
    src = RandomSource(seed)
    base = src.gaussian(0.0, 1.0, dim) * mean_scale
    return [_as_f32_exact(base + src.gaussian(0.0, 1.0, (rows, dim)))
            for _ in range(batches)]
