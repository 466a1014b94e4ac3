"""Bit-exact binary file formats.

Two little-endian container formats, both versioned:

Model bundle, magic ``CVXQM1``:

    magic[6] version:u16
    n_matrices:u32
      per matrix: name_len:u16 name:utf8 rows:u32 cols:u32 dtype:u8(0=f32)
                  payload: rows*cols float32, row major
    n_biases:u32
      per bias: name_len:u16 name:utf8 length:u32 payload: float32

Quantized bundle, magic ``CVXQQ1``:

    magic[6] version:u16
    n_matrices:u32
      per matrix: name_len:u16 name:utf8 rows:u32 cols:u32
                  n_ranges:u32 (end_col:u32 per range, ascending)
                  n_clusters:u16
                  row cluster indices: rows * ceil(log2 n_clusters) bits,
                      MSB first, padded to a byte boundary (absent when
                      n_clusters == 1)
                  per group, range major then cluster:
                      bits:u8 scale:f16 mean:f16
                      codes: count * bits bits, MSB first, padded to a byte
    n_biases:u32
      per bias: name_len:u16 name:utf8 length:u32 payload: float32

A quantized file decodes without the original bundle. Model topology is
carried by a naming convention: weight names with ``.q/.k/.v/.o`` suffixes
form a single-head attention block, anything else is a linear layer, and a
tanh activation sits between consecutive blocks.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .calib import CvxqResult
from .netmodel import LayerSpec, ModelBundle
from .quant import compander_inverse

__all__ = [
    "FormatError",
    "BUNDLE_MAGIC",
    "QUANT_MAGIC",
    "write_bundle",
    "read_bundle",
    "write_quant",
    "read_quant",
    "write_calibration",
    "read_calibration",
    "expected_quant_size",
    "pack_bits",
    "unpack_bits",
    "f16_bits",
    "f16_value",
    "QuantFileContent",
    "QuantMatrixMeta",
]

BUNDLE_MAGIC = b"CVXQM1"
QUANT_MAGIC = b"CVXQQ1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed input file; carries the byte offset of the problem."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"byte offset {offset}: {message}")
        self.offset = offset


def f16_bits(x: float) -> int:
    """IEEE binary16 bit pattern (round to nearest even) of a float."""
    return int(np.asarray(np.float16(x)).view(np.uint16)[()])


def f16_value(bits: int) -> float:
    return float(np.asarray(np.uint16(bits)).view(np.float16)[()])


def pack_bits(values, width: int) -> bytes:
    """Pack unsigned ints MSB-first at a fixed width, padded to whole bytes."""
    if width < 0 or width > 32:
        raise ValueError("width must lie in [0, 32]")
    if width == 0:
        return b""
    out = bytearray()
    acc = 0
    nbits = 0
    for v in np.asarray(values).ravel():
        acc = (acc << width) | (int(v) & ((1 << width) - 1))
        nbits += width
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
            acc &= (1 << nbits) - 1
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return bytes(out)


def unpack_bits(data: bytes, width: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_bits` for ``count`` values."""
    if width == 0:
        return np.zeros(count, dtype=np.int64)
    out = np.empty(count, dtype=np.int64)
    acc = 0
    nbits = 0
    pos = 0
    for i in range(count):
        while nbits < width:
            if pos >= len(data):
                raise ValueError("bit stream exhausted")
            acc = (acc << 8) | data[pos]
            pos += 1
            nbits += 8
        nbits -= width
        out[i] = (acc >> nbits) & ((1 << width) - 1)
        acc &= (1 << nbits) - 1
    return out


def _packed_len(count: int, width: int) -> int:
    return (count * width + 7) // 8 if width else 0


def _index_width(n_clusters: int) -> int:
    return math.ceil(math.log2(n_clusters)) if n_clusters > 1 else 0


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def raw(self, data: bytes):
        self.buf += data

    def u8(self, v):
        self.buf += struct.pack("<B", v)

    def u16(self, v):
        self.buf += struct.pack("<H", v)

    def u32(self, v):
        self.buf += struct.pack("<I", v)

    def name(self, text: str):
        enc = text.encode("utf-8")
        self.u16(len(enc))
        self.raw(enc)

    def f32_array(self, arr):
        self.raw(np.asarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(self.pos, f"truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def name(self, what):
        ln = self.u16(f"{what} length")
        start = self.pos
        try:
            return self.take(ln, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(start, f"{what} is not valid UTF-8") from exc

    def f32_array(self, count, what):
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(self.pos, "trailing bytes after payload")


def _layers_from_names(names, shapes):
    """Rebuild the layer stack from weight names and shapes.

    ``.q/.k/.v/.o`` suffixed quadruples become one attention block; other
    names become linear layers; tanh activations separate blocks.
    """
    blocks = []
    i = 0
    while i < len(names):
        nm = names[i]
        if nm.endswith(".q"):
            prefix = nm[:-2]
            expected = [f"{prefix}.{p}" for p in ("q", "k", "v", "o")]
            if names[i:i + 4] != expected:
                raise ValueError(f"attention block {prefix!r} is incomplete")
            dim = shapes[nm][0]
            for part in expected:
                if shapes[part] != (dim, dim):
                    raise ValueError(f"attention matrix {part!r} is not square")
            blocks.append(LayerSpec("attention", prefix, dim, dim))
            i += 4
        else:
            rows, cols = shapes[nm]
            blocks.append(LayerSpec("linear", nm, rows, cols))
            i += 1
    layers = []
    for j, block in enumerate(blocks):
        layers.append(block)
        if j < len(blocks) - 1:
            layers.append(LayerSpec("activation"))
    return layers


def write_bundle(path, model: ModelBundle) -> None:
    w = _Writer()
    w.raw(BUNDLE_MAGIC)
    w.u16(FORMAT_VERSION)
    names = model.weight_names()
    w.u32(len(names))
    for nm in names:
        mat = model.weights[nm]
        w.name(nm)
        w.u32(mat.shape[0])
        w.u32(mat.shape[1])
        w.u8(0)  # dtype tag: float32
        w.f32_array(mat)
    w.u32(len(names))
    for nm in names:
        vec = model.biases[nm]
        w.name(nm)
        w.u32(vec.shape[0])
        w.f32_array(vec)
    with open(path, "wb") as fh:
        fh.write(bytes(w.buf))


def read_bundle(path) -> ModelBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(6, "magic") != BUNDLE_MAGIC:
        raise FormatError(0, "bad magic, not a model bundle")
    version = r.u16("version")
    if version != FORMAT_VERSION:
        raise FormatError(6, f"unsupported version {version}")
    n_matrices = r.u32("matrix count")
    names, weights = [], {}
    for _ in range(n_matrices):
        nm = r.name("matrix name")
        rows = r.u32("rows")
        cols = r.u32("cols")
        tag_at = r.pos
        tag = r.u8("dtype tag")
        if tag != 0:
            raise FormatError(tag_at, f"unknown dtype tag {tag}")
        weights[nm] = r.f32_array(rows * cols, f"matrix {nm!r}").reshape(rows, cols)
        names.append(nm)
    n_biases = r.u32("bias count")
    biases = {}
    for _ in range(n_biases):
        nm = r.name("bias name")
        length = r.u32("bias length")
        biases[nm] = r.f32_array(length, f"bias {nm!r}")
    r.done()
    shapes = {nm: weights[nm].shape for nm in names}
    try:
        layers = _layers_from_names(names, shapes)
        model = ModelBundle(layers=layers, weights=weights, biases=biases)
        model.validate()
    except ValueError as exc:
        raise FormatError(len(data), str(exc)) from exc
    return model


@dataclass(frozen=True)
class QuantMatrixMeta:
    name: str
    rows: int
    cols: int
    ranges: tuple
    n_clusters: int
    clusters: np.ndarray
    groups: list  # (bits, scale, mean, count) per group, range major


@dataclass
class QuantFileContent:
    model: ModelBundle
    matrices: dict[str, QuantMatrixMeta]

    @property
    def avg_bits(self) -> float:
        total = payload = 0
        for meta in self.matrices.values():
            for bits, _, _, count in meta.groups:
                payload += bits * count
                total += count
        return payload / total if total else 0.0


def write_quant(path, result: CvxqResult) -> None:
    model = result.model
    by_matrix: dict[str, list] = {}
    for code in result.group_codes:
        by_matrix.setdefault(code.name, []).append(code)

    w = _Writer()
    w.raw(QUANT_MAGIC)
    w.u16(FORMAT_VERSION)
    names = model.weight_names()
    w.u32(len(names))
    for nm in names:
        grouping = result.grouping[nm]
        rows, cols = grouping.shape
        w.name(nm)
        w.u32(rows)
        w.u32(cols)
        w.u32(len(grouping.ranges))
        for _, end in grouping.ranges:
            w.u32(end)
        w.u16(grouping.n_clusters)
        width = _index_width(grouping.n_clusters)
        if width:
            w.raw(pack_bits(grouping.clusters, width))
        codes = sorted(by_matrix[nm],
                       key=lambda c: (c.range_index, c.cluster_index))
        for code in codes:
            w.u8(code.bits)
            w.u16(f16_bits(code.scale))
            w.u16(f16_bits(code.mean))
            if code.bits:
                w.raw(pack_bits(code.codes, code.bits))
    w.u32(len(names))
    for nm in names:
        vec = model.biases[nm]
        w.name(nm)
        w.u32(vec.shape[0])
        w.f32_array(vec)
    with open(path, "wb") as fh:
        fh.write(bytes(w.buf))


def read_quant(path) -> QuantFileContent:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(6, "magic") != QUANT_MAGIC:
        raise FormatError(0, "bad magic, not a quantized bundle")
    version = r.u16("version")
    if version != FORMAT_VERSION:
        raise FormatError(6, f"unsupported version {version}")
    n_matrices = r.u32("matrix count")
    names, weights, metas = [], {}, {}
    total_payload = 0.0
    total_count = 0
    for _ in range(n_matrices):
        nm = r.name("matrix name")
        rows = r.u32("rows")
        cols = r.u32("cols")
        n_ranges = r.u32("range count")
        ends = [r.u32("range end") for _ in range(n_ranges)]
        starts = [0] + ends[:-1]
        if n_ranges == 0 or ends[-1] != cols or any(s >= e for s, e in zip(starts, ends)):
            raise FormatError(r.pos, f"invalid column ranges for {nm!r}")
        ranges = tuple(zip(starts, ends))
        n_clusters = r.u16("cluster count")
        if not 1 <= n_clusters <= max(rows, 1):
            raise FormatError(r.pos, f"invalid cluster count for {nm!r}")
        width = _index_width(n_clusters)
        if width:
            packed = r.take(_packed_len(rows, width), "row cluster indices")
            clusters = unpack_bits(packed, width, rows)
            if clusters.max(initial=0) >= n_clusters:
                raise FormatError(r.pos, f"row cluster index out of range in {nm!r}")
        else:
            clusters = np.zeros(rows, dtype=np.int64)
        mat = np.empty((rows, cols))
        groups = []
        for c0, c1 in ranges:
            for m in range(n_clusters):
                member_rows = np.flatnonzero(clusters == m)
                count = member_rows.size * (c1 - c0)
                bits_at = r.pos
                bits = r.u8("group bit depth")
                scale = f16_value(r.u16("group scale"))
                mean = f16_value(r.u16("group mean"))
                if scale <= 0:
                    raise FormatError(bits_at, f"non-positive scale in {nm!r}")
                if bits:
                    packed = r.take(_packed_len(count, bits), "group codes")
                    codes = unpack_bits(packed, bits, count)
                    if codes.max(initial=0) >= 2 ** bits:
                        raise FormatError(bits_at, f"code out of range in {nm!r}")
                    values = compander_inverse(
                        (codes + 0.5) * 2.0 ** -bits, scale, mean)
                else:
                    values = np.full(count, mean)
                mat[np.ix_(member_rows, np.arange(c0, c1))] = \
                    values.reshape(member_rows.size, c1 - c0)
                groups.append((bits, scale, mean, count))
                total_payload += bits * count
                total_count += count
        weights[nm] = mat
        names.append(nm)
        metas[nm] = QuantMatrixMeta(name=nm, rows=rows, cols=cols,
                                    ranges=ranges, n_clusters=n_clusters,
                                    clusters=clusters, groups=groups)
    n_biases = r.u32("bias count")
    biases = {}
    for _ in range(n_biases):
        nm = r.name("bias name")
        length = r.u32("bias length")
        biases[nm] = r.f32_array(length, f"bias {nm!r}")
    r.done()
    shapes = {nm: weights[nm].shape for nm in names}
    avg = total_payload / total_count if total_count else 0.0
    try:
        layers = _layers_from_names(names, shapes)
        model = ModelBundle(layers=layers, weights=weights, biases=biases,
                            provenance=f"quantized(avg_bits={avg:.3f})")
        model.validate()
    except ValueError as exc:
        raise FormatError(len(data), str(exc)) from exc
    return QuantFileContent(model=model, matrices=metas)


def write_calibration(path, batches) -> None:
    """Store calibration batches in the bundle container (no topology).

    Batches are written as matrices named batch0000, batch0001, ... with an
    empty bias section; read them back with :func:`read_calibration`, not
    :func:`read_bundle`.
    """
    w = _Writer()
    w.raw(BUNDLE_MAGIC)
    w.u16(FORMAT_VERSION)
    w.u32(len(batches))
    for i, batch in enumerate(batches):
        arr = np.asarray(batch, dtype=np.float64)
        w.name(f"batch{i:04d}")
        w.u32(arr.shape[0])
        w.u32(arr.shape[1])
        w.u8(0)
        w.f32_array(arr)
    w.u32(0)
    with open(path, "wb") as fh:
        fh.write(bytes(w.buf))


def read_calibration(path) -> list[np.ndarray]:
    """Read a matrix container as a list of batches, ignoring topology."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(6, "magic") != BUNDLE_MAGIC:
        raise FormatError(0, "bad magic, not a calibration container")
    version = r.u16("version")
    if version != FORMAT_VERSION:
        raise FormatError(6, f"unsupported version {version}")
    n = r.u32("batch count")
    if n == 0:
        raise FormatError(r.pos, "calibration container is empty")
    batches = []
    for _ in range(n):
        nm = r.name("batch name")
        rows = r.u32("rows")
        cols = r.u32("cols")
        tag_at = r.pos
        tag = r.u8("dtype tag")
        if tag != 0:
            raise FormatError(tag_at, f"unknown dtype tag {tag}")
        batches.append(r.f32_array(rows * cols, f"batch {nm!r}").reshape(rows, cols))
    n_biases = r.u32("bias count")
    for _ in range(n_biases):
        nm = r.name("bias name")
        length = r.u32("bias length")
        r.f32_array(length, f"bias {nm!r}")
    r.done()
    if len({b.shape[1] for b in batches}) != 1:
        raise FormatError(len(data), "batches disagree on embedding width")
    return batches


def expected_quant_size(result: CvxqResult) -> int:
    """Analytic byte size of the quantized file for a driver result.

    Header and per-matrix descriptors, one byte of bit depth plus two
    float16 parameters per group, the packed per-row cluster indices, and
    each group's payload padded to a byte boundary. The writer must produce
    exactly this many bytes.
    """
    size = 6 + 2 + 4  # magic, version, matrix count
    by_matrix: dict[str, list] = {}
    for code in result.group_codes:
        by_matrix.setdefault(code.name, []).append(code)
    for nm in result.model.weight_names():
        grouping = result.grouping[nm]
        rows, _ = grouping.shape
        size += 2 + len(nm.encode("utf-8")) + 4 + 4
        size += 4 + 4 * len(grouping.ranges)
        size += 2
        size += _packed_len(rows, _index_width(grouping.n_clusters))
        for code in by_matrix[nm]:
            size += 1 + 2 + 2
            size += _packed_len(code.codes.size, code.bits)
    size += 4  # bias count
    for nm in result.model.weight_names():
        size += 2 + len(nm.encode("utf-8")) + 4 + 4 * result.model.biases[nm].size
    return size
