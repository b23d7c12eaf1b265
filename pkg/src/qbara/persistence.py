"""Binary formats for quantized matrices, adapters and checkpoints; CSV output.

Every record starts with a 7-byte header: magic ``b"QBRA"``, version (u16)
and record kind (u8). All integers and floats are little-endian and there is
no padding.

Quantized matrix (kind 1)::

    rows u32, cols u32, tile_rows u16, tile_cols u16, bits u8, mode u8,
    alpha f32[n_tiles], beta f32[n_tiles], packed codes

Adapters (kind 2 LoRA, 3 BaRA, 4 HiRA)::

    d_in u32, d_out u32, lambda_in u32, lambda_out u32, rank u32,
    scaling f64, operator u8, then factor matrices as f64 row-major
    (A then B; or C for HiRA, whose rank field is 0)

Checkpoint (kind 5)::

    n_layers u32, widths u32[n_layers + 1], activation u8, then per layer:
    quantized record, has_bias u8, [bias_trainable u8, bias f64[d_out]],
    has_adapter u8, [adapter record]

Alpha and beta live in memory as float64 and are rounded to float32 here.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from typing import BinaryIO, Iterable

import numpy as np

from .adapters import BaraAdapter, HiraAdapter, LoraAdapter, ScaleOperator
from .errors import FormatError, QbaraError
from .model import ACTIVATIONS, Model, QuantizedLinear
from .quantizer import ALLOWED_BITS, QuantConfig, QuantizedMatrix, QuantMode, packed_size

MAGIC = b"QBRA"
VERSION = 1
HEADER = struct.Struct("<4sHB")

KIND_QUANTIZED = 1
KIND_LORA = 2
KIND_BARA = 3
KIND_HIRA = 4
KIND_CHECKPOINT = 5

_QUANT_GEOMETRY = struct.Struct("<IIHHBB")
_ADAPTER_GEOMETRY = struct.Struct("<IIIIIdB")
_ADAPTER_KINDS = {LoraAdapter: KIND_LORA, BaraAdapter: KIND_BARA, HiraAdapter: KIND_HIRA}


class _Reader:
    """Cursor over a byte buffer that reports the offset of truncations."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what} at offset {self.pos}: need {n} bytes, "
                              f"{len(self.data) - self.pos} left")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size, what), dtype=dtype).astype(np.float64)

    def header(self, kinds) -> int:
        magic, version, kind = self.unpack(HEADER, "header")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset {self.pos - HEADER.size}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        if kind not in kinds:
            raise FormatError(f"unexpected record kind {kind} at offset {self.pos - 1}")
        return kind

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes at offset {self.pos}")


def _header(kind: int) -> bytes:
    return HEADER.pack(MAGIC, VERSION, kind)


def _f64(m: np.ndarray) -> bytes:
    return np.ascontiguousarray(m, dtype="<f8").tobytes()


# -- quantized matrices ------------------------------------------------------

def quantized_to_bytes(q: QuantizedMatrix) -> bytes:
    cfg = q.config
    with np.errstate(over="ignore"):
        alphas, betas = q.alphas.astype("<f4"), q.betas.astype("<f4")
    if not (np.isfinite(alphas).all() and np.isfinite(betas).all()):
        raise FormatError("alpha/beta values overflow float32 storage")
    return b"".join([
        _header(KIND_QUANTIZED),
        _QUANT_GEOMETRY.pack(q.rows, q.cols, cfg.tile_rows, cfg.tile_cols, cfg.bits, int(cfg.mode)),
        alphas.tobytes(),
        betas.tobytes(),
        q.codes,
    ])


def _read_quantized(r: _Reader) -> QuantizedMatrix:
    r.header({KIND_QUANTIZED})
    rows, cols, tr, tc, bits, mode = r.unpack(_QUANT_GEOMETRY, "quantized geometry")
    if bits not in ALLOWED_BITS or mode not in (0, 1) or 0 in (rows, cols, tr, tc) or rows % tr or cols % tc:
        raise FormatError(f"invalid quantized geometry {rows}x{cols} tile {tr}x{tc} bits {bits} mode {mode}")
    n_tiles = (rows // tr) * (cols // tc)
    alphas = r.array("<f4", n_tiles, "alphas")
    betas = r.array("<f4", n_tiles, "betas")
    codes = r.take(packed_size(rows * cols, bits), "codes")
    try:
        return QuantizedMatrix(rows, cols, QuantConfig(bits, tr, tc, QuantMode(mode)), codes, alphas, betas)
    except QbaraError as exc:
        raise FormatError(f"invalid quantized record: {exc}") from exc


def quantized_from_bytes(data: bytes) -> QuantizedMatrix:
    r = _Reader(data)
    q = _read_quantized(r)
    r.finish()
    return q


# -- adapters ----------------------------------------------------------------

def adapter_to_bytes(a) -> bytes:
    kind = _ADAPTER_KINDS[type(a)]
    if isinstance(a, LoraAdapter):
        geometry = (a.d_in, a.d_out, 1, 1, a.rank, a.scaling, 0)
        mats = (a.a, a.b)
    elif isinstance(a, BaraAdapter):
        geometry = (a.d_in, a.d_out, a.lambda_in, a.lambda_out, a.rank, a.scaling, int(a.operator))
        mats = (a.a, a.b)
    else:
        geometry = (a.d_in, a.d_out, a.lambda_in, a.lambda_out, 0, a.scaling, int(a.operator))
        mats = (a.c,)
    return _header(kind) + _ADAPTER_GEOMETRY.pack(*geometry) + b"".join(_f64(m) for m in mats)


def _read_adapter(r: _Reader):
    kind = r.header({KIND_LORA, KIND_BARA, KIND_HIRA})
    d_in, d_out, lam_in, lam_out, rank, scaling, op = r.unpack(_ADAPTER_GEOMETRY, "adapter geometry")
    if op not in (0, 1, 2):
        raise FormatError(f"unknown operator byte {op}")
    if not math.isfinite(scaling):
        raise FormatError("adapter scaling is not finite")
    if 0 in (d_in, d_out, lam_in, lam_out) or d_in % lam_in or d_out % lam_out:
        raise FormatError(f"invalid adapter geometry {d_in}->{d_out} lambdas ({lam_in}, {lam_out})")
    if kind != KIND_HIRA and rank == 0:
        raise FormatError("adapter rank must be positive")
    n_in, n_out = d_in // lam_in, d_out // lam_out

    def matrix(rows, cols, what):
        m = r.array("<f8", rows * cols, what).reshape(rows, cols)
        if not np.isfinite(m).all():
            raise FormatError(f"{what} contains non-finite values")
        return m

    try:
        if kind == KIND_LORA:
            if (lam_in, lam_out, op) != (1, 1, 0):
                raise FormatError("LoRA records must have unit lambdas and operator 0")
            return LoraAdapter(matrix(d_in, rank, "A"), matrix(rank, d_out, "B"), scaling)
        if kind == KIND_BARA:
            return BaraAdapter(d_in, d_out, lam_in, lam_out, matrix(n_in, rank, "A"),
                               matrix(rank, n_out, "B"), scaling, ScaleOperator(op))
        if rank != 0:
            raise FormatError("HiRA records carry rank 0")
        return HiraAdapter(d_in, d_out, lam_in, lam_out, matrix(n_in, n_out, "C"), scaling, ScaleOperator(op))
    except FormatError:
        raise
    except QbaraError as exc:
        raise FormatError(f"invalid adapter record: {exc}") from exc


def adapter_from_bytes(data: bytes):
    r = _Reader(data)
    a = _read_adapter(r)
    r.finish()
    return a


# -- checkpoints -------------------------------------------------------------

def checkpoint_to_bytes(model: Model) -> bytes:
    widths = model.widths
    parts = [_header(KIND_CHECKPOINT),
             struct.pack(f"<I{len(widths)}IB", len(model.layers), *widths, ACTIVATIONS.index(model.activation))]
    for layer in model.layers:
        parts.append(quantized_to_bytes(layer.base))
        if layer.bias is None:
            parts.append(b"\x00")
        else:
            parts.append(struct.pack("<BB", 1, int(layer.bias_trainable)) + _f64(layer.bias))
        if layer.adapter is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01" + adapter_to_bytes(layer.adapter))
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Model:
    r = _Reader(data)
    r.header({KIND_CHECKPOINT})
    (n_layers,) = r.unpack(struct.Struct("<I"), "layer count")
    if n_layers == 0:
        raise FormatError("checkpoint has no layers")
    widths = list(r.unpack(struct.Struct(f"<{n_layers + 1}I"), "widths"))
    (act,) = r.unpack(struct.Struct("<B"), "activation")
    if act >= len(ACTIVATIONS):
        raise FormatError(f"unknown activation byte {act}")
    layers = []
    flag = struct.Struct("<B")
    for i in range(n_layers):
        base = _read_quantized(r)
        if (base.rows, base.cols) != (widths[i], widths[i + 1]):
            raise FormatError(f"layer {i} is {base.rows}x{base.cols} but widths say "
                              f"{widths[i]}x{widths[i + 1]}")
        bias, trainable = None, False
        (has_bias,) = r.unpack(flag, "bias flag")
        if has_bias not in (0, 1):
            raise FormatError(f"bad bias flag {has_bias} at offset {r.pos - 1}")
        if has_bias:
            (trainable,) = r.unpack(flag, "bias trainable flag")
            bias = r.array("<f8", base.cols, "bias").reshape(1, -1)
            if trainable not in (0, 1) or not np.isfinite(bias).all():
                raise FormatError(f"invalid bias record for layer {i}")
        (has_adapter,) = r.unpack(flag, "adapter flag")
        if has_adapter not in (0, 1):
            raise FormatError(f"bad adapter flag {has_adapter} at offset {r.pos - 1}")
        adapter = _read_adapter(r) if has_adapter else None
        try:
            layers.append(QuantizedLinear(base, adapter, bias, bool(trainable)))
        except QbaraError as exc:
            raise FormatError(f"layer {i}: {exc}") from exc
    r.finish()
    return Model(layers, ACTIVATIONS[act])


# -- file helpers ------------------------------------------------------------

def _write(data: bytes, sink):
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        with open(sink, "wb") as fh:
            fh.write(data)


def _read(source) -> bytes:
    if hasattr(source, "read"):
        return source.read()
    with open(source, "rb") as fh:
        return fh.read()


def save_quantized(q: QuantizedMatrix, sink: str | BinaryIO):
    _write(quantized_to_bytes(q), sink)


def load_quantized(source: str | BinaryIO) -> QuantizedMatrix:
    return quantized_from_bytes(_read(source))


def save_adapter(a, sink: str | BinaryIO):
    _write(adapter_to_bytes(a), sink)


def load_adapter(source: str | BinaryIO):
    return adapter_from_bytes(_read(source))


def save_checkpoint(model: Model, sink: str | BinaryIO):
    _write(checkpoint_to_bytes(model), sink)


def load_checkpoint(source: str | BinaryIO) -> Model:
    return checkpoint_from_bytes(_read(source))


# -- raw matrices ------------------------------------------------------------

def raw_matrix_to_bytes(m: np.ndarray) -> bytes:
    """``rows u32, cols u32`` followed by float64 row-major data."""
    rows, cols = m.shape
    return struct.pack("<II", rows, cols) + _f64(m)


def read_raw_matrix(r: _Reader) -> np.ndarray:
    rows, cols = r.unpack(struct.Struct("<II"), "matrix dims")
    if rows == 0 or cols == 0:
        raise FormatError(f"matrix dims must be positive, got {rows}x{cols}")
    m = r.array("<f8", rows * cols, "matrix data").reshape(rows, cols)
    if not np.isfinite(m).all():
        raise FormatError("matrix contains non-finite values")
    return m


def save_raw_matrix(m: np.ndarray, sink):
    _write(raw_matrix_to_bytes(m), sink)


def load_raw_matrix(source) -> np.ndarray:
    r = _Reader(_read(source))
    m = read_raw_matrix(r)
    r.finish()
    return m


def save_dense_bundle(weights: list[np.ndarray], biases: list[np.ndarray | None], activation: str, sink):
    """Merged full-precision model: count u32, activation u8, then per layer a
    raw weight matrix, has_bias u8 and an optional raw 1 x d_out bias."""
    parts = [struct.pack("<IB", len(weights), ACTIVATIONS.index(activation))]
    for w, b in zip(weights, biases):
        parts.append(raw_matrix_to_bytes(w))
        parts.append(b"\x00" if b is None else b"\x01" + raw_matrix_to_bytes(b.reshape(1, -1)))
    _write(b"".join(parts), sink)


def load_dense_bundle(source):
    r = _Reader(_read(source))
    count, act = r.unpack(struct.Struct("<IB"), "bundle header")
    if count == 0 or act >= len(ACTIVATIONS):
        raise FormatError("invalid dense bundle header")
    weights, biases = [], []
    for _ in range(count):
        weights.append(read_raw_matrix(r))
        (has_bias,) = r.unpack(struct.Struct("<B"), "bias flag")
        biases.append(read_raw_matrix(r) if has_bias else None)
    r.finish()
    return weights, biases, ACTIVATIONS[act]


# -- CSV ---------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(records: Iterable[dict], sink, columns: list[str] | None = None):
    """Header row plus one row per record; floats use 17 significant digits."""
    records = list(records)
    if columns is None:
        columns = list(records[0]) if records else []
    for rec in records:
        if list(rec) != columns:
            raise FormatError(f"record keys {list(rec)} do not match columns {columns}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for rec in records:
        writer.writerow([_cell(rec[c]) for c in columns])
    text = buf.getvalue()
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w", newline="") as fh:
            fh.write(text)
