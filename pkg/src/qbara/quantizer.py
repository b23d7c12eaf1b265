"""Tile-wise N-bit affine quantization.

Every tile of a weight matrix is stored as a triplet: integer codes, a scale
``alpha`` and an offset ``beta``, and reconstructed as ``alpha * code + beta``.

MinMax mode uses ``alpha = (max - min) / (2**N - 1)`` and ``beta = min``.
AbsMax mode is symmetric: ``beta = 0``, ``alpha = absmax / (2**(N-1) - 1)``,
signed codes in ``[-(2**(N-1) - 1), 2**(N-1) - 1]`` stored offset-binary so
every stored code is an unsigned N-bit integer. Rounding is half-to-even.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError, ShapeError
from .numerics import Matrix, as_matrix

ALLOWED_BITS = (2, 3, 4, 8)


class QuantMode(enum.IntEnum):
    MINMAX = 0
    ABSMAX = 1


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    tile_rows: int = 8
    tile_cols: int = 8
    mode: QuantMode = QuantMode.MINMAX

    def __post_init__(self):
        if self.bits not in ALLOWED_BITS:
            raise ParameterError(f"bits must be one of {ALLOWED_BITS}, got {self.bits}")
        if self.tile_rows < 1 or self.tile_cols < 1:
            raise ParameterError(f"tile dims must be positive, got {self.tile_rows}x{self.tile_cols}")
        object.__setattr__(self, "mode", QuantMode(self.mode))

    @property
    def tile_size(self) -> int:
        return self.tile_rows * self.tile_cols


def max_code(bits: int) -> int:
    return (1 << bits) - 1


def _absmax_levels(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def pack_codes(codes, bits: int) -> bytes:
    """Pack N-bit codes into a little-endian bit stream.

    Code ``i`` occupies stream bits ``[i*N, (i+1)*N)``; stream bit ``k`` is bit
    ``k % 8`` of byte ``k // 8``. The last byte is zero-padded in its high bits.
    """
    if bits not in ALLOWED_BITS:
        raise ParameterError(f"bits must be one of {ALLOWED_BITS}, got {bits}")
    c = np.asarray(codes, dtype=np.int64).ravel()
    if c.size and (c.min() < 0 or c.max() > max_code(bits)):
        raise DataError(f"codes must lie in [0, {max_code(bits)}] for {bits}-bit packing")
    if bits == 8:
        return c.astype(np.uint8).tobytes()
    bit_planes = ((c[:, None] >> np.arange(bits)) & 1).astype(np.uint8)
    return np.packbits(bit_planes.ravel(), bitorder="little").tobytes()


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    if bits not in ALLOWED_BITS:
        raise ParameterError(f"bits must be one of {ALLOWED_BITS}, got {bits}")
    if count < 0:
        raise ParameterError(f"count must be non-negative, got {count}")
    expected = packed_size(count, bits)
    if len(data) != expected:
        raise DataError(f"{count} codes of {bits} bits need {expected} bytes, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        return raw.astype(np.int64)
    stream = np.unpackbits(raw, bitorder="little")[: count * bits]
    weights = 1 << np.arange(bits, dtype=np.int64)
    return stream.reshape(count, bits).astype(np.int64) @ weights


def _quantize_blocks(blocks: np.ndarray, bits: int, mode: QuantMode):
    """Quantize each row of ``blocks`` independently; returns (codes, alphas, betas)."""
    if not np.isfinite(blocks).all():
        raise DataError("cannot quantize non-finite values")
    if mode == QuantMode.MINMAX:
        top = max_code(bits)
        lo = blocks.min(axis=1)
        alphas = (blocks.max(axis=1) - lo) / top
        betas = lo.copy()
        degenerate = alphas == 0
        safe = np.where(degenerate, 1.0, alphas)
        codes = np.clip(np.rint((blocks - betas[:, None]) / safe[:, None]), 0, top)
    else:
        levels = _absmax_levels(bits)
        alphas = np.abs(blocks).max(axis=1) / levels
        betas = np.zeros(len(blocks))
        degenerate = alphas == 0
        safe = np.where(degenerate, 1.0, alphas)
        codes = np.clip(np.rint(blocks / safe[:, None]), -levels, levels) + levels
    if degenerate.any():
        # constant tile: alpha 0, codes 0, beta carries the value exactly
        codes[degenerate] = 0
        betas[degenerate] = blocks[degenerate, 0]
    return codes.astype(np.int64), alphas, betas


def _dequantize_blocks(codes: np.ndarray, alphas: np.ndarray, betas: np.ndarray,
                       bits: int, mode: QuantMode) -> np.ndarray:
    # symmetric absmax codes never use the top code 2**N - 1
    top = 2 * _absmax_levels(bits) if mode == QuantMode.ABSMAX else max_code(bits)
    if codes.size and (codes.min() < 0 or codes.max() > top):
        raise DataError(f"codes out of range [0, {top}] for {bits}-bit {mode.name.lower()}")
    signed = codes.astype(np.float64)
    if mode == QuantMode.ABSMAX:
        signed = signed - _absmax_levels(bits)
    return alphas[:, None] * signed + betas[:, None]


def quantize_tile(values, mode: QuantMode = QuantMode.MINMAX, bits: int = 4):
    """Quantize one tile; returns ``(codes, alpha, beta)``."""
    if bits not in ALLOWED_BITS:
        raise ParameterError(f"bits must be one of {ALLOWED_BITS}, got {bits}")
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ParameterError("cannot quantize an empty tile")
    codes, alphas, betas = _quantize_blocks(v[None, :], bits, QuantMode(mode))
    return codes[0].tolist(), float(alphas[0]), float(betas[0])


def dequantize_tile(codes, alpha: float, beta: float,
                    mode: QuantMode = QuantMode.MINMAX, bits: int = 4) -> list[float]:
    c = np.asarray(codes, dtype=np.int64).ravel()
    out = _dequantize_blocks(c[None, :], np.array([alpha], dtype=np.float64),
                             np.array([beta], dtype=np.float64), bits, QuantMode(mode))
    return out[0].tolist()


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """Packed codes plus per-tile ``alpha``/``beta`` for a rows x cols matrix.

    Codes are ordered tile-major (tiles in row-major order over the tile
    grid), then row-major inside each tile. ``alphas`` and ``betas`` are flat
    float64 arrays in the same tile order.
    """

    rows: int
    cols: int
    config: QuantConfig
    codes: bytes
    alphas: np.ndarray = field(repr=False)
    betas: np.ndarray = field(repr=False)

    def __post_init__(self):
        cfg = self.config
        if self.rows < 1 or self.cols < 1:
            raise ShapeError(f"matrix dims must be positive, got {self.rows}x{self.cols}")
        if self.rows % cfg.tile_rows or self.cols % cfg.tile_cols:
            raise ShapeError(f"{self.rows}x{self.cols} matrix is not divisible by "
                             f"{cfg.tile_rows}x{cfg.tile_cols} tiles")
        alphas = np.array(self.alphas, dtype=np.float64).ravel()
        betas = np.array(self.betas, dtype=np.float64).ravel()
        if alphas.size != self.n_tiles or betas.size != self.n_tiles:
            raise ShapeError(f"expected {self.n_tiles} alphas and betas, got {alphas.size} and {betas.size}")
        if not (np.isfinite(alphas).all() and (alphas >= 0).all()):
            raise DataError("alphas must be finite and non-negative")
        if not np.isfinite(betas).all():
            raise DataError("betas must be finite")
        if len(self.codes) != packed_size(self.rows * self.cols, cfg.bits):
            raise DataError(f"packed code buffer has {len(self.codes)} bytes, expected "
                            f"{packed_size(self.rows * self.cols, cfg.bits)}")
        alphas.setflags(write=False)
        betas.setflags(write=False)
        object.__setattr__(self, "codes", bytes(self.codes))
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "betas", betas)

    @property
    def tile_grid(self) -> tuple[int, int]:
        return self.rows // self.config.tile_rows, self.cols // self.config.tile_cols

    @property
    def n_tiles(self) -> int:
        gr, gc = self.tile_grid
        return gr * gc

    def unpacked_codes(self) -> np.ndarray:
        """Codes as an ``(n_tiles, tile_size)`` integer array."""
        flat = unpack_codes(self.codes, self.config.bits, self.rows * self.cols)
        return flat.reshape(self.n_tiles, self.config.tile_size)

    def with_betas(self, betas) -> "QuantizedMatrix":
        return QuantizedMatrix(self.rows, self.cols, self.config, self.codes, self.alphas, betas)


def _to_tiles(m: np.ndarray, tr: int, tc: int) -> np.ndarray:
    rows, cols = m.shape
    return (m.reshape(rows // tr, tr, cols // tc, tc)
             .transpose(0, 2, 1, 3)
             .reshape(-1, tr * tc))


def _from_tiles(blocks: np.ndarray, rows: int, cols: int, tr: int, tc: int) -> np.ndarray:
    return np.ascontiguousarray(
        blocks.reshape(rows // tr, cols // tc, tr, tc).transpose(0, 2, 1, 3).reshape(rows, cols))


def quantize_matrix(m: Matrix, cfg: QuantConfig) -> QuantizedMatrix:
    m = as_matrix(m, "weight")
    rows, cols = m.shape
    if rows % cfg.tile_rows or cols % cfg.tile_cols:
        raise ShapeError(f"{rows}x{cols} matrix is not divisible by "
                         f"{cfg.tile_rows}x{cfg.tile_cols} tiles")
    codes, alphas, betas = _quantize_blocks(_to_tiles(m, cfg.tile_rows, cfg.tile_cols),
                                            cfg.bits, cfg.mode)
    return QuantizedMatrix(rows, cols, cfg, pack_codes(codes, cfg.bits), alphas, betas)


def dequantize_matrix(q: QuantizedMatrix) -> Matrix:
    cfg = q.config
    blocks = _dequantize_blocks(q.unpacked_codes(), q.alphas, q.betas, cfg.bits, cfg.mode)
    return _from_tiles(blocks, q.rows, q.cols, cfg.tile_rows, cfg.tile_cols)


def bits_per_weight(cfg: QuantConfig) -> float:
    # alpha and beta are counted at 64 bits each
    return cfg.bits + 128 / cfg.tile_size


def quantization_stats(m: Matrix, q: QuantizedMatrix) -> dict:
    m = as_matrix(m, "weight")
    if m.shape != (q.rows, q.cols):
        raise ShapeError(f"matrix shape {m.shape} does not match quantized shape {(q.rows, q.cols)}")
    err = m - dequantize_matrix(q)
    return {
        "max_abs_err": float(np.abs(err).max()),
        "mse": float(np.mean(err * err)),
        "bits_per_weight": bits_per_weight(q.config),
    }
