"""LoRA, balanced-rank (BaRA) and higher-rank (HiRA) adapters.

All three add a trainable path to a frozen base weight ``W~`` (D_in x D_out)::

    y = x @ W~ + s * adapter_path(x)

LoRA uses ``x @ A @ B``. BaRA compresses the input features by ``lambda_in``,
applies a low-rank product of expanded rank ``r' = lambda * r`` and expands
the result back by ``lambda_out``. HiRA does the same with one full matrix
``C`` in place of ``A @ B``.

With the pool/repeat operator the adapter path equals ``x @ dW`` for a
``dW`` that is constant on every ``lambda_in x lambda_out`` block, which is
what makes the merges below exact. For HiRA with quantization tiles of that
same shape the merge reduces to shifting every tile's ``beta``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ParameterError, ShapeError
from .numerics import Matrix, repeat_cols, repeat_rows, segment_sum_cols
from .quantizer import QuantizedMatrix, dequantize_matrix


class ScaleOperator(enum.IntEnum):
    POOL_REPEAT = 0
    TRUNCATE_PAD = 1
    STRIDE_INTERP = 2

    @classmethod
    def from_name(cls, name: str) -> "ScaleOperator":
        aliases = {"pool": cls.POOL_REPEAT, "truncate": cls.TRUNCATE_PAD, "stride": cls.STRIDE_INTERP}
        key = name.strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls[key.upper().replace("-", "_")]
        except KeyError:
            raise ParameterError(f"unknown scale operator {name!r}") from None


def default_scaling(lora_alpha: float, effective_rank: int) -> float:
    """``s = lora_alpha / effective_rank``."""
    if effective_rank < 1:
        raise ParameterError(f"effective rank must be positive, got {effective_rank}")
    return float(lora_alpha) / effective_rank


def _divides(lam: int, dim: int, what: str):
    if lam < 1:
        raise ShapeError(f"{what} factor must be >= 1, got {lam}")
    if dim % lam:
        raise ShapeError(f"{what} width {dim} is not divisible by lambda {lam}")


@dataclass(eq=False)
class LoraAdapter:
    a: Matrix
    b: Matrix
    scaling: float = 1.0

    kind = "lora"

    def __post_init__(self):
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(f"LoRA factors do not chain: A {self.a.shape}, B {self.b.shape}")
        if self.rank < 1:
            raise ShapeError("LoRA rank must be >= 1")

    @classmethod
    def zeros(cls, d_in: int, d_out: int, rank: int, lora_alpha: float = 16.0) -> "LoraAdapter":
        return cls(np.zeros((d_in, rank)), np.zeros((rank, d_out)), default_scaling(lora_alpha, rank))

    @property
    def d_in(self) -> int:
        return self.a.shape[0]

    @property
    def d_out(self) -> int:
        return self.b.shape[1]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def params(self) -> dict[str, Matrix]:
        return {"A": self.a, "B": self.b}


@dataclass(eq=False)
class BaraAdapter:
    d_in: int
    d_out: int
    lambda_in: int
    lambda_out: int
    a: Matrix
    b: Matrix
    scaling: float = 1.0
    operator: ScaleOperator = ScaleOperator.POOL_REPEAT

    kind = "bara"

    def __post_init__(self):
        _divides(self.lambda_in, self.d_in, "input")
        _divides(self.lambda_out, self.d_out, "output")
        self.operator = ScaleOperator(self.operator)
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.d_in // self.lambda_in \
                or self.b.shape != (self.a.shape[1], self.d_out // self.lambda_out):
            raise ShapeError(f"BaRA factors A {self.a.shape}, B {self.b.shape} do not fit "
                             f"{self.d_in}->{self.d_out} with lambdas ({self.lambda_in}, {self.lambda_out})")
        if self.rank < 1:
            raise ShapeError("BaRA rank must be >= 1")

    @classmethod
    def zeros(cls, d_in: int, d_out: int, lambda_in: int, lambda_out: int, rank: int,
              lora_alpha: float = 16.0, operator: ScaleOperator = ScaleOperator.POOL_REPEAT) -> "BaraAdapter":
        _divides(lambda_in, d_in, "input")
        _divides(lambda_out, d_out, "output")
        return cls(d_in, d_out, lambda_in, lambda_out,
                   np.zeros((d_in // lambda_in, rank)), np.zeros((rank, d_out // lambda_out)),
                   default_scaling(lora_alpha, rank), operator)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def params(self) -> dict[str, Matrix]:
        return {"A": self.a, "B": self.b}


@dataclass(eq=False)
class HiraAdapter:
    d_in: int
    d_out: int
    lambda_in: int
    lambda_out: int
    c: Matrix
    scaling: float = 1.0
    operator: ScaleOperator = ScaleOperator.POOL_REPEAT

    kind = "hira"

    def __post_init__(self):
        _divides(self.lambda_in, self.d_in, "input")
        _divides(self.lambda_out, self.d_out, "output")
        self.operator = ScaleOperator(self.operator)
        self.c = np.ascontiguousarray(self.c, dtype=np.float64)
        if self.c.shape != (self.d_in // self.lambda_in, self.d_out // self.lambda_out):
            raise ShapeError(f"HiRA matrix {self.c.shape} does not fit {self.d_in}->{self.d_out} "
                             f"with lambdas ({self.lambda_in}, {self.lambda_out})")

    @classmethod
    def zeros(cls, d_in: int, d_out: int, lambda_in: int, lambda_out: int,
              lora_alpha: float = 16.0, operator: ScaleOperator = ScaleOperator.POOL_REPEAT) -> "HiraAdapter":
        _divides(lambda_in, d_in, "input")
        _divides(lambda_out, d_out, "output")
        rows, cols = d_in // lambda_in, d_out // lambda_out
        return cls(d_in, d_out, lambda_in, lambda_out, np.zeros((rows, cols)),
                   default_scaling(lora_alpha, min(rows, cols)), operator)

    def params(self) -> dict[str, Matrix]:
        return {"C": self.c}


Adapter = LoraAdapter | BaraAdapter | HiraAdapter


def default_hira_lambdas(tile_size: int) -> tuple[int, int]:
    """Balancing factors for a tile of ``tile_size`` elements, input side never larger."""
    if tile_size < 1:
        raise ParameterError(f"tile size must be positive, got {tile_size}")
    lam_in = 1 << ((tile_size.bit_length() - 1) // 2)
    if lam_in * (tile_size // lam_in) != tile_size:
        raise ParameterError(f"no default factorization for tile size {tile_size}")
    return lam_in, tile_size // lam_in


# -- scale operators --------------------------------------------------------

def compress_features(x: Matrix, lam: int, kind: ScaleOperator = ScaleOperator.POOL_REPEAT) -> Matrix:
    batch, width = x.shape
    _divides(lam, width, "input")
    kind = ScaleOperator(kind)
    if kind == ScaleOperator.POOL_REPEAT:
        return segment_sum_cols(x, lam) / lam
    if kind == ScaleOperator.TRUNCATE_PAD:
        return np.ascontiguousarray(x[:, : width // lam])
    return np.ascontiguousarray(x[:, ::lam])


def expand_features(y: Matrix, lam: int, kind: ScaleOperator = ScaleOperator.POOL_REPEAT,
                    width: int | None = None) -> Matrix:
    batch, narrow = y.shape
    if width is None:
        width = narrow * lam
    if lam < 1 or width != lam * narrow:
        raise ShapeError(f"cannot expand {narrow} features by {lam} to width {width}")
    kind = ScaleOperator(kind)
    if kind == ScaleOperator.POOL_REPEAT:
        return repeat_cols(y, lam)
    out = np.zeros((batch, width))
    if kind == ScaleOperator.TRUNCATE_PAD:
        out[:, :narrow] = y
    else:
        out[:, ::lam] = y
    return out


def _compress_adjoint(g: Matrix, lam: int, kind: ScaleOperator) -> Matrix:
    if kind == ScaleOperator.POOL_REPEAT:
        return repeat_cols(g, lam) / lam
    return expand_features(g, lam, kind)


def _expand_adjoint(g: Matrix, lam: int, kind: ScaleOperator) -> Matrix:
    if kind == ScaleOperator.POOL_REPEAT:
        return segment_sum_cols(g, lam)
    return compress_features(g, lam, kind)


# -- forward / backward -----------------------------------------------------

def _check_base(x: Matrix, w_tilde: Matrix, d_in: int, d_out: int):
    if w_tilde.shape != (d_in, d_out):
        raise ShapeError(f"adapter is {d_in}->{d_out} but base weight is {w_tilde.shape}")
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError(f"input {x.shape} does not match D_in={d_in}")


def lora_forward(x: Matrix, w_tilde: Matrix, a: LoraAdapter) -> Matrix:
    _check_base(x, w_tilde, a.d_in, a.d_out)
    return x @ w_tilde + a.scaling * ((x @ a.a) @ a.b)


def lora_backward(x: Matrix, g_y: Matrix, w_tilde: Matrix, a: LoraAdapter):
    """Returns ``(g_A, g_B, g_x)``."""
    _check_base(x, w_tilde, a.d_in, a.d_out)
    if g_y.shape != (x.shape[0], a.d_out):
        raise ShapeError(f"output gradient {g_y.shape} does not match {(x.shape[0], a.d_out)}")
    h = x @ a.a
    g_z = a.scaling * g_y
    g_h = g_z @ a.b.T
    return x.T @ g_h, h.T @ g_z, g_y @ w_tilde.T + g_h @ a.a.T


def _bara_path(x: Matrix, a: BaraAdapter):
    u = compress_features(x, a.lambda_in, a.operator)
    h = u @ a.a
    return u, h, h @ a.b


def bara_forward(x: Matrix, w_tilde: Matrix, a: BaraAdapter) -> Matrix:
    _check_base(x, w_tilde, a.d_in, a.d_out)
    _, _, z = _bara_path(x, a)
    return x @ w_tilde + a.scaling * expand_features(z, a.lambda_out, a.operator, a.d_out)


def bara_backward(x: Matrix, g_y: Matrix, w_tilde: Matrix, a: BaraAdapter):
    """Returns ``(g_A, g_B, g_x)``."""
    _check_base(x, w_tilde, a.d_in, a.d_out)
    if g_y.shape != (x.shape[0], a.d_out):
        raise ShapeError(f"output gradient {g_y.shape} does not match {(x.shape[0], a.d_out)}")
    u, h, _ = _bara_path(x, a)
    g_z = a.scaling * _expand_adjoint(g_y, a.lambda_out, a.operator)
    g_h = g_z @ a.b.T
    g_u = g_h @ a.a.T
    g_x = g_y @ w_tilde.T + _compress_adjoint(g_u, a.lambda_in, a.operator)
    return u.T @ g_h, h.T @ g_z, g_x


def hira_forward(x: Matrix, w_tilde: Matrix, a: HiraAdapter) -> Matrix:
    _check_base(x, w_tilde, a.d_in, a.d_out)
    z = compress_features(x, a.lambda_in, a.operator) @ a.c
    return x @ w_tilde + a.scaling * expand_features(z, a.lambda_out, a.operator, a.d_out)


def hira_backward(x: Matrix, g_y: Matrix, w_tilde: Matrix, a: HiraAdapter):
    """Returns ``(g_C, g_x)``."""
    _check_base(x, w_tilde, a.d_in, a.d_out)
    if g_y.shape != (x.shape[0], a.d_out):
        raise ShapeError(f"output gradient {g_y.shape} does not match {(x.shape[0], a.d_out)}")
    u = compress_features(x, a.lambda_in, a.operator)
    g_z = a.scaling * _expand_adjoint(g_y, a.lambda_out, a.operator)
    g_x = g_y @ w_tilde.T + _compress_adjoint(g_z @ a.c.T, a.lambda_in, a.operator)
    return u.T @ g_z, g_x


def adapter_forward(x: Matrix, w_tilde: Matrix, a: Adapter | None) -> Matrix:
    if a is None:
        if x.ndim != 2 or x.shape[1] != w_tilde.shape[0]:
            raise ShapeError(f"input {x.shape} does not match D_in={w_tilde.shape[0]}")
        return x @ w_tilde
    if isinstance(a, LoraAdapter):
        return lora_forward(x, w_tilde, a)
    if isinstance(a, BaraAdapter):
        return bara_forward(x, w_tilde, a)
    return hira_forward(x, w_tilde, a)


def adapter_backward(x: Matrix, g_y: Matrix, w_tilde: Matrix, a: Adapter | None):
    """Returns ``(param_grads, g_x)`` with grads keyed like ``a.params()``."""
    if a is None:
        return {}, g_y @ w_tilde.T
    if isinstance(a, LoraAdapter):
        g_a, g_b, g_x = lora_backward(x, g_y, w_tilde, a)
        return {"A": g_a, "B": g_b}, g_x
    if isinstance(a, BaraAdapter):
        g_a, g_b, g_x = bara_backward(x, g_y, w_tilde, a)
        return {"A": g_a, "B": g_b}, g_x
    g_c, g_x = hira_backward(x, g_y, w_tilde, a)
    return {"C": g_c}, g_x


# -- merging ----------------------------------------------------------------

def _require_pool(a: BaraAdapter | HiraAdapter):
    if a.operator != ScaleOperator.POOL_REPEAT:
        raise CapabilityError(f"merging is only defined for the pool/repeat operator, "
                              f"adapter uses {a.operator.name.lower()}")


def bara_delta_weight(a: BaraAdapter) -> Matrix:
    """Dense ``dW`` (D_in x D_out, without the scaling) equivalent to the BaRA path."""
    _require_pool(a)
    delta = repeat_rows(a.a @ a.b, a.lambda_in) / a.lambda_in
    return repeat_cols(delta, a.lambda_out)


def _check_merge_geometry(q: QuantizedMatrix, a):
    if (q.rows, q.cols) != (a.d_in, a.d_out):
        raise ShapeError(f"adapter is {a.d_in}->{a.d_out} but quantized base is {q.rows}x{q.cols}")


def merge_bara(q: QuantizedMatrix, a: BaraAdapter) -> Matrix:
    _require_pool(a)
    _check_merge_geometry(q, a)
    return dequantize_matrix(q) + a.scaling * bara_delta_weight(a)


def merge_lora(q: QuantizedMatrix, a: LoraAdapter) -> Matrix:
    _check_merge_geometry(q, a)
    return dequantize_matrix(q) + a.scaling * (a.a @ a.b)


def hira_delta_beta_grid(a: HiraAdapter) -> Matrix:
    """Per-tile beta increments, shape (D_in/lambda_in, D_out/lambda_out); includes the scaling."""
    _require_pool(a)
    return (a.scaling / a.lambda_in) * a.c


def merge_hira(q: QuantizedMatrix, a: HiraAdapter) -> QuantizedMatrix:
    """Fold the adapter into the per-tile betas; codes and alphas are untouched."""
    _require_pool(a)
    _check_merge_geometry(q, a)
    cfg = q.config
    if (cfg.tile_rows, cfg.tile_cols) != (a.lambda_in, a.lambda_out):
        raise CapabilityError(f"HiRA merge needs quantization tiles of {a.lambda_in}x{a.lambda_out} "
                              f"(lambda_in x lambda_out), base uses {cfg.tile_rows}x{cfg.tile_cols}")
    return q.with_betas(q.betas + hira_delta_beta_grid(a).ravel())


def merge_dense(q: QuantizedMatrix, a: Adapter | None) -> Matrix:
    """Full-precision merged weight for any pool/repeat adapter (or none)."""
    if a is None:
        return dequantize_matrix(q)
    if isinstance(a, LoraAdapter):
        return merge_lora(q, a)
    if isinstance(a, BaraAdapter):
        return merge_bara(q, a)
    _require_pool(a)
    _check_merge_geometry(q, a)
    grid = hira_delta_beta_grid(a)
    return dequantize_matrix(q) + repeat_cols(repeat_rows(grid, a.lambda_in), a.lambda_out)


# -- parameter counts -------------------------------------------------------

def adapter_param_count(kind: str, d_in: int, d_out: int, rank: int | None = None,
                        lambda_in: int = 1, lambda_out: int = 1) -> int:
    kind = kind.lower()
    if kind == "lora":
        if rank is None or rank < 1:
            raise ParameterError("LoRA needs a positive rank")
        return rank * (d_in + d_out)
    _divides(lambda_in, d_in, "input")
    _divides(lambda_out, d_out, "output")
    if kind == "bara":
        if rank is None or rank < 1:
            raise ParameterError("BaRA needs a positive rank")
        return (d_in // lambda_in) * rank + rank * (d_out // lambda_out)
    if kind == "hira":
        return (d_in // lambda_in) * (d_out // lambda_out)
    raise ParameterError(f"unknown adapter kind {kind!r}")
