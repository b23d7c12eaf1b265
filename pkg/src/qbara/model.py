"""Small feed-forward networks over frozen quantized linear layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import Adapter, HiraAdapter, adapter_backward, adapter_forward, merge_dense, merge_hira
from .errors import CapabilityError, ParameterError, ShapeError, StateError
from .numerics import Matrix, as_matrix
from .quantizer import QuantConfig, QuantizedMatrix, dequantize_matrix, quantize_matrix

ACTIVATIONS = ("relu", "tanh", "identity")


def activate(z: Matrix, kind: str) -> Matrix:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ParameterError(f"unknown activation {kind!r}")


def activation_backward(g: Matrix, z: Matrix, kind: str) -> Matrix:
    if kind == "relu":
        return g * (z > 0)
    if kind == "tanh":
        t = np.tanh(z)
        return g * (1.0 - t * t)
    if kind == "identity":
        return g
    raise ParameterError(f"unknown activation {kind!r}")


@dataclass(eq=False)
class QuantizedLinear:
    """Frozen quantized weight plus an optional adapter and bias.

    The dequantized weight is computed once and cached read-only; ``base``
    is immutable so the cache can never go stale.
    """

    base: QuantizedMatrix
    adapter: Adapter | None = None
    bias: Matrix | None = None
    bias_trainable: bool = False
    w_tilde: Matrix = field(init=False, repr=False)

    def __post_init__(self):
        w = dequantize_matrix(self.base)
        w.setflags(write=False)
        self.w_tilde = w
        if self.adapter is not None and (self.adapter.d_in, self.adapter.d_out) != (self.d_in, self.d_out):
            raise ShapeError(f"adapter {self.adapter.d_in}->{self.adapter.d_out} does not fit "
                             f"layer {self.d_in}->{self.d_out}")
        if self.bias is not None:
            self.bias = np.array(self.bias, dtype=np.float64).reshape(1, -1)
            if self.bias.shape[1] != self.d_out:
                raise ShapeError(f"bias width {self.bias.shape[1]} does not match D_out={self.d_out}")
        elif self.bias_trainable:
            raise ParameterError("bias_trainable set on a layer without a bias")

    @property
    def d_in(self) -> int:
        return self.base.rows

    @property
    def d_out(self) -> int:
        return self.base.cols

    @property
    def adapter_kind(self) -> str:
        return "none" if self.adapter is None else self.adapter.kind

    def params(self) -> dict[str, Matrix]:
        out = dict(self.adapter.params()) if self.adapter is not None else {}
        if self.bias_trainable:
            out["bias"] = self.bias
        return out


def layer_forward(layer: QuantizedLinear, x: Matrix) -> Matrix:
    y = adapter_forward(x, layer.w_tilde, layer.adapter)
    if layer.bias is not None:
        y = y + layer.bias
    return y


def layer_backward(layer: QuantizedLinear, x: Matrix, g_y: Matrix):
    grads, g_x = adapter_backward(x, g_y, layer.w_tilde, layer.adapter)
    if layer.bias_trainable:
        grads["bias"] = g_y.sum(axis=0, keepdims=True)
    return grads, g_x


class Model:
    """Stack of quantized linear layers with one activation between layers."""

    def __init__(self, layers: list[QuantizedLinear], activation: str = "relu"):
        if not layers:
            raise ShapeError("a model needs at least one layer")
        if activation not in ACTIVATIONS:
            raise ParameterError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        for i, (prev, nxt) in enumerate(zip(layers, layers[1:])):
            if prev.d_out != nxt.d_in:
                raise ShapeError(f"layer {i} outputs {prev.d_out} features but layer {i + 1} expects {nxt.d_in}")
        self.layers = list(layers)
        self.activation = activation
        self.version = 0

    @classmethod
    def from_dense(cls, weights: list[Matrix], cfg: QuantConfig, activation: str = "relu",
                   biases: list[Matrix | None] | None = None) -> "Model":
        biases = biases or [None] * len(weights)
        return cls([QuantizedLinear(quantize_matrix(w, cfg), bias=b) for w, b in zip(weights, biases)],
                   activation)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]

    def mark_updated(self):
        """Invalidate outstanding tapes after parameters change."""
        self.version += 1

    def parameters(self) -> list[tuple[int, str, Matrix]]:
        return [(i, name, p) for i, layer in enumerate(self.layers) for name, p in layer.params().items()]

    def trainable_count(self) -> int:
        return sum(p.size for _, _, p in self.parameters())


@dataclass
class Tape:
    model_id: int
    version: int
    inputs: list[Matrix]
    pre_activations: list[Matrix]


def model_forward(model: Model, x: Matrix) -> tuple[Matrix, Tape]:
    x = as_matrix(x, "input")
    if x.shape[1] != model.widths[0]:
        raise ShapeError(f"input has {x.shape[1]} features, model expects {model.widths[0]}")
    inputs, pres = [], []
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        inputs.append(h)
        z = layer_forward(layer, h)
        pres.append(z)
        h = z if i == last else activate(z, model.activation)
    return h, Tape(id(model), model.version, inputs, pres)


def model_backward(model: Model, tape: Tape, g_output: Matrix) -> list[dict[str, Matrix]]:
    """Gradients of every trainable parameter, one dict per layer."""
    if tape.model_id != id(model) or tape.version != model.version:
        raise StateError("tape does not belong to the current state of this model")
    if g_output.shape != tape.pre_activations[-1].shape:
        raise ShapeError(f"output gradient {g_output.shape} does not match output "
                         f"{tape.pre_activations[-1].shape}")
    grads: list[dict[str, Matrix]] = [{} for _ in model.layers]
    g = g_output
    for i in range(len(model.layers) - 1, -1, -1):
        if i != len(model.layers) - 1:
            g = activation_backward(g, tape.pre_activations[i], model.activation)
        grads[i], g = layer_backward(model.layers[i], tape.inputs[i], g)
    return grads


def dense_forward(weights: list[Matrix], x: Matrix, activation: str,
                  biases: list[Matrix | None] | None = None) -> Matrix:
    """Forward pass through plain dense weights (teacher networks, merged models)."""
    biases = biases or [None] * len(weights)
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w
        if b is not None:
            h = h + b
        if i != len(weights) - 1:
            h = activate(h, activation)
    return h


def merged_dense_weights(model: Model) -> list[Matrix]:
    return [merge_dense(layer.base, layer.adapter) for layer in model.layers]


def merge_hira_model(model: Model) -> Model:
    """New model whose HiRA adapters are folded into the quantized betas.

    Layers without an adapter are carried over unchanged; any other adapter
    kind cannot be absorbed into the quantized representation.
    """
    layers = []
    for i, layer in enumerate(model.layers):
        if layer.adapter is None:
            base = layer.base
        elif isinstance(layer.adapter, HiraAdapter):
            base = merge_hira(layer.base, layer.adapter)
        else:
            raise CapabilityError(f"layer {i} carries a {layer.adapter.kind} adapter, "
                                  f"which cannot be merged into quantized betas")
        bias = None if layer.bias is None else layer.bias.copy()
        layers.append(QuantizedLinear(base, None, bias, layer.bias_trainable))
    return Model(layers, model.activation)


def strip_adapters(model: Model) -> Model:
    return Model([QuantizedLinear(layer.base, None, None if layer.bias is None else layer.bias.copy(),
                                  layer.bias_trainable) for layer in model.layers], model.activation)

