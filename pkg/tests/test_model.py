import numpy as np
import pytest

from qbara.adapters import BaraAdapter, HiraAdapter, ScaleOperator, adapter_backward
from qbara.errors import CapabilityError, ParameterError, ShapeError, StateError
from qbara.model import (Model, QuantizedLinear, activate, activation_backward, dense_forward, layer_forward,
                         merge_hira_model, merged_dense_weights, model_backward, model_forward, strip_adapters)
from qbara.quantizer import QuantConfig, dequantize_matrix, quantize_matrix

from conftest import numeric_grad, random_bara, random_hira, random_lora


def _layer(rng, d_in, d_out, adapter=None, cfg=QuantConfig(4, 4, 4), bias=None, trainable=False):
    return QuantizedLinear(quantize_matrix(rng.normal(size=(d_in, d_out)), cfg), adapter, bias, trainable)


def _three_layer(rng, activation="tanh", op=ScaleOperator.POOL_REPEAT):
    layers = [_layer(rng, 16, 16, random_bara(rng, 16, 16, 2, 2, 3, op), bias=rng.normal(size=16), trainable=True),
              _layer(rng, 16, 8, random_hira(rng, 16, 8, 4, 4, op)),
              _layer(rng, 8, 4, random_lora(rng, 8, 4, 2))]
    return Model(layers, activation)


def _reference_forward(model, x):
    """Straight-line reimplementation that never touches layer_forward."""
    h = x
    for i, layer in enumerate(model.layers):
        w = dequantize_matrix(layer.base)
        a = layer.adapter
        z = h @ w
        if isinstance(a, BaraAdapter):
            pooled = h.reshape(len(h), -1, a.lambda_in).mean(axis=2)
            z = z + a.scaling * np.repeat(pooled @ a.a @ a.b, a.lambda_out, axis=1)
        elif isinstance(a, HiraAdapter):
            pooled = h.reshape(len(h), -1, a.lambda_in).mean(axis=2)
            z = z + a.scaling * np.repeat(pooled @ a.c, a.lambda_out, axis=1)
        elif a is not None:
            z = z + a.scaling * (h @ a.a @ a.b)
        if layer.bias is not None:
            z = z + layer.bias
        h = z if i == len(model.layers) - 1 else np.tanh(z)
    return h


def test_plain_layer_is_base_product(rng):
    layer, x = _layer(rng, 8, 4), rng.normal(size=(3, 8))
    np.testing.assert_array_equal(layer_forward(layer, x), x @ dequantize_matrix(layer.base))


def test_zero_adapter_layer_is_base_plus_bias(rng):
    b = rng.normal(size=4)
    layer = _layer(rng, 8, 4, BaraAdapter.zeros(8, 4, 2, 2, 2), bias=b)
    x = rng.normal(size=(3, 8))
    np.testing.assert_array_equal(layer_forward(layer, x), x @ layer.w_tilde + b)


def test_w_tilde_is_read_only(rng):
    layer = _layer(rng, 8, 4)
    with pytest.raises(ValueError):
        layer.w_tilde[0, 0] = 1.0


def test_layer_rejects_mismatched_adapter(rng):
    with pytest.raises(ShapeError):
        _layer(rng, 8, 4, BaraAdapter.zeros(8, 8, 2, 2, 2))


def test_model_rejects_width_chain(rng):
    with pytest.raises(ShapeError, match="layer 0"):
        Model([_layer(rng, 8, 4), _layer(rng, 8, 4)])
    with pytest.raises(ParameterError):
        Model([_layer(rng, 8, 4)], "gelu")


def test_single_identity_layer_matches_layer_forward(rng):
    m = Model([_layer(rng, 8, 4, random_bara(rng, 8, 4, 2, 2, 2))], "identity")
    x = rng.normal(size=(5, 8))
    np.testing.assert_array_equal(model_forward(m, x)[0], layer_forward(m.layers[0], x))


def test_two_zero_adapter_layers_compose(rng):
    m = Model([_layer(rng, 8, 8, HiraAdapter.zeros(8, 8, 2, 2)), _layer(rng, 8, 4, BaraAdapter.zeros(8, 4, 2, 2, 1))],
              "relu")
    x = rng.normal(size=(5, 8))
    w1, w2 = m.layers[0].w_tilde, m.layers[1].w_tilde
    np.testing.assert_array_equal(model_forward(m, x)[0], np.maximum(x @ w1, 0) @ w2)


def test_forward_matches_straight_line_reference(rng):
    m, x = _three_layer(rng), rng.normal(size=(6, 16))
    np.testing.assert_allclose(model_forward(m, x)[0], _reference_forward(m, x), rtol=1e-12, atol=1e-12)


def test_input_width_checked(rng):
    with pytest.raises(ShapeError):
        model_forward(_three_layer(rng), np.ones((2, 5)))


@pytest.mark.parametrize("activation", ["relu", "tanh", "identity"])
def test_activation_backward_matches_finite_differences(activation, rng):
    z, g = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    num = numeric_grad(lambda: float(np.sum(g * activate(z, activation))), z)
    np.testing.assert_allclose(activation_backward(g, z, activation), num, rtol=1e-7, atol=1e-8)


@pytest.mark.parametrize("op", list(ScaleOperator))
def test_model_backward_matches_finite_differences(op, rng):
    m, x = _three_layer(rng, op=op), rng.normal(size=(4, 16))
    g_out = rng.normal(size=(4, 4))
    _, tape = model_forward(m, x)
    grads = model_backward(m, tape, g_out)

    def objective():
        return float(np.sum(g_out * model_forward(m, x)[0]))

    for i, name, p in m.parameters():
        np.testing.assert_allclose(grads[i][name], numeric_grad(objective, p), rtol=1e-6, atol=1e-8)


def test_zero_output_gradient(rng):
    m, x = _three_layer(rng), rng.normal(size=(2, 16))
    _, tape = model_forward(m, x)
    for layer_grads in model_backward(m, tape, np.zeros((2, 4))):
        assert all(not g.any() for g in layer_grads.values())


def test_single_layer_backward_reduces_to_adapter_backward(rng):
    a = random_bara(rng, 8, 4, 2, 2, 2)
    m, x, g = Model([_layer(rng, 8, 4, a)], "identity"), rng.normal(size=(3, 8)), rng.normal(size=(3, 4))
    _, tape = model_forward(m, x)
    direct, _ = adapter_backward(x, g, m.layers[0].w_tilde, a)
    got = model_backward(m, tape, g)[0]
    for name in direct:
        np.testing.assert_array_equal(got[name], direct[name])


def test_stale_tape_rejected(rng):
    m, x = _three_layer(rng), rng.normal(size=(2, 16))
    _, tape = model_forward(m, x)
    m.mark_updated()
    with pytest.raises(StateError):
        model_backward(m, tape, np.zeros((2, 4)))
    other = _three_layer(rng)
    _, tape = model_forward(m, x)
    with pytest.raises(StateError):
        model_backward(other, tape, np.zeros((2, 4)))


def test_backward_leaves_frozen_base_untouched(rng):
    m, x = _three_layer(rng), rng.normal(size=(2, 16))
    before = [(l.base.codes, l.base.alphas.tobytes(), l.base.betas.tobytes()) for l in m.layers]
    _, tape = model_forward(m, x)
    model_backward(m, tape, rng.normal(size=(2, 4)))
    assert before == [(l.base.codes, l.base.alphas.tobytes(), l.base.betas.tobytes()) for l in m.layers]


def test_trainable_count(rng):
    m = _three_layer(rng)
    assert m.trainable_count() == (8 * 3 + 3 * 8 + 16) + 4 * 2 + (8 * 2 + 2 * 4)


def test_merged_dense_model_matches(rng):
    m, x = _three_layer(rng), rng.normal(size=(5, 16))
    biases = [l.bias for l in m.layers]
    merged = dense_forward(merged_dense_weights(m), x, m.activation, biases)
    np.testing.assert_allclose(merged, model_forward(m, x)[0], rtol=1e-11, atol=1e-12)


def test_merge_hira_model(rng):
    cfg = QuantConfig(4, 4, 4)
    m = Model([_layer(rng, 16, 16, random_hira(rng, 16, 16, 4, 4), cfg), _layer(rng, 16, 8, None, cfg)], "tanh")
    x = rng.normal(size=(5, 16))
    merged = merge_hira_model(m)
    assert all(l.adapter is None for l in merged.layers)
    assert merged.layers[0].base.codes == m.layers[0].base.codes
    np.testing.assert_allclose(model_forward(merged, x)[0], model_forward(m, x)[0], rtol=1e-11, atol=1e-12)


def test_merge_hira_model_refuses_bara(rng):
    with pytest.raises(CapabilityError):
        merge_hira_model(Model([_layer(rng, 8, 8, random_bara(rng, 8, 8, 2, 2, 2))]))


def test_strip_adapters(rng):
    m = _three_layer(rng)
    stripped = strip_adapters(m)
    assert [l.adapter_kind for l in stripped.layers] == ["none"] * 3
    assert stripped.trainable_count() == 16
