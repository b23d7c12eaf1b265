import io
import struct

import numpy as np
import pytest

from qbara.adapters import LoraAdapter, ScaleOperator
from qbara.errors import FormatError
from qbara.model import Model, QuantizedLinear, merge_hira_model, model_forward, strip_adapters
from qbara.persistence import (HEADER, adapter_from_bytes, adapter_to_bytes, checkpoint_from_bytes,
                               checkpoint_to_bytes, load_checkpoint, load_dense_bundle, load_quantized,
                               quantized_from_bytes, quantized_to_bytes, save_checkpoint, save_dense_bundle,
                               save_quantized, write_csv)
from qbara.quantizer import QuantConfig, QuantMode, dequantize_matrix, quantize_matrix

from conftest import random_bara, random_hira, random_lora


def _random_quantized(rng):
    tr, tc = int(rng.choice([1, 2, 4])), int(rng.choice([1, 2, 4]))
    cfg = QuantConfig(int(rng.choice([2, 3, 4, 8])), tr, tc, QuantMode(int(rng.integers(2))))
    return quantize_matrix(rng.normal(size=(tr * int(rng.integers(1, 5)), tc * int(rng.integers(1, 5)))), cfg)


def _random_adapter(rng):
    kind = int(rng.integers(3))
    op = ScaleOperator(int(rng.integers(3)))
    if kind == 0:
        return random_lora(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 4)))
    li, lo = int(rng.choice([1, 2])), int(rng.choice([1, 2, 4]))
    d_in, d_out = li * int(rng.integers(1, 5)), lo * int(rng.integers(1, 5))
    if kind == 1:
        return random_bara(rng, d_in, d_out, li, lo, int(rng.integers(1, 4)), op)
    return random_hira(rng, d_in, d_out, li, lo, op)


def _random_model(rng, adapters=True):
    cfg = QuantConfig(4, 2, 2)
    w = [rng.normal(size=(8, 8)), rng.normal(size=(8, 4))]
    layers = [QuantizedLinear(quantize_matrix(w[0], cfg), random_bara(rng, 8, 8, 2, 2, 2) if adapters else None,
                              rng.normal(size=8), True),
              QuantizedLinear(quantize_matrix(w[1], cfg), random_hira(rng, 8, 4, 2, 2) if adapters else None)]
    return Model(layers, "tanh")


def test_quantized_payload_size():
    q = quantize_matrix(np.arange(16.0).reshape(4, 4), QuantConfig(4, 2, 2))
    assert len(quantized_to_bytes(q)) == 7 + 14 + 4 * 4 + 4 * 4 + 8


def test_quantized_roundtrip_is_byte_stable(rng):
    for _ in range(100):
        data = quantized_to_bytes(_random_quantized(rng))
        assert quantized_to_bytes(quantized_from_bytes(data)) == data


def test_quantized_load_preserves_codes(rng):
    q = _random_quantized(rng)
    back = quantized_from_bytes(quantized_to_bytes(q))
    assert back.codes == q.codes and back.config == q.config
    np.testing.assert_array_equal(back.alphas, q.alphas.astype(np.float32))


def test_adapter_roundtrip_is_byte_stable(rng):
    for _ in range(100):
        a = _random_adapter(rng)
        data = adapter_to_bytes(a)
        back = adapter_from_bytes(data)
        assert adapter_to_bytes(back) == data
        assert type(back) is type(a) and back.scaling == a.scaling
        for name, p in a.params().items():
            assert back.params()[name].tobytes() == p.tobytes()


def test_checkpoint_roundtrip_is_byte_stable(rng):
    for _ in range(100):
        data = checkpoint_to_bytes(_random_model(rng, adapters=bool(rng.integers(2))))
        assert checkpoint_to_bytes(checkpoint_from_bytes(data)) == data


def test_checkpoint_forward_is_bit_exact(rng):
    # the first save rounds alpha/beta to f32; from then on the forward pass survives exactly
    model = checkpoint_from_bytes(checkpoint_to_bytes(_random_model(rng)))
    again = checkpoint_from_bytes(checkpoint_to_bytes(model))
    x = rng.normal(size=(5, 8))
    assert model_forward(model, x)[0].tobytes() == model_forward(again, x)[0].tobytes()
    assert [l.bias_trainable for l in again.layers] == [True, False]


def test_file_paths_and_streams(tmp_path, rng):
    q = _random_quantized(rng)
    save_quantized(q, tmp_path / "q.bin")
    assert load_quantized(tmp_path / "q.bin").codes == q.codes
    buf = io.BytesIO()
    model = _random_model(rng)
    save_checkpoint(model, buf)
    buf.seek(0)
    assert checkpoint_to_bytes(load_checkpoint(buf)) == buf.getvalue()


def test_bad_magic_rejected(rng):
    data = bytearray(quantized_to_bytes(_random_quantized(rng)))
    data[0:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        quantized_from_bytes(bytes(data))


def test_bad_version_rejected(rng):
    data = bytearray(quantized_to_bytes(_random_quantized(rng)))
    data[4:6] = struct.pack("<H", 9)
    with pytest.raises(FormatError):
        quantized_from_bytes(bytes(data))


def test_wrong_kind_rejected(rng):
    with pytest.raises(FormatError):
        adapter_from_bytes(quantized_to_bytes(_random_quantized(rng)))


def test_truncation_reports_offset(rng):
    data = quantized_to_bytes(_random_quantized(rng))
    with pytest.raises(FormatError, match="offset"):
        quantized_from_bytes(data[:-1])
    with pytest.raises(FormatError):
        quantized_from_bytes(data[:3])


def test_trailing_bytes_rejected(rng):
    with pytest.raises(FormatError):
        quantized_from_bytes(quantized_to_bytes(_random_quantized(rng)) + b"\x00")


def test_operator_byte_out_of_range(rng):
    data = bytearray(adapter_to_bytes(random_bara(rng, 4, 4, 2, 2, 1)))
    data[HEADER.size + 28] = 3  # operator byte follows five u32 fields and the f64 scaling
    with pytest.raises(FormatError, match="operator"):
        adapter_from_bytes(bytes(data))


def test_zero_rank_rejected():
    data = bytearray(adapter_to_bytes(LoraAdapter(np.ones((2, 1)), np.ones((1, 2)))))
    data[HEADER.size + 16:HEADER.size + 20] = struct.pack("<I", 0)
    with pytest.raises(FormatError):
        adapter_from_bytes(bytes(data))


def test_overflowing_beta_rejected():
    q = quantize_matrix(np.full((2, 2), 1e300), QuantConfig(4, 2, 2))
    with pytest.raises(FormatError):
        quantized_to_bytes(q)


def test_empty_checkpoint_rejected():
    data = HEADER.pack(b"QBRA", 1, 5) + struct.pack("<I", 0)
    with pytest.raises(FormatError):
        checkpoint_from_bytes(data)


def test_hira_merge_touches_only_betas(rng):
    # byte-diff oracle: merged file vs the same model without adapters differs only inside beta regions
    cfg = QuantConfig(4, 2, 2)
    layer = QuantizedLinear(quantize_matrix(rng.normal(size=(8, 4)), cfg), random_hira(rng, 8, 4, 2, 2))
    model = checkpoint_from_bytes(checkpoint_to_bytes(Model([layer], "identity")))
    before = checkpoint_to_bytes(strip_adapters(model))
    after = checkpoint_to_bytes(merge_hira_model(model))
    assert len(before) == len(after)
    n_tiles = 8
    q_start = HEADER.size + 4 + 8 + 1  # checkpoint header, layer count, widths, activation
    beta_start = q_start + HEADER.size + 14 + 4 * n_tiles
    diff = [i for i in range(len(before)) if before[i] != after[i]]
    assert diff and all(beta_start <= i < beta_start + 4 * n_tiles for i in diff)


def test_zero_adapter_hira_merge_is_byte_identical(rng):
    model = checkpoint_from_bytes(checkpoint_to_bytes(_random_model(rng, adapters=False)))
    assert checkpoint_to_bytes(merge_hira_model(model)) == checkpoint_to_bytes(model)


def test_dense_bundle_roundtrip(tmp_path, rng):
    w = [rng.normal(size=(4, 3)), rng.normal(size=(3, 2))]
    b = [rng.normal(size=(1, 3)), None]
    save_dense_bundle(w, b, "relu", tmp_path / "d.bin")
    w2, b2, act = load_dense_bundle(tmp_path / "d.bin")
    assert act == "relu" and b2[1] is None
    assert all(x.tobytes() == y.tobytes() for x, y in zip(w, w2))
    assert b2[0].tobytes() == b[0].tobytes()


def test_csv_header_only():
    buf = io.StringIO()
    write_csv([], buf, columns=["lambda", "params"])
    assert buf.getvalue() == "lambda,params\r\n"


def test_csv_one_record():
    buf = io.StringIO()
    write_csv([{"lambda": 2, "params": 524288, "loss": 0.5}], buf)
    assert buf.getvalue().splitlines() == ["lambda,params,loss", "2,524288,0.5"]


def test_csv_floats_roundtrip():
    buf = io.StringIO()
    write_csv([{"x": 0.1 + 0.2}], buf)
    assert float(buf.getvalue().splitlines()[1]) == 0.1 + 0.2


def test_csv_mismatched_keys():
    with pytest.raises(FormatError):
        write_csv([{"a": 1}, {"b": 2}], io.StringIO())


def test_dequantized_weights_survive_roundtrip(rng):
    q = quantized_from_bytes(quantized_to_bytes(_random_quantized(rng)))
    again = quantized_from_bytes(quantized_to_bytes(q))
    assert dequantize_matrix(q).tobytes() == dequantize_matrix(again).tobytes()
