import numpy as np
import pytest

from qbara.adapters import BaraAdapter, HiraAdapter, LoraAdapter, ScaleOperator
from qbara.quantizer import QuantConfig, QuantizedMatrix, QuantMode, pack_codes

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def naive_matmul(a, b):
    """Triple-loop product; independent of numpy's BLAS path."""
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i][t]) * float(b[t][j])
            out[i][j] = acc
    return np.array(out)


def numeric_grad(f, p, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``p`` (mutated and restored)."""
    g = np.zeros_like(p)
    flat, gflat = p.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + eps
        up = f()
        flat[k] = saved - eps
        down = f()
        flat[k] = saved
        gflat[k] = (up - down) / (2 * eps)
    return g


def random_bara(rng, d_in, d_out, lam_in, lam_out, rank, operator=ScaleOperator.POOL_REPEAT, scaling=None):
    return BaraAdapter(d_in, d_out, lam_in, lam_out,
                       rng.normal(size=(d_in // lam_in, rank)), rng.normal(size=(rank, d_out // lam_out)),
                       rng.uniform(0.1, 2.0) if scaling is None else scaling, operator)


def random_hira(rng, d_in, d_out, lam_in, lam_out, operator=ScaleOperator.POOL_REPEAT, scaling=None):
    return HiraAdapter(d_in, d_out, lam_in, lam_out, rng.normal(size=(d_in // lam_in, d_out // lam_out)),
                       rng.uniform(0.1, 2.0) if scaling is None else scaling, operator)


def random_lora(rng, d_in, d_out, rank, scaling=None):
    return LoraAdapter(rng.normal(size=(d_in, rank)), rng.normal(size=(rank, d_out)),
                       rng.uniform(0.1, 2.0) if scaling is None else scaling)


def identity_2x2_quantized(beta=0.0):
    """One 2x2 tile with alpha 1 and codes [1, 0, 0, 1]: dequantizes to I + beta exactly."""
    return QuantizedMatrix(2, 2, QuantConfig(2, 2, 2, QuantMode.MINMAX), pack_codes([1, 0, 0, 1], 2),
                           [1.0], [beta])
