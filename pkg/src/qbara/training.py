"""Desk-scale fine-tuning: losses, optimizers, synthetic tasks and experiment harnesses.

The standard task is teacher-student regression. The teacher is a
full-precision random MLP; the student is the same network with its
weights quantized and adapters attached, trained to match the teacher's
outputs. That isolates how much quantization error an adapter can win back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import BaraAdapter, HiraAdapter, LoraAdapter, ScaleOperator, adapter_param_count
from .errors import NumericError, ParameterError, ShapeError
from .model import Model, dense_forward, model_backward, model_forward
from .numerics import Matrix, Normal, Uniform, rng_fill, split_rng
from .quantizer import QuantConfig

LOSSES = ("mse", "cross_entropy")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    steps: int = 500
    batch_size: int = 64
    seed: int = 7
    loss: str = "mse"
    lora_alpha: float = 16.0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ParameterError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ParameterError(f"lr must be finite and non-negative, got {self.lr}")
        if self.steps < 0:
            raise ParameterError(f"steps must be non-negative, got {self.steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be positive, got {self.batch_size}")
        if not (0 <= self.b1 < 1 and 0 <= self.b2 < 1 and self.eps > 0):
            raise ParameterError("adam needs 0 <= b1, b2 < 1 and eps > 0")


# -- losses ------------------------------------------------------------------

def softmax(z: Matrix) -> Matrix:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def compute_loss(kind: str, pred: Matrix, target: Matrix) -> tuple[float, Matrix]:
    """Batch-mean loss and its gradient with respect to ``pred``.

    ``mse`` averages the squared error over every element. ``cross_entropy``
    takes one-hot target rows and raw logits, averaging over rows.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if kind == "mse":
        diff = pred - target
        with np.errstate(over="ignore"):
            loss = float(np.mean(diff * diff))
        grad = (2.0 / diff.size) * diff
    elif kind == "cross_entropy":
        shifted = pred - pred.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-np.sum(target * log_probs) / pred.shape[0])
        grad = (np.exp(log_probs) * target.sum(axis=1, keepdims=True) - target) / pred.shape[0]
    else:
        raise ParameterError(f"unknown loss {kind!r}")
    if not math.isfinite(loss):
        raise NumericError(f"{kind} loss is not finite")
    return loss, grad


# -- optimizers --------------------------------------------------------------

@dataclass
class OptimizerState:
    t: int = 0
    m: list[Matrix] = field(default_factory=list)
    v: list[Matrix] = field(default_factory=list)


def optimizer_step(state: OptimizerState, params: list[Matrix], grads: list[Matrix],
                   cfg: TrainConfig) -> OptimizerState:
    """Update ``params`` in place and return the advanced optimizer state."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {p.shape} and gradient {g.shape} differ")
    state.t += 1
    if cfg.optimizer == "sgd":
        for p, g in zip(params, grads):
            p -= cfg.lr * g
        return state
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    c1 = 1.0 - cfg.b1 ** state.t
    c2 = 1.0 - cfg.b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= cfg.b1
        m += (1.0 - cfg.b1) * g
        v *= cfg.b2
        v += (1.0 - cfg.b2) * g * g
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


# -- adapters ----------------------------------------------------------------

@dataclass(frozen=True)
class AdapterSpec:
    """How to attach an adapter to every layer of a student model.

    ``rank`` is r for LoRA and the expanded rank r' for BaRA. HiRA lambdas
    default to the quantization tile shape so the adapter can be merged.
    """

    kind: str = "bara"
    rank: int = 8
    lambda_in: int | None = None
    lambda_out: int | None = None
    operator: ScaleOperator = ScaleOperator.POOL_REPEAT
    lora_alpha: float = 16.0

    def lambdas(self, quant: QuantConfig) -> tuple[int, int]:
        if self.kind == "hira":
            default = (quant.tile_rows, quant.tile_cols)
        elif self.kind == "bara":
            default = (2, 2)
        else:
            default = (1, 1)
        if self.lambda_in is None:
            return default if self.lambda_out is None else (default[0], self.lambda_out)
        return self.lambda_in, self.lambda_in if self.lambda_out is None else self.lambda_out


def make_adapter(spec: AdapterSpec, d_in: int, d_out: int, quant: QuantConfig):
    lam_in, lam_out = spec.lambdas(quant)
    if spec.kind == "lora":
        return LoraAdapter.zeros(d_in, d_out, spec.rank, spec.lora_alpha)
    if spec.kind == "bara":
        return BaraAdapter.zeros(d_in, d_out, lam_in, lam_out, spec.rank, spec.lora_alpha, spec.operator)
    if spec.kind == "hira":
        return HiraAdapter.zeros(d_in, d_out, lam_in, lam_out, spec.lora_alpha, spec.operator)
    raise ParameterError(f"unknown adapter kind {spec.kind!r}")


def init_adapter(adapter, rng: np.random.Generator):
    """Standard zero-path initialization, in place; returns the adapter.

    LoRA/BaRA draw ``A ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` and zero ``B``;
    HiRA zeroes ``C``. The adapter path is exactly zero afterwards.
    """
    if isinstance(adapter, HiraAdapter):
        adapter.c[...] = 0.0
        return adapter
    bound = 1.0 / math.sqrt(adapter.a.shape[0])
    adapter.a[...] = rng_fill(rng, *adapter.a.shape, Uniform(-bound, bound))
    adapter.b[...] = 0.0
    return adapter


def attach_adapters(model: Model, spec: AdapterSpec, rng: np.random.Generator) -> Model:
    """Attach a freshly initialized adapter to every layer (in place)."""
    for layer in model.layers:
        adapter = make_adapter(spec, layer.d_in, layer.d_out, layer.base.config)
        layer.adapter = init_adapter(adapter, rng)
    model.mark_updated()
    return model


def adapter_spec_params(spec: AdapterSpec, widths: list[int], quant: QuantConfig) -> int:
    lam_in, lam_out = spec.lambdas(quant)
    rank = None if spec.kind == "hira" else spec.rank
    return sum(adapter_param_count(spec.kind, d_in, d_out, rank, lam_in, lam_out)
               for d_in, d_out in zip(widths, widths[1:]))


# -- synthetic tasks ---------------------------------------------------------

@dataclass
class SyntheticTask:
    """Fixed train/eval draws labelled by a full-precision teacher MLP.

    Inputs are ``z @ mixing`` with ``z ~ N(0, I)`` of width ``latent_dim``, so
    neighbouring input features are correlated the way real activations are.
    ``classification`` tasks label each draw with the teacher's argmax class.
    """

    kind: str
    widths: list[int]
    activation: str
    teacher: list[Matrix]
    mixing: Matrix
    x_train: Matrix
    y_train: Matrix
    x_eval: Matrix
    y_eval: Matrix

    @property
    def loss(self) -> str:
        return "mse" if self.kind == "teacher_student" else "cross_entropy"


def _label(task_kind: str, outputs: Matrix) -> Matrix:
    if task_kind == "teacher_student":
        return outputs
    onehot = np.zeros_like(outputs)
    onehot[np.arange(len(outputs)), outputs.argmax(axis=1)] = 1.0
    return onehot


def make_task(kind: str = "teacher_student", widths=(64, 64, 32), activation: str = "tanh",
              seed: int = 7, latent_dim: int = 8, n_train: int = 2048, n_eval: int = 512) -> SyntheticTask:
    if kind not in ("teacher_student", "classification"):
        raise ParameterError(f"unknown task kind {kind!r}")
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ShapeError(f"task needs at least two positive widths, got {widths}")
    if latent_dim < 1:
        raise ParameterError(f"latent_dim must be positive, got {latent_dim}")
    weight_rng, mix_rng, data_rng = split_rng(seed, 3)
    teacher = [rng_fill(weight_rng, d_in, d_out, Normal(0.0, 1.0 / math.sqrt(d_in)))
               for d_in, d_out in zip(widths, widths[1:])]
    mixing = rng_fill(mix_rng, latent_dim, widths[0], Normal(0.0, 1.0 / math.sqrt(latent_dim)))
    x_train = rng_fill(data_rng, n_train, latent_dim, Normal()) @ mixing
    x_eval = rng_fill(data_rng, n_eval, latent_dim, Normal()) @ mixing
    y_train = _label(kind, dense_forward(teacher, x_train, activation))
    y_eval = _label(kind, dense_forward(teacher, x_eval, activation))
    return SyntheticTask(kind, widths, activation, teacher, mixing, x_train, y_train, x_eval, y_eval)


def build_student(task: SyntheticTask, quant: QuantConfig, spec: AdapterSpec | None,
                  seed: int) -> Model:
    """Quantized copy of the teacher with freshly initialized adapters."""
    model = Model.from_dense(task.teacher, quant, task.activation)
    if spec is not None:
        attach_adapters(model, spec, split_rng(seed, 3)[1])
    return model


def evaluate(model: Model, x: Matrix, y: Matrix, loss: str) -> float:
    pred, _ = model_forward(model, x)
    return compute_loss(loss, pred, y)[0]


def train_loop(model: Model, task: SyntheticTask, cfg: TrainConfig) -> list[tuple[int, float, float]]:
    """Train adapter parameters in place; returns ``(step, train_loss, eval_loss)`` per step."""
    if model.widths != task.widths:
        raise ShapeError(f"model widths {model.widths} do not match task widths {task.widths}")
    params = [p for _, _, p in model.parameters()]
    state = OptimizerState()
    batch_rng = split_rng(cfg.seed, 3)[2]
    n = len(task.x_train)
    history = []
    for step in range(1, cfg.steps + 1):
        idx = batch_rng.integers(0, n, size=min(cfg.batch_size, n))
        pred, tape = model_forward(model, task.x_train[idx])
        train_loss, g_pred = compute_loss(cfg.loss, pred, task.y_train[idx])
        grads = model_backward(model, tape, g_pred)
        flat = [grads[i][name] for i, name, _ in model.parameters()]
        optimizer_step(state, params, flat, cfg)
        model.mark_updated()
        eval_loss = evaluate(model, task.x_eval, task.y_eval, cfg.loss)
        history.append((step, train_loss, eval_loss))
    return history


# -- verification ------------------------------------------------------------

def relative_error(analytic: float, numeric: float, floor: float = 1.0) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from dividing by ~0."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(model: Model, x: Matrix, target: Matrix, eps: float = 1e-5,
                            loss: str = "mse", floor: float = 1.0) -> float:
    """Worst relative error between backprop and central differences over every trainable entry."""
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    pred, tape = model_forward(model, x)
    _, g_pred = compute_loss(loss, pred, target)
    grads = model_backward(model, tape, g_pred)
    worst = 0.0
    for i, name, p in model.parameters():
        analytic = grads[i][name]
        flat = p.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + eps
            up = compute_loss(loss, model_forward(model, x)[0], target)[0]
            flat[k] = saved - eps
            down = compute_loss(loss, model_forward(model, x)[0], target)[0]
            flat[k] = saved
            numeric = (up - down) / (2 * eps)
            worst = max(worst, relative_error(analytic.reshape(-1)[k], numeric, floor))
    model.mark_updated()
    return worst


# -- experiment harnesses ----------------------------------------------------

def _normalize_lambda(lam) -> tuple[int, int]:
    if isinstance(lam, (tuple, list)):
        lam_in, lam_out = (int(v) for v in lam)
    else:
        lam_in = lam_out = int(lam)
    return lam_in, lam_out


def lambda_sweep(task: SyntheticTask, lambdas, cfg: TrainConfig, quant: QuantConfig,
                 r_base: int = 4) -> list[dict]:
    """Train one BaRA student per balancing factor at a fixed parameter budget.

    Symmetric factors use ``r' = lambda * r_base``, which keeps the trainable
    parameter count equal to LoRA at rank ``r_base``. Asymmetric pairs use
    ``r' = max(lambda_in, lambda_out) * r_base``; their budget is reported,
    not held fixed.
    """
    pairs = [_normalize_lambda(lam) for lam in lambdas]
    bad = [f"{a}x{b}" if a != b else str(a) for a, b in pairs
           if a < 1 or b < 1 or any(d_in % a or d_out % b for d_in, d_out in zip(task.widths, task.widths[1:]))]
    if bad:
        raise ShapeError(f"lambda(s) {', '.join(bad)} do not divide the model widths {task.widths}")
    records = []
    for lam_in, lam_out in pairs:
        spec = AdapterSpec("bara", max(lam_in, lam_out) * r_base, lam_in, lam_out, lora_alpha=cfg.lora_alpha)
        model = build_student(task, quant, spec, cfg.seed)
        history = train_loop(model, task, replace(cfg, loss=task.loss))
        final = history[-1][2] if history else evaluate(model, task.x_eval, task.y_eval, task.loss)
        records.append({
            "lambda": lam_in if lam_in == lam_out else f"{lam_in}x{lam_out}",
            "rank": spec.rank,
            "params": model.trainable_count(),
            "final_eval_loss": final,
        })
    return records


def magnitude_report(model: Model, inputs: Matrix) -> list[dict]:
    """Per-channel mean and max absolute values of each layer's input, output and weight.

    Outputs are pre-activation; weight channels are the input rows of the
    dequantized base weight.
    """
    _, tape = model_forward(model, inputs)
    records = []
    for i, layer in enumerate(model.layers):
        tensors = (("input", np.abs(tape.inputs[i])),
                   ("output", np.abs(tape.pre_activations[i])),
                   ("weight", np.abs(layer.w_tilde).T))
        for name, mags in tensors:
            means, maxes = mags.mean(axis=0), mags.max(axis=0)
            for ch in range(mags.shape[1]):
                records.append({"layer": i, "tensor": name, "channel": ch,
                                "mean_abs": float(means[ch]), "max_abs": float(maxes[ch])})
    return records
