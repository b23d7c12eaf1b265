"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric or
verification failure. Every subcommand accepts ``--config FILE`` with
``key = value`` lines (``#`` starts a comment); keys are flag names, and
explicit flags override the file.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

import numpy as np

from . import persistence as io
from .adapters import BaraAdapter, HiraAdapter, LoraAdapter, ScaleOperator, adapter_param_count
from .errors import NumericError, QbaraError
from .model import ACTIVATIONS, Model, dense_forward, merge_hira_model, merged_dense_weights, model_forward
from .numerics import Normal, make_rng, rng_fill, split_rng
from .quantizer import QuantConfig, QuantMode, quantization_stats, quantize_matrix
from .training import (AdapterSpec, TrainConfig, build_student, evaluate, finite_difference_check,
                       lambda_sweep, magnitude_report, make_task, train_loop)

log = logging.getLogger("qbara")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MERGE_TOLERANCE = 1e-8
GRADCHECK_TOLERANCE = 1e-6


class UsageError(Exception):
    pass


class ConfigError(QbaraError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- argument parsing helpers ------------------------------------------------

def parse_tile(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"tile must look like 8x8, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError(f"tile dims must be positive, got {text!r}")
    return rows, cols


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_lambdas(text: str) -> list:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            out.append(tuple(int(v) for v in item.split("x")) if "x" in item else int(item))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad lambda {item!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("no lambdas given")
    return out


def read_config_file(path: str) -> list[tuple[str, str]]:
    """``key = value`` pairs in file order; repeated keys are kept."""
    pairs = []
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        pairs.append((key.replace("-", "_"), value))
    return pairs


def _quant_args(p):
    p.add_argument("--bits", type=int, default=4, choices=[2, 3, 4, 8])
    p.add_argument("--tile", type=parse_tile, default=(8, 8), help="tile shape ROWSxCOLS")
    p.add_argument("--mode", default="minmax", choices=["minmax", "absmax"])


def _train_args(p):
    p.add_argument("--task", default="teacher-student", choices=["teacher-student", "classification"])
    p.add_argument("--widths", type=parse_int_list, default=[64, 64, 32])
    p.add_argument("--activation", default="tanh", choices=list(ACTIVATIONS))
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lora-alpha", type=float, default=16.0)
    _quant_args(p)


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="qbara", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    p = subs["quantize"] = sub.add_parser("quantize", help="quantize a raw f64 matrix file")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    _quant_args(p)

    p = subs["train"] = sub.add_parser("train", help="fine-tune adapters on a synthetic task")
    _train_args(p)
    p.add_argument("--adapter", default="bara", choices=["lora", "bara", "hira"])
    p.add_argument("--lambda", dest="lam", type=int, default=None)
    p.add_argument("--lambda-out", type=int, default=None)
    p.add_argument("--rank", type=int, default=8)
    # validated by ScaleOperator.from_name so a bad name is a config error, not a usage error
    p.add_argument("--operator", default="pool", help="pool, truncate or stride")
    p.add_argument("--out")
    p.add_argument("--history")

    p = subs["merge"] = sub.add_parser("merge", help="merge adapters and verify the result")
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--mode", default="bara-dense", choices=["bara-dense", "hira-beta"])
    p.add_argument("--seed", type=int, default=0)

    p = subs["sweep"] = sub.add_parser("sweep", help="balancing-factor sweep at a fixed parameter budget")
    _train_args(p)
    p.add_argument("--lambdas", type=parse_lambdas, default=parse_lambdas("1,2,4,8"))
    p.add_argument("--rank-base", type=int, default=4)
    p.add_argument("--out")

    p = subs["gradcheck"] = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--adapter", default="bara", choices=["lora", "bara", "hira"])
    # validated by ScaleOperator.from_name so a bad name is a config error, not a usage error
    p.add_argument("--operator", default="pool", help="pool, truncate or stride")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)

    p = subs["inspect"] = sub.add_parser("inspect", help="describe a checkpoint or a layer geometry file")
    p.add_argument("--ckpt")
    p.add_argument("--geometry", help="key = value geometry file (no weights)")
    p.add_argument("--magnitudes", help="raw f64 probe-input matrix")
    p.add_argument("--csv", dest="csv_out", help="write the magnitude report here instead of stdout")

    for p in subs.values():
        p.add_argument("--config", help="key = value file of defaults")
    return parser, subs


def parse_args(argv) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("qbara: a subcommand is required")
    if args.config:
        sub = subs[args.command]
        known = {opt.lstrip("-").replace("-", "_"): a for a in sub._actions
                 if a.dest not in ("help", "config") for opt in a.option_strings if opt.startswith("--")}
        overrides = {}
        for key, value in read_config_file(args.config):
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} for {args.command}")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ConfigError(f"config value {value!r} for {key} is not a boolean")
                value = value.lower() in ("true", "1", "yes")
            elif action.type is not None:
                try:
                    value = action.type(value)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"bad config value {value!r} for {key}: {exc}") from exc
            if action.choices is not None and value not in action.choices:
                raise ConfigError(f"config value {value!r} for {key} is not one of {list(action.choices)}")
            overrides[action.dest] = value
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def _require(args, *names):
    flags = {"input": "in", "lam": "lambda", "csv_out": "csv"}
    missing = [f"--{flags.get(n, n).replace('_', '-')}" for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"qbara {args.command}: missing {', '.join(missing)}")


def _check_input(path):
    if not os.path.isfile(path):
        raise ConfigError(f"input file {path} does not exist")


def _check_output(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ConfigError(f"output directory {parent} does not exist")


def _quant_config(args) -> QuantConfig:
    return QuantConfig(args.bits, args.tile[0], args.tile[1],
                       QuantMode.MINMAX if args.mode == "minmax" else QuantMode.ABSMAX)


def _train_config(args, loss="mse") -> TrainConfig:
    return TrainConfig(optimizer=args.optimizer, lr=args.lr, steps=args.steps, batch_size=args.batch_size,
                       seed=args.seed, loss=loss, lora_alpha=args.lora_alpha)


def _task(args):
    return make_task(args.task.replace("-", "_"), args.widths, args.activation, args.seed, args.latent_dim)


# -- subcommands -------------------------------------------------------------

def run_quantize(args) -> int:
    _require(args, "input", "out")
    _check_input(args.input)
    _check_output(args.out)
    cfg = _quant_config(args)
    weight = io.load_raw_matrix(args.input)
    q = quantize_matrix(weight, cfg)
    io.save_quantized(q, args.out)
    stats = quantization_stats(weight, q)
    for key in ("max_abs_err", "mse", "bits_per_weight"):
        print(f"{key}: {stats[key]:.17g}")
    return EXIT_OK


def run_train(args) -> int:
    _require(args, "out")
    _check_output(args.out)
    if args.history:
        _check_output(args.history)
    quant = _quant_config(args)
    task = _task(args)
    spec = AdapterSpec(args.adapter, args.rank, args.lam, args.lambda_out,
                       ScaleOperator.from_name(args.operator), args.lora_alpha)
    model = build_student(task, quant, spec, args.seed)
    cfg = _train_config(args, task.loss)
    start = evaluate(model, task.x_eval, task.y_eval, task.loss)
    history = train_loop(model, task, cfg)
    io.save_checkpoint(model, args.out)
    if args.history:
        io.write_csv([{"step": s, "train_loss": tr, "eval_loss": ev} for s, tr, ev in history],
                     args.history, columns=["step", "train_loss", "eval_loss"])
    final = history[-1][2] if history else start
    print(f"trainable params: {model.trainable_count()}")
    print(f"initial eval loss: {start:.17g}")
    print(f"final eval loss: {final:.17g}")
    return EXIT_OK


def _probe_inputs(model: Model, seed: int, count: int = 64):
    return rng_fill(make_rng(seed), count, model.widths[0], Normal())


def run_merge(args) -> int:
    _require(args, "ckpt", "out")
    _check_input(args.ckpt)
    _check_output(args.out)
    model = io.load_checkpoint(args.ckpt)
    probes = _probe_inputs(model, args.seed)
    reference, _ = model_forward(model, probes)
    if args.mode == "hira-beta":
        bad = [f"layer {i}: {layer.adapter_kind}" for i, layer in enumerate(model.layers)
               if layer.adapter is not None and not isinstance(layer.adapter, HiraAdapter)]
        if bad:
            raise ConfigError(f"hira-beta merge needs HiRA adapters ({'; '.join(bad)})")
        merged = merge_hira_model(model)
        merged_out, _ = model_forward(merged, probes)
        io.save_checkpoint(merged, args.out)
    else:
        weights = merged_dense_weights(model)
        biases = [layer.bias for layer in model.layers]
        merged_out = dense_forward(weights, probes, model.activation, biases)
        io.save_dense_bundle(weights, biases, model.activation, args.out)
    deviation = float(np.abs(merged_out - reference).max())
    print(f"max forward deviation: {deviation:.17g}")
    if not deviation <= MERGE_TOLERANCE:
        log.error("merge deviation %.3g exceeds %.0e", deviation, MERGE_TOLERANCE)
        return EXIT_NUMERIC
    return EXIT_OK


def run_sweep(args) -> int:
    _require(args, "out")
    _check_output(args.out)
    task = _task(args)
    records = lambda_sweep(task, args.lambdas, _train_config(args, task.loss), _quant_config(args), args.rank_base)
    bad = [r["lambda"] for r in records if not math.isfinite(r["final_eval_loss"])]
    if bad:
        raise NumericError(f"non-finite final loss for lambda {bad}")
    io.write_csv(records, args.out, columns=["lambda", "rank", "params", "final_eval_loss"])
    for r in records:
        print(f"lambda={r['lambda']} rank={r['rank']} params={r['params']} "
              f"final_eval_loss={r['final_eval_loss']:.6g}")
    return EXIT_OK


def gradcheck_model(adapter: str, operator: ScaleOperator, seed: int) -> Model:
    """Seeded 16->16->8 tanh model with non-zero adapters on both layers."""
    weight_rng, adapter_rng = split_rng(seed, 2)
    widths = [16, 16, 8]
    weights = [rng_fill(weight_rng, a, b, Normal(0.0, 0.25)) for a, b in zip(widths, widths[1:])]
    model = Model.from_dense(weights, QuantConfig(4, 4, 4), "tanh")
    for layer in model.layers:
        d_in, d_out = layer.d_in, layer.d_out
        if adapter == "lora":
            a = LoraAdapter.zeros(d_in, d_out, 4)
        elif adapter == "bara":
            a = BaraAdapter.zeros(d_in, d_out, 2, 2, 4, operator=operator)
        else:
            a = HiraAdapter.zeros(d_in, d_out, 2, 2, operator=operator)
        for p in a.params().values():
            p[...] = rng_fill(adapter_rng, *p.shape, Normal(0.0, 0.3))
        layer.adapter = a
    model.mark_updated()
    return model


def run_gradcheck(args) -> int:
    operator = ScaleOperator.from_name(args.operator)
    model = gradcheck_model(args.adapter, operator, args.seed)
    data_rng = split_rng(args.seed, 3)[2]
    x = rng_fill(data_rng, 4, 16, Normal())
    target = rng_fill(data_rng, 4, 8, Normal())
    err = finite_difference_check(model, x, target, eps=args.eps)
    print(f"max relative error: {err:.17g}")
    return EXIT_OK if err <= GRADCHECK_TOLERANCE else EXIT_NUMERIC


def geometry_param_count(path: str) -> tuple[str, int, int]:
    """Parse a weight-free geometry file; returns (adapter kind, layer count, trainable params)."""
    kind, rank, lam_in, lam_out, repeat, linears = "lora", None, 1, None, 1, []
    for key, value in read_config_file(path):
        try:
            if key == "adapter":
                kind = value.lower()
            elif key == "rank":
                rank = int(value)
            elif key == "lambda":
                lam_in = int(value)
            elif key == "lambda_out":
                lam_out = int(value)
            elif key == "repeat":
                repeat = int(value)
            elif key == "linear":
                d_in, d_out = parse_tile(value.split()[0])
                linears.append((d_in, d_out))
            else:
                raise ConfigError(f"unknown geometry key {key!r}")
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"bad geometry value for {key}: {value!r}") from exc
    if not linears:
        raise ConfigError("geometry file lists no linear layers")
    lam_out = lam_in if lam_out is None else lam_out
    per_block = sum(adapter_param_count(kind, d_in, d_out, rank, lam_in, lam_out) for d_in, d_out in linears)
    return kind, len(linears) * repeat, per_block * repeat


def run_inspect(args) -> int:
    if not args.ckpt and not args.geometry:
        raise UsageError("qbara inspect: give --ckpt or --geometry")
    if args.geometry:
        _check_input(args.geometry)
        kind, n_layers, total = geometry_param_count(args.geometry)
        print(f"adapter: {kind}")
        print(f"linear layers: {n_layers}")
        print(f"total trainable params: {total}")
    if args.ckpt:
        _check_input(args.ckpt)
        if args.magnitudes:
            _check_input(args.magnitudes)
        if args.csv_out:
            _check_output(args.csv_out)
        model = io.load_checkpoint(args.ckpt)
        print(f"widths: {','.join(map(str, model.widths))}")
        print(f"activation: {model.activation}")
        for i, layer in enumerate(model.layers):
            cfg = layer.base.config
            print(f"layer {i}: {layer.d_in}x{layer.d_out} bits={cfg.bits} tile={cfg.tile_rows}x{cfg.tile_cols} "
                  f"mode={cfg.mode.name.lower()} bits_per_weight={128 / cfg.tile_size + cfg.bits:g} "
                  f"adapter={layer.adapter_kind} params={sum(p.size for p in layer.params().values())}")
        print(f"total trainable params: {model.trainable_count()}")
        if args.magnitudes:
            records = magnitude_report(model, io.load_raw_matrix(args.magnitudes))
            columns = ["layer", "tensor", "channel", "mean_abs", "max_abs"]
            io.write_csv(records, args.csv_out or sys.stdout, columns=columns)
    return EXIT_OK


COMMANDS = {
    "quantize": run_quantize,
    "train": run_train,
    "merge": run_merge,
    "sweep": run_sweep,
    "gradcheck": run_gradcheck,
    "inspect": run_inspect,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (QbaraError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
