"""Command-line entry point: train, eval, ablation, gradcheck, bench.

Exit codes: 0 success, 1 check failure, 2 usage/config/data error,
3 numeric abort.
"""
from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import io
import json
import logging
import os
import platform
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import RngStream, sample_normal
from .data import DatasetSplit, gen_synthetic, load_csv, split
from .errors import (ConfigError, DataError, FormatError, KDLError, NumericOverflowError,
                     ParameterError, WeightsIOError)
from .kernels import KernelSpec, polynomial
from .layers import (BatchNorm, Conv2D, Dense, Dropout, Flatten, KernelDense, MaxPool, ReLU,
                     Softmax, grad_check)
from .model import ModelConfig, build_model, load_weights, read_manifest, save_weights
from .train import TrainParams, evaluate, train

log = logging.getLogger("kdl")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
SYNTHETIC_N = 200


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read {what} {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} {path} is not valid JSON: {e}") from e


def load_config(path) -> ModelConfig:
    if path is None:
        return ModelConfig()
    return ModelConfig.from_json(read_json(path, "config"))


def load_params(path, max_epochs=None) -> TrainParams:
    params = TrainParams() if path is None else TrainParams.from_json(read_json(path, "train params"))
    if max_epochs is not None:
        params.max_epochs = max_epochs
    return params


def load_data(uri: str, config: ModelConfig) -> DatasetSplit:
    """``synthetic:<kind>[:n_per_class]`` or a CSV path; checked against the config's input shape."""
    if uri.startswith("synthetic:"):
        parts = uri.split(":")
        n = int(parts[2]) if len(parts) > 2 else SYNTHETIC_N
        ds = gen_synthetic(parts[1], n, config.head.num_classes, seed=config.seed,
                           image_hw=config.input_shape[1:])
        data = split(ds, (0.8, 0.1, 0.1), seed=config.seed)
    else:
        try:
            loaded = load_csv(uri, image_hw=config.input_shape[1:])
        except OSError as e:
            raise DataError(f"cannot read data file {uri}: {e}") from e
        data = loaded if isinstance(loaded, DatasetSplit) else split(loaded, (0.8, 0.1, 0.1), config.seed)
    for part in ("train", "val", "test"):
        ds = getattr(data, part)
        if len(ds) and ds.images.shape[1:] != config.input_shape:
            raise DataError(f"{part} images have shape {ds.images.shape[1:]}, config expects {config.input_shape}")
        if len(ds) and ds.labels.max() >= config.head.num_classes:
            raise DataError(f"{part} labels exceed num_classes={config.head.num_classes}")
    return data


def versions():
    return {"kdl": __version__, "numpy": np.__version__, "python": platform.python_version()}


def run_training(config: ModelConfig, params: TrainParams, data: DatasetSplit, out: Path, data_uri: str):
    """Train one model and write its run directory; result.json goes last."""
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "config.json", _dump(config.to_json()) + "\n")
    write_atomic(out / "params.json", _dump(params.to_json()) + "\n")
    model = build_model(config)
    hist = train(model, data, params)
    write_atomic(out / "history.csv", hist.to_csv())
    save_weights(model, out)
    result = {
        "status": "completed",
        "stop_reason": hist.stop_reason,
        "epochs": len(hist.records),
        "best_epoch": hist.best_epoch,
        "best_val_acc": hist.best_val_acc,
        "final_train_acc": hist.records[-1].train_acc if hist.records else None,
        "seed": config.seed,
        "data": data_uri,
        "wall_time": hist.wall_time,
        "versions": versions(),
    }
    if len(data.test):
        test = evaluate(model, data.test)
        result["test_accuracy"], result["test_loss"] = test.accuracy, test.loss
    write_atomic(out / "result.json", _dump(result) + "\n")
    return hist, result


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    params = load_params(args.params, args.max_epochs)
    data = load_data(args.data, config)
    hist, result = run_training(config, params, data, Path(args.out), args.data)
    print(_dump({k: result[k] for k in ("status", "stop_reason", "epochs", "best_val_acc")}))
    return EXIT_OK


def _variants(degrees, with_fc, base: ModelConfig):
    out = []
    if with_fc:
        cfg = copy.deepcopy(base)
        cfg.head.type, cfg.head.kernel = "fc", KernelSpec("linear")
        out.append(("fc", cfg))
    for n in degrees:
        cfg = copy.deepcopy(base)
        cfg.head.type, cfg.head.kernel = "kdl", polynomial(n)
        out.append((f"kdl_n{n}", cfg))
    return out


def _epochs_to(hist, target):
    for r in hist.records:
        if r.train_acc >= target:
            return r.epoch + 1
    return None


def cmd_ablation(args) -> int:
    base = load_config(args.config)
    params = load_params(args.params, args.max_epochs)
    try:
        degrees = [int(d) for d in args.degrees.split(",") if d.strip()]
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed if args.seed is not None else base.seed]
    except ValueError as e:
        raise UsageError(f"bad --degrees/--seeds list: {e}") from e
    if any(d < 1 for d in degrees):
        raise UsageError("degrees must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, ok = [], True
    for seed in seeds:
        for name, cfg in _variants(degrees, args.with_fc, base):
            cfg.seed = seed
            sub = out / (f"{name}_seed{seed}" if len(seeds) > 1 else name)
            row = {"variant": name, "seed": seed, "status": "ok", "best_val_acc": "",
                   "epochs_to_stop": "", "epochs_to_target": "", "wall_time": ""}
            try:
                data = load_data(args.data, cfg)
                hist, _ = run_training(cfg, params, data, sub, args.data)
                hit = _epochs_to(hist, args.target_acc)
                row.update(best_val_acc=repr(hist.best_val_acc), epochs_to_stop=len(hist.records),
                           epochs_to_target="" if hit is None else hit, wall_time=f"{hist.wall_time:.3f}")
            except (KDLError, OSError) as e:
                ok = False
                row["status"] = "failed"
                print(f"{name} (seed {seed}) failed: {e}", file=sys.stderr)
            log.info("ablation row %s", row)
            rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["variant"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    write_atomic(out / "ablation.csv", buf.getvalue())

    summary = {"target_acc": args.target_acc, "variants": {}}
    for name, _ in _variants(degrees, args.with_fc, base):
        mine = [r for r in rows if r["variant"] == name and r["status"] == "ok"]
        hits = [r["epochs_to_target"] for r in mine if r["epochs_to_target"] != ""]
        summary["variants"][name] = {
            "runs": len(mine),
            "mean_best_val_acc": statistics.fmean(float(r["best_val_acc"]) for r in mine) if mine else None,
            "median_epochs_to_target": statistics.median(hits) if len(hits) == len(mine) and mine else None,
            "epochs_to_target": hits,
        }
    write_atomic(out / "ablation_summary.json", _dump(summary) + "\n")
    print(_dump(summary))
    return EXIT_OK if ok else EXIT_CHECK


def gradcheck_cases(seed: int):
    """Yield (name, layer, input) over the layer x kernel matrix, 20 configs each."""
    kernels = [
        ("kdl/linear", lambda r: KernelSpec("linear")),
        ("kdl/poly1", lambda r: polynomial(1)),
        ("kdl/poly2", lambda r: polynomial(2)),
        ("kdl/poly3", lambda r: polynomial(3)),
        ("kdl/gaussian", lambda r: KernelSpec("gaussian", sigma=float(r.uniform(0.8, 2.0)))),
        ("kdl/laplacian", lambda r: KernelSpec("laplacian", alpha=float(r.uniform(0.3, 1.5)))),
        ("kdl/abel", lambda r: KernelSpec("abel", alpha=float(r.uniform(0.1, 0.6)))),
    ]
    root = RngStream(seed)

    def normal(r, shape, sd=1.0):
        return sample_normal(r, 0.0, sd, shape)

    for trial in range(20):
        r = root.derive(trial)
        B, D, U = (int(v) for v in r.gen.integers(1, 6, 3))
        D += 2
        for name, make in kernels:
            spec = make(r)
            W = normal(r, (U, D), 0.6)
            b = r.uniform(0.0, 0.5, U)
            x = normal(r, (B, D), 0.6)
            relu = spec.degree == 1 and trial % 2 == 1
            yield name + ("+relu" if relu else ""), KernelDense(spec, W, b, activation=relu), x
        yield "dense" + ("+relu" if trial % 2 else ""), Dense(normal(r, (U, D)), normal(r, U), activation=bool(trial % 2)), normal(r, (B, D))
        C, O = int(r.gen.integers(1, 4)), int(r.gen.integers(1, 4))
        k = int(r.gen.integers(1, 4))
        stride, pad = int(r.gen.integers(1, 3)), int(r.gen.integers(0, 2))
        H, Wd = (int(v) for v in r.gen.integers(k, 7, 2))
        yield "conv2d", Conv2D(normal(r, (O, C, k, k)), normal(r, O), stride, pad), normal(r, (2, C, H, Wd))
        bn = BatchNorm(C, np.float64)
        bn.params["gamma"] = r.uniform(0.5, 1.5, C)
        bn.params["beta"] = normal(r, C)
        yield "batchnorm", bn, normal(r, (3, C, H, Wd), 2.0) + 1.0
        bn2 = BatchNorm(D, np.float64)
        bn2.params["gamma"] = r.uniform(0.5, 1.5, D)
        yield "batchnorm1d", bn2, normal(r, (B + 3, D))
        yield "relu", ReLU(), normal(r, (B, D))
        yield "maxpool", MaxPool(2), normal(r, (2, C, 2 * H // 2 + 1, Wd + 1))
        yield "dropout", Dropout(0.3, r.derive(99)), normal(r, (B, D))
        yield "softmax", Softmax(), normal(r, (B, D))
        yield "flatten", Flatten(), normal(r, (B, C, 2, 3))


def cmd_gradcheck(args) -> int:
    if not 1e-7 <= args.eps <= 1e-4:
        raise UsageError(f"--eps must lie in [1e-7, 1e-4], got {args.eps}")
    fault = {"W": 2.0} if args.inject_fault else None
    worst: dict[str, float] = {}
    worst_abs: dict[str, float] = {}
    counts: dict[str, int] = {}
    t0 = time.perf_counter()
    for name, layer, x in gradcheck_cases(args.seed):
        rep = grad_check(layer, x, eps=args.eps, seed=args.seed,
                         fault=fault if name.startswith("kdl") else None)
        worst[name] = max(worst.get(name, 0.0), max(rep.max_rel.values()))
        worst_abs[name] = max(worst_abs.get(name, 0.0), max(rep.max_abs.values()))
        counts[name] = counts.get(name, 0) + 1
    failed = [n for n, e in worst.items() if e > 1e-5]
    print(f"{'layer':<18s} {'configs':>7s} {'max rel err':>12s} {'max abs err':>12s}  result")
    for name in worst:
        print(f"{name:<18s} {counts[name]:>7d} {worst[name]:>12.3e} {worst_abs[name]:>12.3e}  "
              f"{'FAIL' if name in failed else 'pass'}")
    print(f"{sum(counts.values())} checks in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("gradient check failed for: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iters < 1 or min(args.dim, args.units, args.batch, args.degree) < 1:
        raise UsageError("--iters, --dim, --units, --batch and --degree must all be >= 1")
    rng = RngStream(args.seed)
    W = sample_normal(rng.derive(0), 0.0, np.sqrt(2.0 / args.dim), (args.units, args.dim), np.float32)
    b = np.zeros(args.units, np.float32)
    x = sample_normal(rng.derive(1), 0.0, 1.0, (args.batch, args.dim), np.float32)
    g = sample_normal(rng.derive(2), 0.0, 1.0, (args.batch, args.units), np.float32)
    if args.layer == "dense":
        layer = Dense(W, b)
    else:
        layer = KernelDense(polynomial(args.degree), W, b)
    fwd = bwd = 0
    checksum = 0.0
    for _ in range(args.iters):
        t = time.perf_counter_ns()
        out = layer.forward(x, training=True)
        fwd += time.perf_counter_ns() - t
        t = time.perf_counter_ns()
        bundle = layer.backward(g)
        bwd += time.perf_counter_ns() - t
        checksum += float(out.sum(dtype=np.float64)) + float(bundle.d_input.sum(dtype=np.float64))
    print(_dump({"forward_ns_per_call": fwd / args.iters, "backward_ns_per_call": bwd / args.iters,
                 "checksum": checksum}))
    return EXIT_OK


def cmd_eval(args) -> int:
    wdir = Path(args.weights)
    manifest = read_manifest(wdir)
    if (wdir / "config.json").exists():
        config = ModelConfig.from_json(read_json(wdir / "config.json", "config"))
    else:
        config = ModelConfig.from_json(manifest["config"])
    model = load_weights(config, wdir)
    data = load_data(args.data, config)
    if args.split == "all":
        parts = [d for d in (data.train, data.val, data.test) if len(d)]
        if not parts:
            raise DataError("dataset is empty")
        from .data import Dataset
        ds = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    else:
        ds = getattr(data, args.split)
    if len(ds) == 0:
        raise DataError(f"{args.split} split is empty")
    res = evaluate(model, ds)
    print(_dump({"accuracy": res.accuracy, "loss": res.loss, "confusion_matrix": res.confusion.tolist()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdl", description="Kernelized dense layer networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="CSV path or synthetic:<kind>[:n_per_class]")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--params", help="train params JSON")
    t.add_argument("--max-epochs", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablation", help="FC vs polynomial KDL heads on shared data and seed")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--degrees", default="1,2,3")
    a.add_argument("--with-fc", action="store_true")
    a.add_argument("--seed", type=int)
    a.add_argument("--seeds", help="comma-separated seeds; one sub-run per variant and seed")
    a.add_argument("--params")
    a.add_argument("--max-epochs", type=int)
    a.add_argument("--target-acc", type=float, default=0.95)
    a.set_defaults(func=cmd_ablation)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer and kernel")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", action="store_true", help="double the kernel-layer weight gradients")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time a dense or kernel layer")
    b.add_argument("--layer", choices=("kdl", "dense"), default="kdl")
    b.add_argument("--degree", type=int, default=1)
    b.add_argument("--dim", type=int, default=512)
    b.add_argument("--units", type=int, default=128)
    b.add_argument("--batch", type=int, default=64)
    b.add_argument("--iters", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="evaluate saved weights")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    e.set_defaults(func=cmd_eval)
    return p


def _thread_limit():
    n = int(os.environ.get("KDL_NUM_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(n, 1))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except NumericOverflowError as e:
        print(f"numeric overflow: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DataError, FormatError, ParameterError, WeightsIOError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
