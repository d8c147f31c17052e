"""Command-line entry point: ``wsnorm <command> [options]``.

Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 numerical
divergence, 5 a check failed, 6 batch-size contract violation. Failures
also print one JSON object to stderr with an ``error`` category.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save, read_container
from .config import ConfigError, ExperimentConfig
from .diagnostics import ChannelStatTracker, GradReductionRecorder, weight_elimination_ratio
from .experiments import make_data, run_hessian_suite, run_singularity_grid
from .gradcheck import run_gradcheck
from .metrics import COLUMNS, MetricsSink, read_json
from .models import build_model
from .norms import MicroBatchError
from .train import Trainer, TrainingDiverged, _check_batch_contract

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_CHECK, EXIT_CONTRACT = 0, 2, 3, 4, 5, 6
OUTPUT_ROOT_ENV = "WSNORM_OUTPUT_ROOT"


class CheckFailed(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# flag -> (config section, key)
_MODEL_FLAGS = {"arch": "architecture", "norm": "norm", "reparam": "reparam", "width": "width",
                "depth": "depth", "groups": "groups", "num_classes": "num_classes", "ws_eps": "ws_eps"}
_TRAIN_FLAGS = {"lr": "lr", "decay_epochs": "decay_epochs", "momentum": "momentum",
                "weight_decay": "weight_decay", "batch": "batch_size", "iteration_size": "iteration_size",
                "epochs": "epochs", "augment": "augment", "ws_optimizer": "ws_optimizer",
                "check_finite": "check_finite"}
_DATA_FLAGS = {"dataset": "dataset", "data_path": "path", "n_train": "n_train", "n_val": "n_val",
               "image_size": "image_size", "noise": "noise"}
_RUN_FLAGS = {"run_id": "run_id", "output_dir": "output_dir", "seed": "seed", "precision": "precision",
              "checkpoint_every": "checkpoint_every"}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; flags override its values")
    p.add_argument("--output-dir", help=f"run directory (default ${OUTPUT_ROOT_ENV}/<run-id> or ./runs/<run-id>)")
    p.add_argument("--run-id")
    p.add_argument("--seed", type=int)


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=["synth", "cifar10"])
    p.add_argument("--data-path", help="directory with the CIFAR-10 binary batches")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--noise", type=float)


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=["convnet4", "miniresnet"])
    p.add_argument("--depth", type=int, help="MiniResNet depth, 6n+2")
    p.add_argument("--width", type=int)
    p.add_argument("--norm", choices=["none", "bn", "gn", "ln", "in", "bcn", "bcn_micro", "fixed"])
    p.add_argument("--groups", type=int)
    p.add_argument("--reparam", choices=["none", "ws", "wn", "cwn"])
    p.add_argument("--ws", action="store_const", const="ws", dest="reparam_ws",
                   help="shorthand for --reparam ws")
    p.add_argument("--ws-eps", type=float)


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-epochs", type=_ints)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--iteration-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--augment", action="store_const", const=True)
    p.add_argument("--ws-optimizer", choices=["sgd", "pgd_exact", "pgd_lagrangian"])
    p.add_argument("--check-finite", action="store_const", const=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsnorm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_common(p), _add_data(p), _add_model(p), _add_train(p)
    p.add_argument("--precision", type=int, choices=[32, 64])
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--diagnostics", action="store_true", help="track StatDiff (and WS gradient terms)")

    p = sub.add_parser("gradcheck", help="autodiff vs finite differences for every op")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=20, help="number of consecutive seeds from --seed")
    p.add_argument("--tol", type=float, default=1e-5)

    p = sub.add_parser("lipschitz", help="gradient reduction terms and identity residuals during training")
    _add_common(p), _add_data(p), _add_model(p), _add_train(p)
    p.add_argument("--every", type=int, default=1, help="log every k-th optimizer step")
    p.add_argument("--tol", type=float, default=1e-8)

    p = sub.add_parser("hessian", help="Hessian zero-sum and Frobenius checks")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("singularity-grid", help="fixed-statistics perturbation grid")
    _add_common(p), _add_data(p), _add_model(p), _add_train(p)
    p.add_argument("--sigma-mu", type=_floats, default=[0.0, 1.0, 2.0])
    p.add_argument("--sigma-sigma", type=_floats, default=[0.0, 1.0, 2.0])
    p.add_argument("--frozen-affine", action="store_true", help="keep gamma=1, beta=0")
    p.add_argument("--no-bn-reference", action="store_true", help="skip the plain-BN comparison run")

    p = sub.add_parser("statdiff", help="StatDiff over training for GN/LN with and without WS")
    _add_common(p), _add_data(p), _add_model(p), _add_train(p)
    p.add_argument("--norms", default="gn,ln")
    p.add_argument("--seeds", type=int, default=1)

    p = sub.add_parser("export", help="re-export a run's metrics or a checkpoint")
    p.add_argument("run_dir", help="run directory or checkpoint file")
    p.add_argument("--format", choices=["csv", "json", "npz"], default="csv")
    p.add_argument("--out", help="output file (default stdout for csv/json)")
    return parser


# ---------------------------------------------------------------------------
# config assembly
# ---------------------------------------------------------------------------


def _config_from_args(args, command: str) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    cfg.run = dataclasses.replace(cfg.run, command=command)
    if getattr(args, "reparam_ws", None) and getattr(args, "reparam", None) is None:
        args.reparam = "ws"
    for flags, section in ((_MODEL_FLAGS, "model"), (_TRAIN_FLAGS, "train"), (_DATA_FLAGS, "data"),
                           (_RUN_FLAGS, "run")):
        values = {key: getattr(args, flag) for flag, key in flags.items() if getattr(args, flag, None) is not None}
        cfg.update(section, values)
    if getattr(args, "seed", None) is not None:
        cfg.update("train", {"seed": args.seed})
    if cfg.model.num_classes != cfg.data.classes:
        cfg.update("data", {"classes": cfg.model.num_classes})
    if cfg.run.run_id == "run":
        cfg.update("run", {"run_id": f"{command}-seed{cfg.run.seed}"})
    return cfg


def _output_dir(cfg: ExperimentConfig) -> str:
    out = cfg.run.output_dir or os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), cfg.run.run_id)
    os.makedirs(out, exist_ok=True)
    return out


def _dtype(cfg: ExperimentConfig):
    return np.float64 if cfg.run.precision == 64 else np.float32


def _data(cfg: ExperimentConfig):
    d = cfg.data
    return make_data(d.dataset, d.path, d.n_train, d.n_val, d.image_size, d.noise, d.classes)


def _write_report(out: str, report: dict) -> None:
    report = {"code_version": __version__, **report}
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, default=float)


def _start(args, command: str, **forced) -> tuple[ExperimentConfig, str]:
    cfg = _config_from_args(args, command)
    for section, values in forced.items():
        cfg.update(section, values)
    out = _output_dir(cfg)
    cfg.update("run", {"output_dir": out})
    cfg.save(os.path.join(out, "config.ini"))
    return cfg, out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg, out = _start(args, "train")
    data = _data(cfg)
    model = build_model(cfg.model, cfg.run.seed, _dtype(cfg))
    _check_batch_contract(model, cfg.train)
    observers = []
    if args.diagnostics:
        if cfg.model.norm in ("gn", "ln", "in"):
            observers.append(ChannelStatTracker())
        if cfg.model.reparam == "ws" and cfg.train.iteration_size == 1:
            observers.append(GradReductionRecorder(every=10))
    trainer = Trainer(model, cfg.train, observers)
    if args.resume:
        checkpoint_load(args.resume, model, trainer)
    sink = MetricsSink(out, cfg.run.run_id)
    every = max(cfg.run.checkpoint_every, 1)

    def on_epoch(tr, rec):
        sink.add_many({"train_loss": rec.train_loss, "train_err": rec.train_err, "val_err": rec.val_err,
                       "lr": cfg.train.lr_at(rec.epoch)}, epoch=rec.epoch, step=tr.step)
        sink.add_many(rec.diagnostics, epoch=rec.epoch, step=tr.step, group="diagnostics")
        for obs in observers:
            if isinstance(obs, GradReductionRecorder):
                r1, r2 = obs.max_residuals()
                sink.add_many({"max_r1": r1, "max_r2": r2, "ws_fraction": obs.mean_ws_fraction()},
                              epoch=rec.epoch, step=tr.step, group="ws")
        sink.flush()
        if (rec.epoch + 1) % every == 0:
            checkpoint_save(os.path.join(out, f"ckpt_epoch{rec.epoch + 1:03d}.wsn"), model, tr)
        print(f"epoch {rec.epoch}: loss {rec.train_loss:.4f} train_err {rec.train_err:.4f} "
              f"val_err {rec.val_err:.4f}", flush=True)

    t0 = time.time()
    trainer.fit(*data, on_epoch=on_epoch)
    checkpoint_save(os.path.join(out, "last.wsn"), model, trainer)
    last = trainer.history[-1] if trainer.history else None
    _write_report(out, {
        "command": "train",
        "run_id": cfg.run.run_id,
        "epochs": trainer.epoch,
        "steps": trainer.step,
        "final_val_err": last.val_err if last else None,
        "final_train_err": last.train_err if last else None,
        "weight_elimination_ratio": weight_elimination_ratio(model),
        "seconds": time.time() - t0,
    })
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg, out = _start(args, "gradcheck", run={"precision": 64})
    seeds = range(cfg.run.seed, cfg.run.seed + args.seeds)
    errors = run_gradcheck(seeds)
    sink = MetricsSink(out, cfg.run.run_id)
    for name, err in errors.items():
        sink.add("max_rel_error", err, group=name)
    sink.flush()
    failed = sorted(k for k, v in errors.items() if not v < args.tol)
    for name, err in errors.items():
        print(f"{name:24s} {err:.3e} {'ok' if err < args.tol else 'FAIL'}")
    _write_report(out, {"command": "gradcheck", "seeds": list(seeds), "tol": args.tol,
                        "max_rel_error": errors, "failed": failed, "passed": not failed})
    if failed:
        raise CheckFailed(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_lipschitz(args) -> int:
    defaults = {}
    if args.norm is None:
        defaults["norm"] = "gn"
    if args.reparam is None and args.reparam_ws is None:
        defaults["reparam"] = "ws"
    if args.ws_eps is None:
        defaults["ws_eps"] = 1e-10
    cfg, out = _start(args, "lipschitz", run={"precision": 64}, model=defaults)
    if cfg.model.reparam != "ws":
        raise ConfigError("lipschitz needs --reparam ws")
    data = _data(cfg)
    model = build_model(cfg.model, cfg.run.seed, np.float64)
    _check_batch_contract(model, cfg.train)
    rec = GradReductionRecorder(every=args.every)
    sink = MetricsSink(out, cfg.run.run_id)
    seen = 0

    def on_epoch(tr, ep):
        nonlocal seen
        for r in rec.records[seen:]:
            sink.add_many(r.as_metrics(), epoch=ep.epoch, step=r.step, group=r.layer)
        seen = len(rec.records)
        sink.add("val_err", ep.val_err, epoch=ep.epoch, step=tr.step)
        sink.flush()

    Trainer(model, cfg.train, [rec]).fit(*data, on_epoch=on_epoch)
    r1, r2 = rec.max_residuals()
    frac = rec.mean_ws_fraction()
    ok = r1 < args.tol and r2 < args.tol
    print(f"max r1 {r1:.3e}  max r2 {r2:.3e}  mean ws fraction {frac:.4f}")
    _write_report(out, {"command": "lipschitz", "max_r1": r1, "max_r2": r2, "mean_ws_fraction": frac,
                        "records": len(rec.records), "tol": args.tol, "passed": ok})
    if not ok:
        raise CheckFailed(f"identity residuals exceed {args.tol}: r1={r1:.3e} r2={r2:.3e}")
    return EXIT_OK


def cmd_hessian(args) -> int:
    cfg, out = _start(args, "hessian", run={"precision": 64})
    reports = run_hessian_suite(range(cfg.run.seed, cfg.run.seed + args.seeds), args.step, args.tol)
    sink = MetricsSink(out, cfg.run.run_id)
    summary, failed = {}, []
    for name, rep in reports:
        vals = {"total_sum": rep.total_sum, "max_row_sum": rep.max_row_sum, "max_col_sum": rep.max_col_sum,
                "frob2": rep.frob2, "frob2_bound": rep.frob2_bound}
        sink.add_many(vals, group=name)
        summary[name] = {**vals, "zero_sum_ok": rep.zero_sum_ok, "frobenius_ok": rep.frobenius_ok}
        if not (rep.zero_sum_ok and rep.frobenius_ok):
            failed.append(name)
        print(f"{name:16s} sum {rep.total_sum:+.2e} frob2 {rep.frob2:.6f} <= {rep.frob2_bound:.6f} "
              f"{'ok' if name not in failed else 'FAIL'}")
    sink.flush()
    _write_report(out, {"command": "hessian", "cases": summary, "failed": failed, "passed": not failed})
    if failed:
        raise CheckFailed(f"Hessian checks failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_singularity_grid(args) -> int:
    forced = {"norm": "fixed"}
    if args.frozen_affine:
        forced["affine_trainable"] = False
    cfg, out = _start(args, "singularity-grid", model=forced)
    if cfg.train.batch_size == 1:
        raise MicroBatchError("fixed-statistics layers need batch statistics; batch size must be > 1")
    data = _data(cfg)
    sink = MetricsSink(out, cfg.run.run_id)

    def on_cell(sm, ss, acc, failed, _model):
        sink.add_many({"accuracy": acc, "failed": float(failed)}, group=f"mu={sm};sigma={ss}")
        sink.flush()
        print(f"sigma_mu={sm} sigma_sigma={ss}: accuracy {acc:.4f}{' FAILED' if failed else ''}", flush=True)

    grid = run_singularity_grid(data, args.sigma_mu, args.sigma_sigma, cfg.train, cfg.model, cfg.run.seed,
                                _dtype(cfg), on_cell)
    with open(os.path.join(out, "grid.csv"), "w", encoding="utf-8") as fh:
        fh.write("sigma_mu,sigma_sigma,accuracy,failed\n")
        for row in grid.rows():
            fh.write(f"{row['sigma_mu']!r},{row['sigma_sigma']!r},{row['accuracy']!r},{int(row['failed'])}\n")
    report = {"command": "singularity-grid", "cells": grid.rows(), "threshold": grid.threshold,
              "aborted": {f"{k[0]},{k[1]}": v for k, v in grid.aborted.items()}}
    if not args.no_bn_reference and (0.0, 0.0) in grid.histories:
        bn_spec = dataclasses.replace(cfg.model, norm="bn")
        bn_model = build_model(bn_spec, cfg.run.seed, _dtype(cfg))
        bn_hist = Trainer(bn_model, cfg.train).fit(*data)
        cell = grid.histories[(0.0, 0.0)]
        match = [dataclasses.astuple(a)[:4] for a in cell] == [dataclasses.astuple(b)[:4] for b in bn_hist]
        report["bn_reference_val_err"] = bn_hist[-1].val_err
        report["zero_cell_matches_bn"] = bool(match)
        print(f"cell (0,0) identical to plain BN: {match}")
    _write_report(out, report)
    return EXIT_OK


def cmd_statdiff(args) -> int:
    from .experiments import run_statdiff_experiment

    forced = {} if args.arch else {"architecture": "miniresnet"}
    cfg, out = _start(args, "statdiff", model=forced)
    data = _data(cfg)
    sink = MetricsSink(out, cfg.run.run_id)
    series = {}
    for norm in [n.strip() for n in args.norms.split(",") if n.strip()]:
        for ws in (False, True):
            spec = dataclasses.replace(cfg.model, norm=norm, reparam="ws" if ws else "none")
            label = f"{norm}{'+ws' if ws else ''}"
            for s in range(cfg.run.seed, cfg.run.seed + args.seeds):
                res = run_statdiff_experiment(data, spec, cfg.train, s, _dtype(cfg))
                for ep, (m, sd) in enumerate(zip(res["statdiff_mean"], res["statdiff_std"])):
                    sink.add_many({"statdiff_mean": m, "statdiff_std": sd}, epoch=ep, group=f"{label}/seed{s}")
                sink.flush()
                series.setdefault(label, []).append(res["statdiff_mean"])
                print(f"{label} seed {s}: final StatDiff {res['statdiff_mean'][-1]:.4f}", flush=True)
    _write_report(out, {"command": "statdiff", "statdiff_mean": series,
                        "final_median": {k: float(np.median([v[-1] for v in vs])) for k, vs in series.items()}})
    return EXIT_OK


def cmd_export(args) -> int:
    src = args.run_dir
    if args.format == "npz":
        ckpt = read_container(src if os.path.isfile(src) else os.path.join(src, "last.wsn"))
        target = args.out or (os.path.splitext(src)[0] + ".npz")
        np.savez(target, **{k.replace("/", "__"): v for k, v in ckpt.tensors.items()})
        print(target)
        return EXIT_OK
    rows = read_json(os.path.join(src, "metrics.json"))
    if args.format == "json":
        text = json.dumps([dataclasses.asdict(r) for r in rows], indent=1)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerows([r.run_id, r.epoch, r.step, r.metric, r.group, repr(r.value)] for r in rows)
        text = buf.getvalue()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "lipschitz": cmd_lipschitz,
    "hessian": cmd_hessian,
    "singularity-grid": cmd_singularity_grid,
    "statdiff": cmd_statdiff,
    "export": cmd_export,
}


def _fail(code: int, category: str, exc: BaseException, **extra) -> int:
    payload = {"error": category, "message": str(exc), **extra}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except MicroBatchError as exc:
        return _fail(EXIT_CONTRACT, "batch_contract", exc)
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, "diverged", exc, step=exc.step, epoch=exc.epoch)
    except CheckFailed as exc:
        return _fail(EXIT_CHECK, "check_failed", exc)
    except CheckpointError as exc:
        return _fail(EXIT_IO, "checkpoint", exc, kind=exc.kind, tensor=exc.tensor)
    except (OSError, ValueError) as exc:
        category = "io" if isinstance(exc, OSError) else "usage"
        return _fail(EXIT_IO if category == "io" else EXIT_USAGE, category, exc)


if __name__ == "__main__":
    sys.exit(main())
