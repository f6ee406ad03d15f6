"""Command-line interface: ``nws <command> ...``.

Every command prints a JSON report to stdout (or writes it to ``--out``)
and exits with a documented code; failures print ``{"error": ...}`` to
stderr. See README for the exit-code table.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (RATE_COLUMNS, USAGE_COLUMNS, analyze, memory_report, profile_report, rate_rows,
                       to_csv, usage_rows)
from .config import RunConfig
from .data import atomic_write, load_dataset, save_class_folders, save_idx_dataset
from .distill import pretrain_pools
from .errors import ConfigError, NWSError, VerificationError
from .formats import load_model, load_pools, save_model, save_pools
from .harness import evaluate, finetune_baseline, logits_digest, run_sequence, task_logits, train_task
from .tensor import precision
from .training import TrainConfig

EXIT_OK = 0
EXIT_USAGE = 2


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def manifest(cfg: RunConfig | None, command: str, **extra) -> dict:
    """Run manifest: everything that pins a result, no wall-clock data."""
    out = {"command": command, "package_version": __version__,
           "nws_threads": os.environ.get("NWS_THREADS"),
           "numpy_version": np.__version__, "python_version": platform.python_version()}
    if cfg is not None:
        out.update(seed=cfg.seed, precision=cfg.precision, config=cfg.to_dict())
    out.update(extra)
    return out


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS threads at ``NWS_THREADS`` when it is set."""
    value = os.environ.get("NWS_THREADS")
    if not value:
        yield
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"NWS_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _emit(report: dict, out) -> None:
    text = dumps(report)
    if out:
        atomic_write(out, text.encode())
    else:
        sys.stdout.write(text)


def _task_cfg(cfg: RunConfig, temp_init=None) -> TrainConfig:
    params = cfg.train.to_dict()
    if temp_init:
        params["temp_init"] = temp_init
    return TrainConfig(**params)


# -- commands ---------------------------------------------------------------

def cmd_pretrain_pools(args) -> dict:
    cfg = _load_config(args)
    with precision(cfg.precision):
        pools, c0, history = pretrain_pools(cfg.arch_spec(), cfg.pretrain_data(), cfg.distill_config())
        save_pools(args.pools, pools)
        save_model(args.model, c0, cfg.index_bits)
    return {"history": history, "pool_fingerprint": pools.fingerprint(),
            "arch_fingerprint": pools.arch_fingerprint,
            "manifest": manifest(cfg, "pretrain-pools")}


def cmd_train_task(args) -> dict:
    cfg = _load_config(args)
    with precision(cfg.precision):
        pools = load_pools(args.pools)
        prev = load_model(args.prev_model, pools)
        specs = cfg.task_specs()
        if not 1 <= args.task <= len(specs):
            raise ConfigError(f"--task must be in [1, {len(specs)}]")
        spec = specs[args.task - 1]
        model = train_task(pools, prev, spec, _task_cfg(cfg, args.temp_init), cfg.seed)
        size = save_model(args.model, model, cfg.index_bits)
        acc, logits = evaluate(pools, model, spec.test)
    return {"task_id": spec.task_id, "classes": spec.classes, "accuracy": acc,
            "logits_sha256": logits_digest(logits), "model_bytes": size,
            "manifest": manifest(cfg, "train-task", pool_fingerprint=pools.fingerprint())}


def cmd_run_sequence(args) -> dict:
    cfg = _load_config(args)
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    with precision(cfg.precision):
        if args.pools:
            pools = load_pools(args.pools)
            if not args.prev_model:
                raise ConfigError("--prev-model is required with --pools")
            c0 = load_model(args.prev_model, pools)
        else:
            pools, c0, _ = pretrain_pools(cfg.arch_spec(), cfg.pretrain_data(), cfg.distill_config())
        save_pools(work / "pools.nwsp", pools)
        save_model(work / "task_000.nwsm", c0, cfg.index_bits)
        tasks = cfg.task_specs()
        train_cfg = _task_cfg(cfg, args.temp_init)
        report, models = run_sequence(pools, c0, tasks, train_cfg, cfg.seed, index_bits=cfg.index_bits)
        for record, m in zip(report["tasks"], models):
            record["model_bytes"] = save_model(work / f"task_{m.task_id:03d}.nwsm", m, cfg.index_bits)
        if args.baseline:
            report["dense_baseline"] = finetune_baseline(pools, c0, tasks, train_cfg, cfg.seed)
    atomic_write(work / "usage.csv", to_csv(usage_rows(models), USAGE_COLUMNS).encode())
    atomic_write(work / "selection_rates.csv", to_csv(rate_rows(models), RATE_COLUMNS).encode())
    report["manifest"] = manifest(cfg, "run-sequence")
    atomic_write(work / "manifest.json", dumps(report["manifest"]).encode())
    atomic_write(work / "report.json", dumps(report).encode())
    if not report["complete"]:
        raise _PartialRun(report)
    return report


class _PartialRun(NWSError):
    """A task failed; carries the incomplete report and the failing error's exit code."""

    def __init__(self, report):
        err = report["error"]
        super().__init__(f"task {err['task_id']} failed with {err['type']}: {err['message']}")
        self.report = report
        self.exit_code = err["exit_code"]


def cmd_infer(args) -> dict:
    pools = load_pools(args.pools)
    model = load_model(args.model, pools)
    data = load_dataset(args.input, args.format)
    dt = pools[0].entries.dtype if len(pools) else np.float32
    with precision(dt):
        logits = task_logits(pools, model, data.images.astype(dt))
    pred = logits.argmax(axis=1)
    out = {"task_id": model.task_id, "predictions": pred.tolist(), "logits_sha256": logits_digest(logits)}
    if model.classes:
        out["predicted_classes"] = [model.classes[i] for i in pred]
        # accuracy over the samples that belong to this task's classes
        lookup = {c: i for i, c in enumerate(model.classes)}
        hits = [lookup[int(l)] == p for l, p in zip(data.labels, pred) if int(l) in lookup]
        out["evaluated"] = len(hits)
        if hits:
            out["accuracy"] = float(np.mean(hits))
    return out


def cmd_analyze(args) -> dict:
    models = [load_model(p) for p in args.models]
    if args.csv_dir:
        d = Path(args.csv_dir)
        d.mkdir(parents=True, exist_ok=True)
        atomic_write(d / "usage.csv", to_csv(usage_rows(models), USAGE_COLUMNS).encode())
        atomic_write(d / "selection_rates.csv", to_csv(rate_rows(models), RATE_COLUMNS).encode())
    return analyze(models)


def cmd_mem_report(args) -> dict:
    if args.profile:
        return profile_report(args.profile, args.tasks, args.float_bytes)
    cfg = _load_config(args)
    classes = [len(t) for t in cfg.tasks]
    if args.tasks:
        classes = (classes * args.tasks)[:args.tasks]
    return memory_report(cfg.arch_spec(), classes, index_bits=cfg.index_bits,
                         float_bytes=args.float_bytes).to_dict()


def cmd_verify(args) -> dict:
    from .verify import run_suites

    result = run_suites(args.seed or 0)
    if not result["passed"]:
        raise _FailedVerify(result)
    return result


class _FailedVerify(VerificationError):
    def __init__(self, report):
        super().__init__("invariant suites failed: " +
                         ", ".join(s["suite"] for s in report["suites"] if not s["passed"]))
        self.report = report


def cmd_make_data(args) -> dict:
    cfg = _load_config(args)
    out = Path(args.outdir)
    saver = save_idx_dataset if args.format == "idx" else save_class_folders
    pre = cfg.pretrain_data()
    train, test = cfg.task_data()
    for name, ds in (("pretrain", pre), ("train", train), ("test", test)):
        saver(out / name, ds)
    return {"outdir": str(out), "format": args.format,
            "samples": {"pretrain": len(pre), "train": len(train), "test": len(test)}}


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nws", description="Neural weight search over frozen kernel pools.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        if config:
            sp.add_argument("--config", help="RunConfig JSON file (defaults to the desk benchmark)")
            sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="write the JSON report here instead of stdout")
        return sp

    sp = add("pretrain-pools", cmd_pretrain_pools, "distil and freeze pools")
    sp.add_argument("--pools", required=True, help="output pool file")
    sp.add_argument("--model", required=True, help="output file for the pretrained index model")

    sp = add("train-task", cmd_train_task, "train one task of the config on frozen pools")
    sp.add_argument("--pools", required=True)
    sp.add_argument("--prev-model", required=True)
    sp.add_argument("--task", type=int, required=True, help="1-based position in the config's task list")
    sp.add_argument("--model", required=True, help="output task model file")
    sp.add_argument("--temp-init", choices=("decode", "random"))

    sp = add("run-sequence", cmd_run_sequence, "pretrain (unless --pools) and train every task in order")
    sp.add_argument("--workdir", required=True, help="directory for pools, models, CSVs and report")
    sp.add_argument("--pools")
    sp.add_argument("--prev-model")
    sp.add_argument("--temp-init", choices=("decode", "random"))
    sp.add_argument("--baseline", action="store_true", help="also train the dense finetune reference")

    sp = add("infer", cmd_infer, "predict with a stored task model", config=False)
    sp.add_argument("--pools", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="IDX directory or class-folder root")
    sp.add_argument("--format", choices=("idx", "folders"))

    sp = add("analyze", cmd_analyze, "KUR, layer sparsity and selection rates of model files", config=False)
    sp.add_argument("models", nargs="+")
    sp.add_argument("--csv-dir")

    sp = add("mem-report", cmd_mem_report, "memory accounting for a profile or config")
    sp.add_argument("--profile", help="named reference configuration, e.g. resnet18-split-cifar100")
    sp.add_argument("--tasks", type=int)
    sp.add_argument("--float-bytes", type=int, choices=(4, 8), default=4)

    sp = add("verify", cmd_verify, "run the built-in invariant suites", config=False)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("make-data", cmd_make_data, "write the config's synthetic data as files")
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--format", choices=("idx", "folders"), default="idx")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with thread_limit():
            report = args.func(args)
    except NWSError as exc:
        partial = getattr(exc, "report", None)
        if partial is not None:
            _emit(partial, args.out)
        code = exc.exit_code
        sys.stderr.write(dumps({"error": {"type": type(exc).__name__, "message": str(exc),
                                          "exit_code": code}}))
        return code
    _emit(report, args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
