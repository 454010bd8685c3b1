"""Command-line front end: dataset generation, training, and evaluation.

Config resolution order is defaults < CRASHCAST_SEED (default seed only)
< JSON config file (keys mirror flag names, dashes as underscores) < flags.
Every run writes a manifest next to its primary output recording the command,
the resolved config, input hashes (taken before processing), and output
hashes, so a run can be reproduced bit for bit.

Exit codes: 0 success, 2 usage/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import autodiff as ad
from .features import FeatureConfig
from .losses import LossConfig
from .riskmodel import ModelConfig, ModelParams
from .roadnet import NetworkError, parse_network
from .scenario import GenConfig, GenerationError, generate_one, read_dataset, record_to_json
from .traineval import TrainConfig, TrainingDivergedError, evaluate, train
from .util import atomic_write_text, sha256_file, stream_rng


class ConfigError(Exception):
    """Bad flags, config file contents, or input preconditions (exit 2)."""


_GEN_DEFAULTS = {
    "network": None,
    "count": 100,
    "positive_ratio": 0.5,
    "seed": 0,
    "out": None,
    "jobs": 1,
    "force": False,
}

_TRAIN_DEFAULTS = {
    "data": None,
    "val_data": None,
    "epochs": 10,
    "seed": 0,
    "out": None,
    "log": None,
    "resume": None,
    "learning_rate": 1e-3,
    "batch_size": 8,
    "feature_dim": 32,
    "max_objects": 19,
    "force": False,
}

_EVAL_DEFAULTS = {
    "data": None,
    "checkpoint": None,
    "out": None,
    "curves": None,
    "threshold": 0.5,
    "jobs": 1,
    "force": False,
}

_DEFAULTS = {
    "gen-data": _GEN_DEFAULTS,
    "train": _TRAIN_DEFAULTS,
    "eval": _EVAL_DEFAULTS,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crashcast",
        description="Synthetic accident-anticipation pipeline: generate "
                    "scenario datasets, train the risk model, evaluate it.")
    parser.add_argument("--version", action="version",
                        version=f"crashcast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a scenario dataset")
    g.add_argument("--network", help="road network file; overrides the "
                                     "preset map for negative scenarios")
    g.add_argument("--count", type=int, help="number of scenarios")
    g.add_argument("--positive-ratio", type=float,
                   help="fraction of accident scenarios, in [0, 1]")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output dataset path (JSON lines)")
    g.add_argument("--jobs", type=int, help="parallel workers; output is "
                                            "identical for any value")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--force", action="store_true", default=None,
                   help="overwrite existing outputs")

    t = sub.add_parser("train", help="train the risk model on a dataset")
    t.add_argument("--data", help="training dataset (JSON lines)")
    t.add_argument("--val-data", help="optional validation dataset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="checkpoint path; a config sidecar "
                                 "<out>.json and log <out>.log.csv are "
                                 "written next to it")
    t.add_argument("--log", help="training log CSV path "
                                 "(default: <out>.log.csv)")
    t.add_argument("--resume", help="checkpoint to continue from; its "
                                    "sidecar restores the model shape")
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--feature-dim", type=int)
    t.add_argument("--max-objects", type=int)
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--force", action="store_true", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--data", help="evaluation dataset (JSON lines)")
    e.add_argument("--checkpoint", help="model checkpoint (expects the "
                                        "<checkpoint>.json sidecar)")
    e.add_argument("--out", help="report JSON path")
    e.add_argument("--curves", help="risk-curve CSV path "
                                    "(default: <out>.curves.csv)")
    e.add_argument("--threshold", type=float,
                   help="trigger threshold in [0, 1]")
    e.add_argument("--jobs", type=int)
    e.add_argument("--config", help="JSON config file")
    e.add_argument("--force", action="store_true", default=None)
    return parser


def _resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, CRASHCAST_SEED, the config file, and explicit flags."""
    cfg = dict(_DEFAULTS[command])
    env_seed = os.environ.get("CRASHCAST_SEED")
    if env_seed is not None and "seed" in cfg:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(
                f"CRASHCAST_SEED must be an integer, got {env_seed!r}")
    if args.config is not None:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(
                f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in _DEFAULTS[command]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _require(cfg: dict, key: str, command: str):
    if cfg[key] in (None, ""):
        raise ConfigError(f"{command} requires --{key.replace('_', '-')}")
    return cfg[key]


def _refuse_overwrite(paths, force) -> None:
    for path in paths:
        if path and os.path.exists(path) and not force:
            raise ConfigError(f"refusing to overwrite {path} (pass --force)")


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(out: str, command: str, cfg: dict, inputs: dict,
                    outputs, started: str) -> None:
    manifest = {
        "tool": f"crashcast {__version__}",
        "command": command,
        "config": cfg,
        "inputs": inputs,
        "outputs": {p: sha256_file(p) for p in outputs},
        "started_at": started,
        "finished_at": _utcnow(),
    }
    atomic_write_text(out + ".manifest.json",
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return f"{float(x):.10g}"


# ---------------------------------------------------------------------------
# gen-data

def _gen_span(task):
    """Generate a contiguous index span; used by the worker pool, so it must
    stay a module-level function and take plain picklable arguments."""
    gen_cfg, seed, count, ratio, network_text, lo, hi = task
    graph = parse_network(network_text) if network_text is not None else None
    return [generate_one(gen_cfg, seed, i, count, ratio, graph)[0]
            for i in range(lo, hi)]


def _map_spans(tasks, jobs):
    """Run the span tasks on a process pool, falling back to threads when the
    platform cannot spawn workers. Results keep task order either way, so the
    merged dataset is byte-identical for every jobs value."""
    if jobs <= 1 or len(tasks) <= 1:
        return [_gen_span(t) for t in tasks]
    try:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_gen_span, tasks))
    except (OSError, PermissionError, BrokenProcessPool):
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_gen_span, tasks))


def _run_gen_data(cfg: dict) -> int:
    started = _utcnow()
    out = _require(cfg, "out", "gen-data")
    try:
        count = int(cfg["count"])
        ratio = float(cfg["positive_ratio"])
        seed = int(cfg["seed"])
        jobs = int(cfg["jobs"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad gen-data option: {exc}")
    if count < 1:
        raise ConfigError("--count must be >= 1")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("--positive-ratio must lie in [0, 1]")
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    _refuse_overwrite([out], cfg["force"])

    inputs = {}
    network_text = None
    if cfg["network"]:
        if not os.path.isfile(cfg["network"]):
            raise ConfigError(f"network file not found: {cfg['network']}")
        inputs[cfg["network"]] = sha256_file(cfg["network"])
        with open(cfg["network"], encoding="utf-8") as fh:
            network_text = fh.read()
        try:
            parse_network(network_text)
        except NetworkError as exc:
            raise ConfigError(f"cannot parse network file: {exc}")

    gen_cfg = GenConfig()
    span = max(1, -(-count // max(jobs, 1)))
    tasks = [(gen_cfg, seed, count, ratio, network_text, lo,
              min(lo + span, count)) for lo in range(0, count, span)]
    records = [rec for part in _map_spans(tasks, jobs) for rec in part]

    atomic_write_text(out, "\n".join(record_to_json(r) for r in records) + "\n")
    _write_manifest(out, "gen-data", cfg, inputs, [out], started)
    n_pos = sum(1 for r in records if r.positive)
    print(f"wrote {len(records)} scenarios ({n_pos} positive) to {out}")
    return 0


# ---------------------------------------------------------------------------
# train

def _read_records(path: str, what: str):
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    records = read_dataset(path)
    if not records:
        raise ConfigError(f"{what} is empty: {path}")
    return records


def _save_checkpoint_atomic(path: str, state: dict) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    os.close(fd)
    try:
        ad.save_checkpoint(tmp, state)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _log_lines(rows) -> list[str]:
    """CSV body: the per-step rows, one aggregate row per epoch, and any
    validation rows, grouped in epoch order."""
    lines = []
    for epoch in sorted({r["epoch"] for r in rows}):
        erows = [r for r in rows if r["epoch"] == epoch]
        steps = [r for r in erows if r["split"] == "train"]
        for r in steps:
            lines.append(f"{r['step']},{epoch},train,{_fmt(r['L1'])},"
                         f"{_fmt(r['L2'])},{_fmt(r['L3'])},{_fmt(r['L'])}")
        if steps:
            agg = [float(np.mean([r[k] for r in steps]))
                   for k in ("L1", "L2", "L3", "L")]
            lines.append(f"{steps[-1]['step']},{epoch},epoch,"
                         + ",".join(_fmt(v) for v in agg))
        for r in (r for r in erows if r["split"] == "val"):
            lines.append(f"{r['step']},{epoch},val,{_fmt(r['L1'])},"
                         f"{_fmt(r['L2'])},{_fmt(r['L3'])},{_fmt(r['L'])}")
    return lines


def _run_train(cfg: dict) -> int:
    started = _utcnow()
    data = _require(cfg, "data", "train")
    out = _require(cfg, "out", "train")
    log_path = cfg["log"] or out + ".log.csv"
    sidecar_path = out + ".json"
    _refuse_overwrite([out, log_path, sidecar_path], cfg["force"])

    inputs = {}
    if os.path.isfile(data):
        inputs[data] = sha256_file(data)
    records = _read_records(data, "dataset")
    frames, fps = records[0].frames, records[0].fps

    val_records = None
    if cfg["val_data"]:
        val_records = _read_records(cfg["val_data"], "validation dataset")
        inputs[cfg["val_data"]] = sha256_file(cfg["val_data"])

    resume_state = None
    start_epoch = 0
    if cfg["resume"]:
        if not os.path.isfile(cfg["resume"]):
            raise ConfigError(f"resume checkpoint not found: {cfg['resume']}")
        inputs[cfg["resume"]] = sha256_file(cfg["resume"])
        resume_state = ad.load_checkpoint(cfg["resume"])
        if "meta.epochs_done" in resume_state:
            start_epoch = int(np.asarray(resume_state["meta.epochs_done"]))
        prev_sidecar = cfg["resume"] + ".json"
        if os.path.isfile(prev_sidecar):
            with open(prev_sidecar, encoding="utf-8") as fh:
                snap = json.load(fh)
            cfg["feature_dim"] = snap["model"]["feature_dim"]
            cfg["max_objects"] = snap["model"]["max_objects"]

    try:
        model_cfg = ModelConfig(feature_dim=int(cfg["feature_dim"]),
                                max_objects=int(cfg["max_objects"]))
        feature_cfg = FeatureConfig(feature_dim=model_cfg.feature_dim,
                                    max_objects=model_cfg.max_objects)
        train_cfg = TrainConfig(learning_rate=float(cfg["learning_rate"]),
                                epochs=int(cfg["epochs"]),
                                batch_size=int(cfg["batch_size"]),
                                seed=int(cfg["seed"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train option: {exc}")
    loss_cfg = LossConfig.for_frames(frames, fps=fps)

    params = ModelParams.init(model_cfg, stream_rng(train_cfg.seed, "init"))
    opt_state = None
    if resume_state is not None:
        try:
            params.load_state_dict(resume_state)
        except (KeyError, ValueError) as exc:
            raise ConfigError(
                f"resume checkpoint does not fit the model: {exc}")
        opt_state = {k: v for k, v in resume_state.items()
                     if k.startswith("opt.")} or None
        if train_cfg.epochs < start_epoch:
            raise ConfigError(
                f"checkpoint already covers {start_epoch} epochs; "
                f"--epochs must be >= {start_epoch}")

    result = train(records, params, model_cfg, feature_cfg, loss_cfg,
                   train_cfg, val_records=val_records,
                   start_epoch=start_epoch, opt_state=opt_state)

    state = dict(result.params.state_dict())
    state.update(result.opt_state)
    state["meta.epochs_done"] = np.array(float(train_cfg.epochs))
    _save_checkpoint_atomic(out, state)

    snapshot = {
        "model": model_cfg.to_dict(),
        "features": dataclasses.asdict(feature_cfg),
        "loss": dataclasses.asdict(loss_cfg),
        "train": dataclasses.asdict(train_cfg),
        "frames": frames,
        "fps": fps,
        "epochs_done": train_cfg.epochs,
    }
    atomic_write_text(sidecar_path,
                      json.dumps(snapshot, indent=2, sort_keys=True) + "\n")

    header = "step,epoch,split,L1,L2,L3,L"
    atomic_write_text(log_path,
                      "\n".join([header] + _log_lines(result.log)) + "\n")
    _write_manifest(out, "train", cfg, inputs,
                    [out, sidecar_path, log_path], started)

    ran = train_cfg.epochs - start_epoch
    if ran:
        print(f"trained {ran} epochs on {len(records)} scenarios; "
              f"final loss {result.final_loss:.6f}; checkpoint at {out}")
    else:
        print(f"wrote initial checkpoint (no epochs run) to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _run_eval(cfg: dict) -> int:
    started = _utcnow()
    data = _require(cfg, "data", "eval")
    ckpt = _require(cfg, "checkpoint", "eval")
    out = _require(cfg, "out", "eval")
    curves_path = cfg["curves"] or out + ".curves.csv"
    try:
        threshold = float(cfg["threshold"])
        jobs = int(cfg["jobs"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad eval option: {exc}")
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"--threshold must lie in [0, 1], got {threshold}")
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    _refuse_overwrite([out, curves_path], cfg["force"])

    if not os.path.isfile(ckpt):
        raise ConfigError(f"checkpoint not found: {ckpt}")
    sidecar_path = ckpt + ".json"
    if not os.path.isfile(sidecar_path):
        raise ConfigError(f"missing checkpoint config sidecar: {sidecar_path}")
    inputs = {ckpt: sha256_file(ckpt), sidecar_path: sha256_file(sidecar_path)}
    if os.path.isfile(data):
        inputs[data] = sha256_file(data)
    records = _read_records(data, "dataset")

    with open(sidecar_path, encoding="utf-8") as fh:
        snap = json.load(fh)
    try:
        model_cfg = ModelConfig.from_dict(snap["model"])
        feature_cfg = FeatureConfig(**snap["features"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad checkpoint sidecar: {exc}")

    params = ModelParams.init(model_cfg, np.random.default_rng(0))
    state = ad.load_checkpoint(ckpt)
    try:
        params.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not match its sidecar: {exc}")

    try:
        report, curves = evaluate(records, params, model_cfg, feature_cfg,
                                  threshold=threshold, jobs=jobs)
    except ValueError as exc:
        raise ConfigError(str(exc))

    atomic_write_text(out, json.dumps(report.to_dict(), indent=2,
                                      sort_keys=True) + "\n")
    lines = ["video_id,frame,u"]
    for i, rec in enumerate(records):
        for t in range(rec.frames):
            lines.append(f"{rec.id},{t + 1},{_fmt(curves[i, t])}")
    atomic_write_text(curves_path, "\n".join(lines) + "\n")
    _write_manifest(out, "eval", cfg, inputs, [out, curves_path], started)
    print(f"AP {report.ap:.4f}, mTTA {report.mtta:.4f} s over "
          f"{len(records)} videos (threshold {threshold})")
    return 0


# ---------------------------------------------------------------------------

_RUNNERS = {"gen-data": _run_gen_data, "train": _run_train, "eval": _run_eval}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        cfg = _resolve(args.command, args)
        return _RUNNERS[args.command](cfg)
    except ConfigError as exc:
        print(f"crashcast: error: {exc}", file=sys.stderr)
        return 2
    except (GenerationError, NetworkError, TrainingDivergedError, OSError,
            ValueError, KeyError) as exc:
        print(f"crashcast: error: {exc}", file=sys.stderr)
        return 3


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
