"""Experiment harness: ``sqlossflow <command> --config <path> [--jobs N] [--output-dir P]``.

The config is a single JSON document, parsed strictly: unknown keys and
sections that do not belong to the chosen command are errors. Every run
writes its trace CSV, checkpoint and summary JSON under a file stem derived
from a hash of the run's own config; a manifest records the config, library
versions, wall time and per-run outcome.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .datasets_io import SyntheticSpec, generate, load_checkpoint, load_csv, save_checkpoint
from .diagnostics import (
    RunRecord,
    constraint_residuals,
    nc_metrics,
    penultimate_features,
    projection_orthogonality_probe,
    run_record,
    sweep_compare,
)
from .flow_dynamics import (
    FlowConfig,
    FlowDivergence,
    flow_state,
    integrate,
    rho_equilibrium,
    singularity_probe,
)
from .net_core import NetworkParams, NormalizedNet, decompose, margins, normalized_forward_batch, recompose
from .sgd_train import TrainConfig, TrainingDivergence, effective_lambda, init_network, train

log = logging.getLogger("sqlossflow")

COMMANDS = ("flow", "train", "diagnose", "sweep")
TOP_KEYS = {"command", "dataset", "network", "flow", "train", "sweep", "diagnose", "output_dir"}
NEEDS = {
    "flow": {"dataset", "network", "flow"},
    "train": {"dataset", "network", "train"},
    "diagnose": {"dataset", "diagnose"},
    "sweep": {"dataset", "network", "sweep"},
}
NETWORK_KEYS = {"hidden", "seed", "ensure_average_separability"}
FLOW_EXTRA = {"rho0"}
SWEEP_FLOW_KEYS = {"lambda", "rho0", "seed"}
SWEEP_TRAIN_KEYS = {"weight_decay", "init_frobenius", "normalize", "seed"}


class ConfigError(ValueError):
    pass


def _strict(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _flow_cfg(sec: dict) -> tuple[FlowConfig, float]:
    names = {f.name for f in fields(FlowConfig)} - {"lam"}
    _strict(sec, names | {"lambda"} | FLOW_EXTRA, "flow")
    kw = {k: v for k, v in sec.items() if k in names}
    return FlowConfig(lam=float(sec.get("lambda", 0.0)), **kw), float(sec.get("rho0", 0.01))


def _train_cfg(sec: dict) -> TrainConfig:
    _strict(sec, {f.name for f in fields(TrainConfig)}, "train")
    return TrainConfig(**sec)


def validate_config(cfg: dict) -> dict:
    """Check structure and key names; returns the config unchanged."""
    _strict(cfg, TOP_KEYS, "config")
    cmd = cfg.get("command")
    if cmd not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}, got {cmd!r}")
    present = set(cfg) - {"command", "output_dir"}
    need = set(NEEDS[cmd])
    if cmd == "sweep":
        base = present & {"flow", "train"}
        if len(base) != 1:
            raise ConfigError("a sweep needs exactly one of the 'flow' or 'train' sections")
        need |= base
    missing = sorted(need - present)
    if missing:
        raise ConfigError(f"command {cmd!r} is missing sections: {', '.join(missing)}")
    extra = sorted(present - need)
    if extra:
        raise ConfigError(f"command {cmd!r} does not take sections: {', '.join(extra)}")

    ds = cfg["dataset"]
    if isinstance(ds, dict) and "csv" in ds:
        _strict(ds, {"csv", "val_csv"}, "dataset")
    else:
        _strict(ds, {f.name for f in fields(SyntheticSpec)}, "dataset")
        SyntheticSpec(**ds)
    if "network" in cfg:
        _strict(cfg["network"], NETWORK_KEYS, "network")
    if "flow" in cfg:
        _flow_cfg(cfg["flow"])
    if "train" in cfg:
        _train_cfg(cfg["train"])
    if "diagnose" in cfg:
        _strict(cfg["diagnose"], {"checkpoint"}, "diagnose")
        if "checkpoint" not in cfg["diagnose"]:
            raise ConfigError("diagnose section needs a 'checkpoint' path")
    if cmd == "sweep":
        allowed = SWEEP_FLOW_KEYS if "flow" in cfg else SWEEP_TRAIN_KEYS
        _strict(cfg["sweep"], allowed, "sweep")
        for k, v in cfg["sweep"].items():
            if not isinstance(v, list) or not v:
                raise ConfigError(f"sweep.{k} must be a non-empty list")
    return cfg


def _resolve(cfg: dict, base: Path) -> dict:
    """Make file paths in the config absolute, relative to the config file."""
    cfg = json.loads(json.dumps(cfg))
    for sec, key in (("dataset", "csv"), ("dataset", "val_csv"), ("diagnose", "checkpoint")):
        if sec in cfg and key in cfg[sec]:
            cfg[sec][key] = str((base / cfg[sec][key]).resolve())
    return cfg


def load_data(ds: dict):
    if "csv" in ds:
        train_set = load_csv(ds["csv"])
        val = load_csv(ds["val_csv"]) if "val_csv" in ds else None
        return train_set, val
    train_set, val = generate(SyntheticSpec(**ds))
    return train_set, (val if len(val) else None)


def run_hash(run_cfg: dict) -> str:
    return hashlib.sha256(json.dumps(run_cfg, sort_keys=True).encode()).hexdigest()[:12]


def _nc_or_error(net, data) -> dict:
    try:
        H, w = penultimate_features(net, data.X)
        return nc_metrics(H, data.y, w).to_dict()
    except ValueError as exc:
        return {"error": str(exc)}


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def execute_flow(run_cfg: dict, out: Path) -> dict:
    h = run_hash(run_cfg)
    data, val = load_data(run_cfg["dataset"])
    net_sec = run_cfg["network"]
    fcfg, rho0 = _flow_cfg(run_cfg["flow"])
    widths = [data.dim] + list(net_sec.get("hidden", [])) + [1]
    V = decompose(init_network(widths, 1.0, net_sec.get("seed", 0))).V
    state = flow_state(NormalizedNet(rho0, V), data)
    if net_sec.get("ensure_average_separability", True) and float(state.f @ data.y) < 0:
        V[-1] = -V[-1]
        state = flow_state(NormalizedNet(rho0, V), data)
    try:
        trace = integrate(state, data, fcfg, val=val)
    except FlowDivergence as exc:
        if exc.trace is not None:
            exc.trace.to_csv(out / f"trace_{h}.failed.csv")
        raise
    trace.to_csv(out / f"trace_{h}.csv")
    final = trace.final
    save_checkpoint(final.net, out / f"checkpoint_{h}.json")
    try:
        rho_eq = rho_equilibrium(final.f, data.y, fcfg.lam)
    except ZeroDivisionError:
        rho_eq = None
    probe = singularity_probe(final, data, fcfg.tol_interpolation)
    summary = {
        "run_id": h,
        "kind": "flow",
        "converged": trace.converged,
        "t_final": final.t,
        "steps": trace.steps,
        "lambda": fcfg.lam,
        "rho": final.rho,
        "rho_eq": rho_eq,
        "eq_residual": None if not rho_eq or final.rho == 0 else abs(final.rho - rho_eq) / final.rho,
        "singularity": asdict(probe),
        "neural_collapse": _nc_or_error(final.net, data),
        "events": trace.events,
    }
    _dump(out / f"summary_{h}.json", summary)
    rec = run_record(h, trace, fcfg.lam, rho0)
    return {"run_id": h, "summary": summary, "record": asdict(rec)}


def execute_train(run_cfg: dict, out: Path) -> dict:
    h = run_hash(run_cfg)
    data, val = load_data(run_cfg["dataset"])
    tcfg = _train_cfg(run_cfg["train"])
    hidden = run_cfg["network"].get("hidden", [])
    try:
        state, trace = train(data, tcfg, hidden, val=val)
    except TrainingDivergence as exc:
        if exc.trace is not None:
            exc.trace.to_csv(out / f"trace_{h}.failed.csv")
        raise
    trace.to_csv(out / f"trace_{h}.csv")
    save_checkpoint(state.net, out / f"checkpoint_{h}.json")
    lam = effective_lambda(tcfg, len(data))
    f = normalized_forward_batch(decompose(state.net), data.X)
    rho = state.net.rho
    summary = {
        "run_id": h,
        "kind": "train",
        "steps": state.step,
        "effective_lambda": lam,
        "rho": rho,
        "rho_eq": rho_equilibrium(f, data.y, lam) if lam + float(f @ f) > 0 else None,
        "final": trace.last,
        "neural_collapse": _nc_or_error(state.net, data),
    }
    _dump(out / f"summary_{h}.json", summary)
    init = tcfg.init_frobenius if not isinstance(tcfg.init_frobenius, list) else tcfg.init_frobenius[0]
    rec = run_record(h, trace, tcfg.weight_decay, init)
    return {"run_id": h, "summary": summary, "record": asdict(rec)}


def _execute(kind: str, run_cfg: dict, out: str) -> dict:
    fn = execute_flow if kind == "flow" else execute_train
    try:
        return fn(run_cfg, Path(out))
    except Exception as exc:  # reported per run in the manifest
        return {"run_id": run_hash(run_cfg), "error": f"{type(exc).__name__}: {exc}"}


def sweep_grid(cfg: dict) -> list:
    kind = "flow" if "flow" in cfg else "train"
    sweep = cfg["sweep"]
    keys = sorted(sweep)
    runs = []
    for combo in itertools.product(*(sweep[k] for k in keys)):
        rc = {"dataset": cfg["dataset"], "network": dict(cfg["network"]), kind: dict(cfg[kind])}
        for k, v in zip(keys, combo):
            if k == "seed" and kind == "flow":
                rc["network"]["seed"] = v
            else:
                rc[kind][k] = v
        runs.append(rc)
    return runs


def diagnose(checkpoint, data, out: Path) -> dict:
    """Margins, constraint residuals, weight-structure probes and NC statistics for a saved network."""
    net = load_checkpoint(checkpoint)
    if net.input_dim != data.dim:
        raise ValueError(f"checkpoint expects inputs of dimension {net.input_dim}, dataset has {data.dim}")
    if isinstance(net, NetworkParams):
        nnet = decompose(net)
    elif net.mode == "row":
        nnet = decompose(recompose(net))
    else:
        nnet = net
    m = margins(nnet, data)
    st = flow_state(nnet, data)
    res = constraint_residuals(nnet, data)
    report = {
        "checkpoint": str(checkpoint),
        "rho": nnet.rho,
        "margins": {
            "values": m.tolist(),
            "min": float(m.min()),
            "mean": float(m.mean()),
            "max": float(m.max()),
            "inverse_rho": (1.0 / nnet.rho) if nnet.rho > 0 else None,
        },
        "constraint_residuals": asdict(res),
        "projection_orthogonality": projection_orthogonality_probe(nnet),
        "singularity": asdict(singularity_probe(st, data)),
        "neural_collapse": _nc_or_error(nnet, data),
    }
    _dump(out / "diagnose.json", report)
    return report


def run(cfg: dict, output_dir=None, jobs: int = 1, base_dir: Path | None = None) -> int:
    """Execute a validated config; returns the process exit status."""
    t0 = time.perf_counter()
    validate_config(cfg)
    cfg = _resolve(cfg, base_dir or Path.cwd())
    target = output_dir or cfg.get("output_dir")
    if not target:
        raise ConfigError("no output directory: set output_dir in the config or pass --output-dir")
    out = Path(target)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_test"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None

    cmd = cfg["command"]
    results = []
    if cmd == "diagnose":
        try:
            data, _ = load_data(cfg["dataset"])
            diagnose(cfg["diagnose"]["checkpoint"], data, out)
            results.append({"run_id": "diagnose", "files": ["diagnose.json"]})
        except Exception as exc:
            results.append({"run_id": "diagnose", "error": f"{type(exc).__name__}: {exc}"})
    else:
        kind = cmd if cmd != "sweep" else ("flow" if "flow" in cfg else "train")
        run_cfgs = sweep_grid(cfg) if cmd == "sweep" else [{k: cfg[k] for k in ("dataset", "network", kind)}]
        if jobs > 1 and len(run_cfgs) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_execute, [kind] * len(run_cfgs), run_cfgs, [str(out)] * len(run_cfgs)))
        else:
            results = [_execute(kind, rc, str(out)) for rc in run_cfgs]
        for rc, r in zip(run_cfgs, results):
            r["config"] = rc
            if "error" in r:
                log.error("run %s failed: %s", r["run_id"], r["error"])
        if cmd == "sweep":
            recs = []
            for rc, r in zip(run_cfgs, results):
                if "record" in r:
                    recs.append(RunRecord(**r["record"]))
                else:
                    sec = rc[kind]
                    lam = sec.get("lambda", sec.get("weight_decay", 0.0))
                    init = sec.get("rho0", sec.get("init_frobenius", 0.0))
                    recs.append(RunRecord(r["run_id"], lam, init, *([float("nan")] * 4), error=r["error"]))
            sweep_compare(recs).to_json(out / "sweep_report.json")

    manifest = {
        "config": cfg,
        "versions": {
            "sqlossflow": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_time_s": time.perf_counter() - t0,
        "runs": [
            {k: v for k, v in r.items() if k in ("run_id", "config", "error", "files")}
            for r in results
        ],
    }
    _dump(out / "manifest.json", manifest)
    return 1 if any("error" in r for r in results) else 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sqlossflow", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--jobs", type=int, default=1, help="parallel runs for sweeps")
    ap.add_argument("--output-dir", default=None, help="overrides output_dir in the config")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    path = Path(args.config)
    try:
        cfg = json.loads(path.read_text())
        if cfg.get("command", args.command) != args.command:
            raise ConfigError(f"config is for command {cfg.get('command')!r}, not {args.command!r}")
        cfg.setdefault("command", args.command)
        status = run(cfg, args.output_dir, args.jobs, base_dir=path.parent.resolve())
    except (ConfigError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2
    if status:
        log.error("one or more runs failed; see manifest.json")
    return status


if __name__ == "__main__":
    sys.exit(main())
