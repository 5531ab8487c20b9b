"""Command line entry point: ``funcdiff <command> CONFIG [--set key=value ...]``.

Configs are YAML documents.  Unknown keys are rejected and leaf values can
be overridden with dotted paths, e.g. ``--set train.optim.steps=100``.
Relative output paths land in ``output_dir`` (config), else in the
directory named by ``FUNCDIFF_OUTPUT_DIR``, else in the working directory.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 failed check.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import pipeline
from .diffusion import DiffusionSchedule, TrajectoryBlowUp
from .guidance import GuidanceBlowUp
from .io import DATA_FORMAT, SAMPLES_FORMAT, FormatError, read_container, write_container
from .metrics import energy_score, rmse
from .nets.params import load_checkpoint, save_checkpoint
from .nets.score import ScoreModel
from .oracle import identity_suite
from .tasks import Observation, get_task
from .training import (TrainConfig, config_dict, conditional_dsm_loss, dsm_loss, sample_times, sgt_loss,
                       train_conditional, train_sgt, train_unconditional)

log = logging.getLogger("funcdiff")

ENV_OUTPUT = "FUNCDIFF_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class _Required:
    def __repr__(self):
        return "<required>"


REQUIRED = _Required()
# a dict default marked OPEN accepts arbitrary keys (checked by the consumer)
OPEN = "__open__"

COMMON = {"task": REQUIRED, "task_options": {OPEN: True}, "seed": 0, "output_dir": None, "workers": 1}
OPTIM = {"batch": 64, "steps": 5000, "lr_start": 1e-4, "lr_end": 1e-5, "norm": "L2", "time_law": "uniform",
         "weighting": "none", "clip": 1.0, "log_every": 50}
SCHEDULE = {"T": 10.0, "t_min": 1e-3, "n_steps": 1000, "spacing": "log"}
SCHEMAS = {
    "gen-data": {**COMMON, "data": {"n": 100, "observe": True, "out": "data.fdd"}},
    "train": {**COMMON, "train": {"mode": REQUIRED, "data": REQUIRED, "frozen": None, "k": 0,
                                  "arch": {OPEN: True}, "optim": OPTIM, "out": REQUIRED, "log": None}},
    "sample": {**COMMON, "sample": {
        "method": REQUIRED, "checkpoint": None, "guidance_checkpoint": None, "gamma": None,
        "jacobian_mode": "full", "data": None, "simulate": False, "n_signals": 8, "signals": None,
        "n_samples": 200, "schedule": SCHEDULE, "out": "samples.fds"}},
    "oracle-check": {"oracle": {"nus": [0.5, 1.0, 2.0], "times": [0.01, 0.1, 0.5, 1.0, 2.0, 5.0],
                                "n_modes": 32, "n_observed": 8, "s2": 0.01, "tol": 1e-10,
                                "mc_draws": 1000000, "seed": 0, "perturb_gain": 0.0}},
    "bench": {**COMMON, "bench": {OPEN: True}},
}
ARCH_KEYS = {"grid": {"width", "layers", "modes", "hidden_time"}, "coeff": {"hidden", "blocks"}}
METHODS = ("uncond", "fundps", "sgt", "conditional")


# -- configuration ----------------------------------------------------------


def resolve(schema: dict, given: dict, path: str = "") -> dict:
    """Fill defaults and reject unknown or missing keys; errors name the dotted key."""
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"{path.rstrip('.') or 'config'}: expected a mapping")
    if schema.get(OPEN):
        return copy.deepcopy(given)
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key {path}{unknown[0]!s}")
    out = {}
    for key, default in schema.items():
        if isinstance(default, dict):
            out[key] = resolve(default, given.get(key), f"{path}{key}.")
        elif key in given:
            out[key] = given[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing required config key {path}{key}")
        else:
            out[key] = copy.deepcopy(default)
    return out


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg) if cfg else {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not a mapping")
        node[parts[-1]] = _scalar(yaml.safe_load(raw))
    return cfg


def _scalar(value):
    # YAML 1.1 reads "1e-3" (no dot) as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def load_config(path, overrides, command: str) -> dict:
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except yaml.YAMLError as err:
            raise ConfigError(f"config {path} is not valid YAML: {err}") from err
    return resolve(SCHEMAS[command], apply_overrides(raw, overrides))


def output_path(cfg: dict, name) -> Path:
    p = Path(name)
    if p.is_absolute():
        return p
    base = cfg.get("output_dir") or os.environ.get(ENV_OUTPUT) or "."
    return Path(base) / p


def input_path(cfg: dict, name) -> Path:
    p = Path(name)
    if p.is_absolute() or p.exists():
        return p
    alt = output_path(cfg, name)
    if alt.exists():
        return alt
    raise ConfigError(f"input file {name} not found")


def make_task(cfg: dict):
    try:
        return get_task(cfg["task"], **cfg["task_options"])
    except TypeError as err:
        raise ConfigError(f"task_options: {err}") from err
    except ValueError as err:
        raise ConfigError(f"task: {err}") from err


def task_law(task) -> dict:
    """Scalar attributes that define the task's data law and observation model."""
    law = {k: v for k, v in vars(task).items()
           if not k.startswith("_") and (v is None or isinstance(v, (bool, int, float, str)))}
    law["name"] = task.name
    law["grid"] = None if task.grid is None else task.grid.n
    law["state_size"] = task.state_size
    return law


def write_sidecar(path: Path, meta: dict):
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str))


# -- data files -------------------------------------------------------------


def save_dataset(path, task, x0, obs: Observation | None, cfg: dict):
    arrays = {"x0": x0}
    header = {"format": DATA_FORMAT, "task": task.name, "grid": None if task.grid is None else task.grid.n,
              "law": task_law(task), "seed": cfg["seed"], "n": int(len(x0)), "config": cfg}
    if obs is not None:
        arrays["obs_values"] = obs.values
        if obs.locations is not None:
            arrays["obs_locations"] = obs.locations
        header.update(noise=obs.noise, m=obs.m)
    write_container(path, header, arrays)
    meta = {k: v for k, v in header.items()}
    write_sidecar(Path(path), meta)


def load_dataset(path):
    """Return ``(header, x0, obs or None)``."""
    header, arrays = read_container(path, expect_format=DATA_FORMAT)
    obs = None
    if "obs_values" in arrays:
        obs = Observation(header["task"], arrays["obs_values"], header["noise"],
                          arrays.get("obs_locations"), header.get("m"))
    return header, arrays["x0"], obs


# -- commands ---------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    task = make_task(cfg)
    d = cfg["data"]
    rng = np.random.default_rng(cfg["seed"])
    x0 = task.generate(int(d["n"]), rng)
    obs = task.observe(x0, rng) if d["observe"] else None
    out = output_path(cfg, d["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, task, x0, obs, cfg)
    print(f"wrote {len(x0)} {task.name} signals to {out}")
    return EXIT_OK


def _train_config(cfg, log_path) -> TrainConfig:
    try:
        return TrainConfig(**cfg["train"]["optim"], seed=cfg["seed"], log_path=log_path)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"train.optim: {err}") from err


def _check_arch(task, arch):
    allowed = ARCH_KEYS["grid" if task.grid is not None else "coeff"]
    bad = sorted(set(arch) - allowed)
    if bad:
        raise ConfigError(f"unknown config key train.arch.{bad[0]}")


def checkpoint_loss(task, mode, models: dict, x0, tcfg: TrainConfig, seed: int, frozen=None, k_exp=0.0):
    """Training loss on a fixed evaluation batch; the value stored as ``final_loss``."""
    rng = np.random.default_rng(seed + 7919)
    C = task.covariance()
    schedule = DiffusionSchedule()
    xb = np.asarray(x0[: tcfg.batch], dtype=float)
    t = sample_times(rng, len(xb), schedule, tcfg.time_law)
    eps = rng.standard_normal((len(xb), C.basis.size))
    if mode == "unconditional":
        net = pipeline.build_net(models["score"])
        loss, _ = dsm_loss(net, models["score"].as_vars(), xb, C, schedule, tcfg, rng, t=t, eps=eps)
    elif mode == "conditional":
        obs = task.observe(xb, rng)
        net = pipeline.build_net(models["score"])
        loss, _ = conditional_dsm_loss(net, models["score"].as_vars(), xb, task.cond_features(obs), C,
                                       schedule, tcfg, rng, t=t, eps=eps)
    else:
        obs = task.observe(xb, rng)
        param = pipeline.GuidanceParametrisation(models["u1"], models["u2"], k_exp,
                                                 pipeline.grad_phi_fn(task), task.cond_features)
        pv = {"u1": param.u1.as_vars(), "u2": param.u2.as_vars()}
        loss, _ = sgt_loss(param, pv, frozen, xb, obs, C, schedule, tcfg, rng, t=t, eps=eps)
    return float(loss.value)


def cmd_train(cfg: dict) -> int:
    task = make_task(cfg)
    tr = cfg["train"]
    mode = tr["mode"]
    if mode not in ("unconditional", "conditional", "sgt"):
        raise ConfigError(f"train.mode must be unconditional, conditional or sgt, got {mode!r}")
    if mode == "sgt" and not tr["frozen"]:
        raise ConfigError("train.frozen: sgt mode needs a frozen unconditional checkpoint")
    _check_arch(task, tr["arch"])
    header, x0, _ = load_dataset(input_path(cfg, tr["data"]))
    if header["task"] != task.name or header["law"]["state_size"] != task.state_size:
        raise ConfigError(f"dataset {tr['data']} holds {header['task']} data of another shape")
    out = output_path(cfg, tr["out"])
    log_path = output_path(cfg, tr["log"] or str(Path(tr["out"]).with_suffix(".csv")))
    tcfg = _train_config(cfg, str(log_path))
    C, schedule = task.covariance(), DiffusionSchedule()
    frozen = None
    if mode == "sgt":
        models, _ = load_checkpoint(input_path(cfg, tr["frozen"]))
        if "score" not in models:
            raise ConfigError(f"train.frozen: {tr['frozen']} holds no score model")
        frozen = ScoreModel(models["score"])
    if mode == "unconditional":
        res = train_unconditional(pipeline.make_net(task, tr["arch"], False), x0, C, schedule, tcfg)
    elif mode == "conditional":
        res = train_conditional(pipeline.make_net(task, tr["arch"], True), x0, task, C, schedule, tcfg)
    else:
        if tr["k"] not in (0, 0.5, 1):
            raise ConfigError("train.k must be 0, 0.5 or 1")
        param = pipeline.guidance_param(task, pipeline.make_net(task, tr["arch"], True), tr["k"], cfg["seed"])
        res = train_sgt(param, frozen, x0, task, C, schedule, tcfg)
    final = checkpoint_loss(task, mode, res.models, x0, tcfg, cfg["seed"], frozen, tr["k"])
    meta = {"mode": mode, "task": task.name, "law": task_law(task), "k_exp": tr["k"], "train": config_dict(tcfg),
            "final_loss": final, "last_batch_loss": res.final_loss, "skipped_steps": res.skipped,
            "frozen": tr["frozen"], "config": cfg, "T": schedule.T, "t_min": schedule.t_min}
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, res.models, meta)
    write_sidecar(out, meta)
    print(f"final loss {final:.10g}")
    print(f"wrote checkpoint {out}")
    return EXIT_OK


def _schedule(cfg) -> DiffusionSchedule:
    try:
        return DiffusionSchedule(**cfg["sample"]["schedule"])
    except (TypeError, ValueError) as err:
        raise ConfigError(f"sample.schedule: {err}") from err


def _sampling_models(cfg, task):
    """Models and method metadata for ``cmd_sample``; loaded in each worker."""
    s = cfg["sample"]
    method = s["method"]
    kw, meta = {}, {"method": method}
    if method in ("uncond", "fundps", "sgt"):
        if not s["checkpoint"]:
            raise ConfigError(f"sample.checkpoint: method {method} needs an unconditional checkpoint")
        models, m = load_checkpoint(input_path(cfg, s["checkpoint"]))
        if "score" not in models or m.get("mode", "unconditional") != "unconditional":
            raise ConfigError(f"sample.checkpoint: {s['checkpoint']} is not an unconditional score model")
        kw["score"] = ScoreModel(models["score"])
    if method == "conditional":
        if not s["checkpoint"]:
            raise ConfigError("sample.checkpoint: method conditional needs a conditional checkpoint")
        models, m = load_checkpoint(input_path(cfg, s["checkpoint"]))
        if m.get("mode") != "conditional":
            raise ConfigError(f"sample.checkpoint: {s['checkpoint']} is not a conditional model")
        kw["cond_model"] = ScoreModel(models["score"])
    elif method == "fundps":
        gamma = s["gamma"] if s["gamma"] is not None else pipeline.default_gamma(task)
        if gamma is None:
            raise ConfigError(f"sample.gamma: no default scale for task {task.name}; set one")
        kw.update(gamma=float(gamma), jacobian_mode=s["jacobian_mode"])
        meta.update(gamma=float(gamma), jacobian_mode=s["jacobian_mode"])
    elif method == "sgt":
        if not s["guidance_checkpoint"]:
            raise ConfigError("sample.guidance_checkpoint: method sgt needs a trained guidance")
        models, m = load_checkpoint(input_path(cfg, s["guidance_checkpoint"]))
        if m.get("mode") != "sgt" and m.get("role") != "sgt":
            raise ConfigError(f"sample.guidance_checkpoint: {s['guidance_checkpoint']} is not an SGT checkpoint")
        kw["guidance"] = pipeline.load_guidance(task, input_path(cfg, s["guidance_checkpoint"]))
        meta["k_exp"] = kw["guidance"].k_exp
    elif method not in METHODS:
        raise ConfigError(f"sample.method must be one of {', '.join(METHODS)}")
    return kw, meta


def _signal_seed(seed: int, i: int) -> int:
    return seed + 100000 * (i + 1)


def _sample_worker(args):
    cfg, obs, i = args
    task = make_task(cfg)
    kw, _ = _sampling_models(cfg, task)
    s = cfg["sample"]
    return pipeline.sample_for(s["method"], task, obs, task.covariance(), _schedule(cfg), s["n_samples"],
                               _signal_seed(cfg["seed"], i), **kw)


def cmd_sample(cfg: dict) -> int:
    task = make_task(cfg)
    s = cfg["sample"]
    kw, meta = _sampling_models(cfg, task)
    schedule = _schedule(cfg)
    if s["simulate"]:
        rng = np.random.default_rng(cfg["seed"])
        gt = task.generate(int(s["n_signals"]), rng)
        obs = task.observe(gt, rng)
    elif s["data"]:
        header, gt, obs = load_dataset(input_path(cfg, s["data"]))
        if obs is None:
            raise ConfigError(f"sample.data: {s['data']} holds no observations")
    else:
        raise ConfigError("sample: give sample.data or set sample.simulate")
    idx = list(range(len(obs))) if s["signals"] is None else [int(i) for i in s["signals"]]
    jobs = [(cfg, obs.take(i), i) for i in idx]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            results = list(pool.map(_sample_worker, jobs))
    else:
        C = task.covariance()
        results = [pipeline.sample_for(s["method"], task, o, C, schedule, s["n_samples"],
                                       _signal_seed(cfg["seed"], i), **kw) for _, o, i in jobs]
    samples = np.stack(results)
    meta.update(format=SAMPLES_FORMAT, task=task.name, law=task_law(task), signals=idx,
                n_samples=s["n_samples"], n_steps=schedule.n_steps, T=schedule.T, t_min=schedule.t_min,
                spacing=schedule.spacing, final_denoise=True,
                seeds=[_signal_seed(cfg["seed"], i) for i in idx], chain_seed_rule="signal_seed + chain index",
                config=cfg)
    out = output_path(cfg, s["out"])
    write_container(out, meta, {"samples": samples, "ground_truth": gt[idx]})
    write_sidecar(out, meta)
    print(f"wrote {samples.shape[0]} x {samples.shape[1]} samples to {out}")
    return EXIT_OK


def evaluate_files(samples_path, gt_path, out_path) -> list[dict]:
    """Per-signal RMSE/ES rows plus a ``mean`` and ``std`` summary row."""
    meta, arrays = read_container(samples_path, expect_format=SAMPLES_FORMAT)
    samples = arrays["samples"]
    if gt_path is None:
        gt = arrays["ground_truth"]
    else:
        try:
            header, gt, _ = load_dataset(gt_path)
            gt = gt[meta["signals"]] if len(gt) != len(samples) else gt
        except FormatError:
            gt = read_container(gt_path, expect_format=SAMPLES_FORMAT)[1]["ground_truth"]
    if gt.shape[0] != samples.shape[0] or gt.shape[-1] != samples.shape[-1]:
        raise ValueError(f"samples {samples.shape} and ground truth {gt.shape} do not match")
    task = get_task(meta["task"], **meta["config"].get("task_options", {}))
    rows = []
    for i, (S, g) in enumerate(zip(samples, gt)):
        F, w = task.metric_embedding(S)
        G, _ = task.metric_embedding(g)
        rows.append({"signal": i, "rmse": rmse(F, G, weights=w), "es": energy_score(F, G, weights=w)})
    vals = np.array([[r["rmse"], r["es"]] for r in rows])
    rows.append({"signal": "mean", "rmse": float(vals[:, 0].mean()), "es": float(vals[:, 1].mean())})
    rows.append({"signal": "std", "rmse": float(vals[:, 0].std()), "es": float(vals[:, 1].std())})
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["signal", "rmse", "es"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if k != "signal" else v) for k, v in r.items()})
    return rows


def cmd_evaluate(samples, gt, out) -> int:
    out = out or str(Path(samples).with_suffix(".csv"))
    rows = evaluate_files(samples, gt, out)
    mean, std = rows[-2], rows[-1]
    print(f"RMSE {mean['rmse']:.4g} +- {std['rmse']:.4g}   ES {mean['es']:.4g} +- {std['es']:.4g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_oracle_check(cfg: dict) -> int:
    o = cfg["oracle"]
    report = identity_suite(o["nus"], o["times"], o["n_modes"], o["n_observed"], o["s2"], o["tol"],
                            o["mc_draws"], o["seed"], o["perturb_gain"])
    for r in report:
        extra = f"  stderr={np.round(r['stderr'], 6).tolist()}" if "stderr" in r else ""
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status}  {r['name']}: max error {r['max_error']:.3e} (threshold {r['threshold']}){extra}")
    failed = [r["name"] for r in report if not r["passed"]]
    if failed:
        print("failed: " + "; ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    try:
        pipeline.validate_bench_override(cfg["task"], cfg["bench"])
        bcfg = pipeline.bench_config(cfg["task"], {**cfg["bench"], "seed": cfg["seed"],
                                                   "task_options": cfg["task_options"]})
    except ValueError as err:
        raise ConfigError(str(err)) from err
    out = output_path(cfg, f"bench_{cfg['task']}")
    result = pipeline.run_bench(bcfg, out)
    for r in result.rows:
        print(f"{r['method']:>12}  RMSE {r['rmse_mean']:.4g} +- {r['rmse_std']:.4g}  "
              f"ES {r['es_mean']:.4g} +- {r['es_std']:.4g}")
    print(f"wrote {out / 'results.csv'}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="funcdiff", description="Function-space diffusion posterior sampling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "sample", "bench"):
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp = sub.add_parser("oracle-check")
    sp.add_argument("config", nargs="?")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp = sub.add_parser("evaluate")
    sp.add_argument("samples")
    sp.add_argument("ground_truth", nargs="?")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    commands = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
                "oracle-check": cmd_oracle_check, "bench": cmd_bench}
    try:
        if args.command == "evaluate":
            return cmd_evaluate(args.samples, args.ground_truth, args.out)
        return commands[args.command](load_config(args.config, args.set, args.command))
    except (ConfigError, FormatError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, TrajectoryBlowUp, GuidanceBlowUp) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
