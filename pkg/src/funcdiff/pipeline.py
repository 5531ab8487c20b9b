"""End-to-end benchmark runs: data, training, posterior sampling, metrics.

The CLI ``bench`` command and the demo scripts drive :func:`run_bench`.
Everything is seeded from one integer so a run is reproducible.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import DiffusionSchedule, GuidanceSpec, TrajectoryBlowUp, sample_array
from .guidance import GuidanceBlowUp, GuidanceParametrisation, TweedieGuidanceConfig, learned_spec, tweedie_spec
from .metrics import energy_score, rmse
from .nets.models import FNO, CoefficientMLP, Network, build_network
from .nets.params import load_checkpoint, save_checkpoint
from .nets.score import ScoreModel
from .tasks import Observation, Task, get_task
from .training import TrainConfig, train_conditional, train_sgt, train_unconditional

log = logging.getLogger(__name__)

#: FunDPS scales quoted for the heat task and for 2/4/6/8 observed shape modes
DEFAULT_GAMMA = {"heat": 1.3, "shape": {2: 10.0, 4: 20.0, 6: 100.0, 8: 165.0}}


def default_gamma(task: Task) -> float | None:
    if task.name == "heat":
        return DEFAULT_GAMMA["heat"]
    if task.name == "shape":
        return DEFAULT_GAMMA["shape"].get(task.m)
    return None


def make_net(task: Task, arch: dict, conditional: bool) -> Network:
    """FNO for grid tasks, residual MLP for coefficient tasks."""
    arch = dict(arch)
    if task.grid is not None:
        cond = task.cond_shape[0] if conditional else 0
        keys = ("width", "layers", "modes", "hidden_time")
        return FNO(cond_channels=cond, **{k: arch[k] for k in keys if k in arch})
    cond = task.cond_shape[0] if conditional else 0
    keys = ("hidden", "blocks")
    return CoefficientMLP(dim=task.state_size, cond_dim=cond, **{k: arch[k] for k in keys if k in arch})


def build_net(params) -> Network:
    return build_network(params.arch)


def grad_phi_fn(task: Task):
    """Likelihood gradient fed to learned guidance: Euclidean in the state vector."""
    return task.state_gradient


def guidance_param(task: Task, u1_net: Network, k_exp: float, seed: int, u2_init=0.01):
    return GuidanceParametrisation.initialise(u1_net, k_exp, grad_phi_fn(task), task.cond_features,
                                              seed=seed, u2_init=u2_init)


def load_guidance(task: Task, path, k_exp=None) -> GuidanceParametrisation:
    models, meta = load_checkpoint(path)
    k = meta.get("k_exp", 0.0) if k_exp is None else k_exp
    return GuidanceParametrisation(models["u1"], models["u2"], k, grad_phi_fn(task), task.cond_features)


# -- sampling ---------------------------------------------------------------


def method_spec(method: str, task: Task, obs: Observation, C, *, score=None, cond_model=None,
                guidance=None, gamma=None, jacobian_mode="full"):
    """``(GuidanceSpec, score_fn)`` for one observation and one method."""
    if method == "uncond":
        return GuidanceSpec(), score
    if method == "conditional":
        return GuidanceSpec("amortized", obs), cond_model.with_cond(task.cond_features(obs))
    if method == "fundps":
        cfg = TweedieGuidanceConfig(gamma, lambda f: task.phi(f, obs)[1], jacobian_mode,
                                    task.quadrature_weights())
        return tweedie_spec(cfg, C, obs), score
    if method == "sgt":
        return learned_spec(guidance, C, obs), score
    raise ValueError(f"unknown method {method!r}")


def sample_for(method, task, obs, C, schedule, n_samples, seed, **models):
    spec, score_fn = method_spec(method, task, obs, C, **models)
    return sample_array(spec, schedule, score_fn, C, n_samples, seed)


def score_ensemble(task: Task, samples, gt):
    """RMSE and ES of one ensemble in the task's metric space."""
    F, w = task.metric_embedding(samples)
    g, _ = task.metric_embedding(gt)
    return rmse(F, g, weights=w), energy_score(F, g, weights=w)


def search_gamma(task, score, C, schedule, signals, observations, grid, n_samples, seed):
    """Pick the FunDPS scale minimising mean RMSE over a few training signals.

    Diverging trajectories disqualify a scale.  Returns ``(gamma, table)``.
    """
    table = {}
    for gamma in grid:
        errs = []
        try:
            for i, x0 in enumerate(signals):
                S = sample_for("fundps", task, observations.take(i), C, schedule, n_samples, seed + 1000 * i,
                               score=score, gamma=gamma)
                errs.append(score_ensemble(task, S, x0)[0])
            table[gamma] = float(np.mean(errs))
        except (TrajectoryBlowUp, GuidanceBlowUp, FloatingPointError):
            table[gamma] = float("inf")
        log.info("gamma %.4g: mean RMSE %.4g", gamma, table[gamma])
    best = min(table, key=table.get)
    if not np.isfinite(table[best]):
        raise TrajectoryBlowUp("every FunDPS scale in the grid diverged")
    return best, table


# -- benchmark --------------------------------------------------------------


DESK = {
    "heat": {
        "n_train": 10000, "n_test": 64, "n_samples": 200,
        "task_options": {},
        "sample_schedule": {"n_steps": 100, "t_min": 1e-3},
        "uncond": {"arch": {"width": 32, "layers": 4, "modes": 16}, "train": {"steps": 5000, "batch": 64}},
        "conditional": {"arch": {"width": 32, "layers": 8, "modes": 16}, "train": {"steps": 10000, "batch": 64}},
        "sgt": {"arch": {"width": 32, "layers": 4, "modes": 16}, "train": {"steps": 2500, "batch": 64}, "k": [0]},
        "fundps": {"gamma": "search", "grid": [0.1, 0.4, 1.3, 2.5, 5.0, 10.0, 20.0, 40.0], "search_signals": 4, "search_samples": 32},
    },
    "sparse": {
        "n_train": 10000, "n_test": 64, "n_samples": 200,
        "task_options": {},
        "sample_schedule": {"n_steps": 100, "t_min": 1e-3},
        "uncond": {"arch": {"width": 32, "layers": 4, "modes": 16}, "train": {"steps": 5000, "batch": 64}},
        "conditional": {"arch": {"width": 32, "layers": 8, "modes": 16}, "train": {"steps": 10000, "batch": 64}},
        "sgt": {"arch": {"width": 32, "layers": 4, "modes": 16}, "train": {"steps": 2500, "batch": 64}, "k": [1]},
        "fundps": {"gamma": "search", "grid": [0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0], "search_signals": 4, "search_samples": 32},
    },
    "shape": {
        "n_train": 5000, "n_test": 64, "n_samples": 200,
        "task_options": {"m": 6},
        "sample_schedule": {"n_steps": 1000, "t_min": 1e-3},
        "uncond": {"arch": {"hidden": 256, "blocks": 4}, "train": {"steps": 5000, "batch": 64}},
        "conditional": {"arch": {"hidden": 256, "blocks": 4}, "train": {"steps": 10000, "batch": 64}},
        "sgt": {"arch": {"hidden": 256, "blocks": 4}, "train": {"steps": 2500, "batch": 64}, "k": [0]},
        "fundps": {"gamma": "search", "grid": [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 100.0], "search_signals": 5, "search_samples": 32},
    },
}

TRAIN_DEFAULTS = {"lr_start": 1e-3, "lr_end": 1e-5, "norm": "L2", "time_law": "log_uniform", "weighting": "sigma2"}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def bench_config(task: str, override: dict | None = None) -> dict:
    if task not in DESK:
        raise ValueError(f"unknown task {task!r}")
    return merge({"task": task, "seed": 0, "methods": ["fundps", "conditional", "sgt"],
                  "train_defaults": TRAIN_DEFAULTS, "reuse": False}, merge(DESK[task], override or {}))


_OPEN_SECTIONS = {"arch", "train", "task_options"}


def validate_bench_override(task: str, override: dict, template: dict | None = None, path: str = "bench."):
    """Reject keys that do not exist in the desk configuration of ``task``."""
    if template is None:
        template = bench_config(task)
    for key, value in (override or {}).items():
        if key not in template:
            raise ValueError(f"unknown config key {path}{key}")
        if isinstance(value, dict) and isinstance(template[key], dict) and key not in _OPEN_SECTIONS:
            validate_bench_override(task, value, template[key], f"{path}{key}.")


@dataclass
class BenchResult:
    rows: list
    per_signal: dict
    meta: dict


def _train_cfg(cfg, section, seed, log_path):
    return TrainConfig(**merge(cfg["train_defaults"], cfg[section]["train"]), seed=seed, log_path=str(log_path))


def run_bench(cfg: dict, out_dir, progress=print) -> BenchResult:
    """Full desk-scale comparison for one task; writes checkpoints and CSV tables to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = get_task(cfg["task"], **cfg.get("task_options", {}))
    C = task.covariance()
    train_schedule = DiffusionSchedule()
    samp = DiffusionSchedule(**merge({"T": 10.0, "t_min": 1e-3, "n_steps": 1000, "spacing": "log"},
                                     cfg["sample_schedule"]))
    seed = int(cfg["seed"])
    rng = np.random.default_rng(seed)
    data = task.generate(cfg["n_train"], rng)
    test = task.generate(cfg["n_test"], np.random.default_rng(seed + 1))
    obs = task.observe(test, np.random.default_rng(seed + 2))
    meta = {"config": cfg, "timings": {}}
    # a reused checkpoint keeps the training time recorded when it was made
    previous, reused = {}, set()
    if cfg.get("reuse") and (out / "bench_meta.json").exists():
        previous = json.loads((out / "bench_meta.json").read_text()).get("timings", {})

    def stage(name, fn):
        t0 = time.perf_counter()
        progress(f"[{task.name}] {name} ...")
        result = fn()
        meta["timings"][name] = time.perf_counter() - t0
        if name in reused and name in previous:
            meta["timings"][name] = previous[name]
        progress(f"[{task.name}] {name} done in {meta['timings'][name]:.1f}s")
        return result

    models = {}
    methods = cfg["methods"]

    def trained(role, conditional, section):
        path = out / f"{role}.ckpt"
        if cfg.get("reuse") and path.exists():
            reused.add(f"train {'conditional' if conditional else 'unconditional'}")
            return load_checkpoint(path)[0]["score"]
        net = make_net(task, cfg[section]["arch"], conditional)
        tcfg = _train_cfg(cfg, section, seed + 10 + len(models), out / f"{role}_metrics.csv")
        if conditional:
            res = train_conditional(net, data, task, C, train_schedule, tcfg)
        else:
            res = train_unconditional(net, data, C, train_schedule, tcfg)
        save_checkpoint(path, {"score": res.models["score"]}, {"role": role, "train": vars(tcfg)})
        return res.models["score"]

    score = ScoreModel(stage("train unconditional", lambda: trained("uncond", False, "uncond")))
    if "conditional" in methods:
        models["conditional"] = ScoreModel(stage("train conditional", lambda: trained("conditional", True, "conditional")))

    guidances = {}
    if "sgt" in methods:
        for k in cfg["sgt"]["k"]:
            def fit_sgt(k=k):
                path = out / f"sgt_k{k}.ckpt"
                if cfg.get("reuse") and path.exists():
                    reused.add(f"train sgt k={k}")
                    return load_guidance(task, path, k)
                param = guidance_param(task, make_net(task, cfg["sgt"]["arch"], True), k, seed + 20)
                tcfg = _train_cfg(cfg, "sgt", seed + 30, out / f"sgt_k{k}_metrics.csv")
                train_sgt(param, score, data, task, C, train_schedule, tcfg)
                save_checkpoint(path, param.models(), {"role": "sgt", "k_exp": k})
                return param
            guidances[k] = stage(f"train sgt k={k}", fit_sgt)

    gamma = None
    if "fundps" in methods:
        fcfg = cfg["fundps"]
        if fcfg["gamma"] == "search":
            n_s = fcfg["search_signals"]
            gamma, table = stage("fundps gamma search", lambda: search_gamma(
                task, score, C, samp, data[:n_s], task.observe(data[:n_s], np.random.default_rng(seed + 3)),
                fcfg["grid"], fcfg["search_samples"], seed + 4))
            meta["gamma_search"] = {str(k): v for k, v in table.items()}
        else:
            gamma = float(fcfg["gamma"])
        meta["gamma"] = gamma

    runs = []
    for m in methods:
        if m == "sgt":
            runs += [(f"sgt_k{k}", "sgt", {"score": score, "guidance": g}) for k, g in guidances.items()]
        elif m == "fundps":
            runs.append(("fundps", "fundps", {"score": score, "gamma": gamma}))
        elif m == "conditional":
            runs.append(("conditional", "conditional", {"cond_model": models["conditional"]}))
        elif m == "uncond":
            runs.append(("uncond", "uncond", {"score": score}))

    per_signal, rows = {}, []
    for label, method, kw in runs:
        def evaluate(method=method, kw=kw):
            vals = []
            for i in range(len(test)):
                try:
                    S = sample_for(method, task, obs.take(i), C, samp, cfg["n_samples"], seed + 100000 * (i + 1), **kw)
                    r, e = score_ensemble(task, S, test[i])
                    if not (np.isfinite(r) and np.isfinite(e)):
                        # finite but astronomically large states: overflow in the norm
                        raise TrajectoryBlowUp("non-finite ensemble metric")
                    vals.append((r, e))
                except (TrajectoryBlowUp, GuidanceBlowUp) as err:
                    log.warning("%s signal %d diverged: %s", method, i, err)
                    vals.append((float("nan"), float("nan")))
            return np.array(vals)
        vals = stage(f"sample {label}", evaluate)
        per_signal[label] = vals
        rows.append({"method": label, "rmse_mean": np.nanmean(vals[:, 0]), "rmse_std": np.nanstd(vals[:, 0]),
                     "es_mean": np.nanmean(vals[:, 1]), "es_std": np.nanstd(vals[:, 1]),
                     "diverged": int(np.isnan(vals[:, 0]).sum())})
    write_table(out / "results.csv", rows)
    with open(out / "per_signal.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "signal", "rmse", "es"])
        for label, vals in per_signal.items():
            for i, (r, e) in enumerate(vals):
                w.writerow([label, i, f"{r:.10g}", f"{e:.10g}"])
    (out / "bench_meta.json").write_text(json.dumps(meta, indent=1, default=str))
    return BenchResult(rows, per_signal, meta)


def write_table(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
