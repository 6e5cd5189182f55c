"""Command-line entry point: generate / train / analyze / evaluate.

Every command takes a JSON config (schema-validated, unknown keys rejected)
plus a few overriding flags, writes its outputs under one directory together
with a manifest that captures the fully resolved config, and uses exit codes
0 (success), 1 (usage or config error), 2 (numerical abort).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import jsonschema

from . import analysis, metrics, tasks_data, train_em, train_sgd
from .core import (DivergedError, Trajectory, generate, load_params,
                   load_trajectory, save_params, save_trajectory)
from .regularizers import RegSpec
from .tasks_data import (BURSTING_NEURON_PARAMS, NeuronParams, gen_addition,
                         gen_multiplication, load_trialset, save_trialset,
                         simulate_lorenz, simulate_neuron)

__version__ = "0.1.0"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schemas
# ---------------------------------------------------------------------------

_REG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["manifold_attractor", "l2_full", "l2_partial",
                          "orthogonal", "none"]},
        "tau": {"type": "number", "minimum": 0},
        "tau_a": {"type": "number", "minimum": 0},
        "tau_w": {"type": "number", "minimum": 0},
        "tau_h": {"type": "number", "minimum": 0},
        "m_reg": {"type": "integer", "minimum": 0},
    },
    "required": ["kind"],
}

GENERATE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["task"],
    "properties": {
        "task": {"enum": ["addition", "multiplication", "neuron", "lorenz"]},
        "seed": {"type": "integer"},
        "out": {"type": "string"},
        "R": {"type": "integer", "minimum": 1},
        "T": {"type": "integer", "minimum": 1},
        "neuron": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["paper-bursting"]},
                "params": {"type": "object"},
                "t_ms": {"type": "number", "exclusiveMinimum": 0},
                "dt_ms": {"type": "number", "exclusiveMinimum": 0},
                "sample_ms": {"type": "number", "exclusiveMinimum": 0},
                "v0": {"type": "number"},
                "h0": {"type": "number"},
                "n0": {"type": "number"},
                "obs_noise_std": {"type": "number", "minimum": 0},
            },
        },
        "lorenz": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sigma": {"type": "number"},
                "rho": {"type": "number"},
                "beta": {"type": "number"},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "z0": {"type": "array", "items": {"type": "number"},
                       "minItems": 3, "maxItems": 3},
                "noise_std": {"type": "number", "minimum": 0},
            },
        },
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["trainer", "data"],
    "properties": {
        "trainer": {"enum": ["sgd", "em"]},
        "data": {"type": "string"},
        "test_data": {"type": "string"},
        "out": {"type": "string"},
        "seed": {"type": "integer"},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "reg": _REG_SCHEMA,
        "resume_from": {"type": "string"},
        "checkpoint_every": {"type": "integer", "minimum": 1},
        "sgd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "minimum": 0},
                "clip": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "loss_kind": {"enum": ["mse_final_step", "cross_entropy_final_step"]},
                "model_kind": {"enum": ["plrnn", "vanilla_rnn"]},
                "M": {"type": "integer", "minimum": 1},
                "init_scheme": {"type": "string"},
                "init_scale": {"type": "number"},
                "task_weight": {"type": "number"},
                "correct_threshold": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "em": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "latent_dim": {"type": "integer", "minimum": 1},
                "obs_kind": {"enum": ["relu_gaussian", "linear_gaussian"]},
                "max_iter": {"type": "integer", "minimum": 1},
                "tol": {"type": "number"},
                "expectation_mode": {"enum": ["rectified_moments", "delta"]},
                "max_estep_iter": {"type": "integer", "minimum": 1},
                "sigma2_init": {"type": "number", "exclusiveMinimum": 0},
                "anneal_weights": {"type": "array",
                                   "items": {"type": "number",
                                             "exclusiveMinimum": 0}},
                "tau_sweep": {"type": "array", "items": {"type": "number"}},
                "tau_per_T": {"type": "boolean"},
                "standardize": {"type": "boolean"},
            },
        },
    },
}

ANALYZE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {"type": "string"},
        "out": {"type": "string"},
        "seed": {"type": "integer"},
        "fixed_points": {"type": "boolean"},
        "eig_bins": {"type": "integer", "minimum": 1},
        "cycles": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"k_max": {"type": "integer", "minimum": 2},
                           "n_samples": {"type": "integer", "minimum": 1}},
        },
        "theorems": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"T_max": {"type": "integer", "minimum": 10},
                           "z0": {"type": "array", "items": {"type": "number"}}},
        },
        "dataset": {"type": "string"},
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bins_per_dim": {"type": "integer", "minimum": 2},
                "gen_T": {"type": "integer", "minimum": 2},
                "gen_seed": {"type": "integer"},
                "burn_in": {"type": "integer", "minimum": 0},
                "psd_sample_rate_hz": {"type": "number", "exclusiveMinimum": 0},
                "psd_split_hz": {"type": "number", "exclusiveMinimum": 0},
                "psd_channel": {"type": "integer", "minimum": 0},
                "nstep": {"type": "integer", "minimum": 1},
            },
        },
        "sweep_dir": {"type": "string"},
    },
}


def _validate(config: dict, schema: dict) -> None:
    try:
        jsonschema.validate(config, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field '{where}': {exc.message}") from exc


def _reg_from_config(cfg: dict | None) -> RegSpec:
    if not cfg:
        return RegSpec()
    cfg = dict(cfg)
    tau = cfg.pop("tau", None)
    if tau is not None:
        for key in ("tau_a", "tau_w", "tau_h"):
            cfg.setdefault(key, tau)
    return RegSpec(**cfg)


def _git_describe() -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _write_manifest(out_dir: Path, command: str, config: dict) -> None:
    manifest = {
        "command": command,
        "config": config,
        "version": __version__,
        "git_describe": _git_describe(),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(config: dict, out_dir: Path) -> int:
    _validate(config, GENERATE_SCHEMA)
    task = config["task"]
    seed = int(config.get("seed", 0))
    out_dir.mkdir(parents=True, exist_ok=True)
    if task in ("addition", "multiplication"):
        R, T = int(config.get("R", 1000)), int(config.get("T", 50))
        gen = gen_addition if task == "addition" else gen_multiplication
        save_trialset(gen(R, T, seed), out_dir / "trials")
    elif task == "neuron":
        sub = dict(config.get("neuron", {}))
        if sub.get("preset") == "paper-bursting" or "params" not in sub:
            nparams = BURSTING_NEURON_PARAMS
        else:
            nparams = NeuronParams(**sub["params"])
        traj = simulate_neuron(
            nparams, t_ms=sub.get("t_ms", 750.0), dt_ms=sub.get("dt_ms", 0.02),
            v0=sub.get("v0", -60.0), h0=sub.get("h0", 0.0), n0=sub.get("n0", 0.0),
            sample_ms=sub.get("sample_ms", 0.5),
            obs_noise_std=sub.get("obs_noise_std", 0.0), seed=seed)
        save_trajectory(traj, out_dir / "trajectory")
        (out_dir / "neuron_params.json").write_text(
            json.dumps(nparams.to_dict(), indent=1, sort_keys=True) + "\n")
    else:
        sub = dict(config.get("lorenz", {}))
        traj = simulate_lorenz(
            sigma=sub.get("sigma", 10.0), rho=sub.get("rho", 28.0),
            beta=sub.get("beta", 8.0 / 3.0), T=int(config.get("T", 10000)),
            dt=sub.get("dt", 0.01), z0=sub.get("z0", (1.0, 1.0, 1.0)),
            noise_std=sub.get("noise_std", 0.0), seed=seed)
        save_trajectory(traj, out_dir / "trajectory")
    resolved = dict(config)
    resolved["seed"] = seed
    _write_manifest(out_dir, "generate", resolved)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _split_trials(trials, test_fraction=0.2):
    n_test = max(1, int(trials.R * test_fraction))
    train = tasks_data.TrialSet(inputs=trials.inputs[:-n_test],
                                targets=trials.targets[:-n_test],
                                task_kind=trials.task_kind, seed=trials.seed)
    test = tasks_data.TrialSet(inputs=trials.inputs[-n_test:],
                               targets=trials.targets[-n_test:],
                               task_kind=trials.task_kind, seed=trials.seed)
    return train, test


def _run_sgd(config: dict, seed: int, out_dir: Path) -> int:
    trials = load_trialset(config["data"])
    if "test_data" in config:
        train_set, test_set = trials, load_trialset(config["test_data"])
    else:
        train_set, test_set = _split_trials(trials)
    sub = dict(config.get("sgd", {}))
    reg = _reg_from_config(config.get("reg"))
    sgd_config = train_sgd.SgdConfig(reg=reg, seed=seed, **sub)
    if sgd_config.model_kind == "plrnn" and reg.m_reg > sgd_config.M:
        raise ConfigError(f"config field 'reg/m_reg': {reg.m_reg} exceeds M={sgd_config.M}")
    result = train_sgd.train(
        train_sgd.SgdConfig(reg=reg, seed=seed, **sub),
        train_sgd.TrainTestSplit(train=train_set, test=test_set),
        checkpoint_path=out_dir / "checkpoint",
        checkpoint_every=config.get("checkpoint_every"),
        resume_from=config.get("resume_from"))
    with open(out_dir / "loss_trace.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "test_loss", "p_correct"])
        for row in result.history:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(row["test_loss"]), repr(row["p_correct"])])
    save_params(result.best_params, out_dir / "model")
    (out_dir / "test_metrics.json").write_text(
        json.dumps(result.test_metrics, indent=1, sort_keys=True) + "\n")
    return 2 if result.aborted else 0


def _tau_dirname(tau: float) -> str:
    return f"tau_{tau:g}"


def _run_em_job(args) -> tuple[str, int]:
    config, seed, tau, out_dir_s = args
    out_dir = Path(out_dir_s)
    out_dir.mkdir(parents=True, exist_ok=True)
    traj = load_trajectory(config["data"])
    x = traj.observations if traj.observations is not None else traj.latents
    sub = dict(config.get("em", {}))
    if sub.pop("standardize", False):
        x = (x - x.mean(axis=0)) / x.std(axis=0)
    sub.pop("tau_sweep", None)
    sub.pop("tau_per_T", None)
    reg_cfg = dict(config.get("reg") or {"kind": "none"})
    if tau is not None:
        for key in ("tau_a", "tau_w", "tau_h"):
            reg_cfg[key] = tau
        reg_cfg.pop("tau", None)
    reg = _reg_from_config(reg_cfg)
    if "anneal_weights" in sub:
        sub["anneal_weights"] = tuple(sub["anneal_weights"])
    em_config = train_em.EmConfig(reg=reg, seed=seed, **sub)
    try:
        params, em, trace = train_em.fit_em(em_config, x, traj.inputs)
    except train_em.EmAbortError as exc:
        _write_elbo_csv(out_dir / "elbo_trace.csv", exc.elbo_trace)
        return str(out_dir), 2
    save_params(params, out_dir / "model")
    _write_elbo_csv(out_dir / "elbo_trace.csv", trace)
    return str(out_dir), 0


def _write_elbo_csv(path, trace) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "stage", "anneal_weight", "elbo_proxy",
                         "mode_objective"])
        for i, row in enumerate(trace):
            writer.writerow([i, row["stage"], repr(row["anneal_weight"]),
                             repr(row["elbo_proxy"]), repr(row["mode_objective"])])


def cmd_train(config: dict, out_dir: Path, threads: int = 1) -> int:
    _validate(config, TRAIN_SCHEMA)
    seeds = config.get("seeds", [config.get("seed", 0)])
    out_dir.mkdir(parents=True, exist_ok=True)
    rc = 0
    if config["trainer"] == "sgd":
        for seed in seeds:
            run_dir = out_dir / f"seed_{seed}" if len(seeds) > 1 else out_dir
            run_dir.mkdir(parents=True, exist_ok=True)
            rc = max(rc, _run_sgd(config, int(seed), run_dir))
    else:
        em_cfg = config.get("em", {})
        taus = em_cfg.get("tau_sweep")
        if taus is not None and em_cfg.get("tau_per_T"):
            T = load_trajectory(config["data"]).T
            taus = [t / T for t in taus]
        jobs = []
        for seed in seeds:
            if taus is None:
                run_dir = out_dir / f"seed_{seed}" if len(seeds) > 1 else out_dir
                jobs.append((config, int(seed), None, str(run_dir)))
            else:
                for tau in taus:
                    run_dir = out_dir / _tau_dirname(tau) / f"seed_{seed}"
                    jobs.append((config, int(seed), float(tau), str(run_dir)))
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                for _, code in pool.map(_run_em_job, jobs):
                    rc = max(rc, code)
        else:
            for job in jobs:
                _, code = _run_em_job(job)
                rc = max(rc, code)
    resolved = dict(config)
    resolved["seeds"] = [int(s) for s in seeds]
    resolved.pop("seed", None)
    _write_manifest(out_dir, "train", resolved)
    return rc


# ---------------------------------------------------------------------------
# analyze / evaluate
# ---------------------------------------------------------------------------

def _metric_report(params, dataset_path: str, cfg: dict) -> dict:
    traj = load_trajectory(dataset_path)
    x_true = traj.observations if traj.observations is not None else traj.latents
    gen_T = int(cfg.get("gen_T", 4 * x_true.shape[0]))
    burn = int(cfg.get("burn_in", min(500, gen_T // 4)))
    report: dict = {}
    try:
        gen = generate(params, T=gen_T + burn,
                       rng_seed=int(cfg.get("gen_seed", 0)))
        x_gen = gen.observations[burn:]
        report["diverged"] = False
    except DivergedError as exc:
        report["diverged"] = True
        report["diverged_at"] = exc.step
        report["kl_state_space"] = None
        return report
    report["kl_state_space"] = metrics.kl_state_space(
        x_true, x_gen, bins_per_dim=int(cfg.get("bins_per_dim", 30)))
    if "psd_sample_rate_hz" in cfg:
        ch = int(cfg.get("psd_channel", 0))
        n = min(x_true.shape[0], x_gen.shape[0])
        total, low, high = metrics.psd_mse(
            x_true[:n, ch], x_gen[:n, ch],
            sample_rate_hz=cfg["psd_sample_rate_hz"],
            split_hz=cfg.get("psd_split_hz", 50.0))
        report["psd_mse"] = {"total": total, "low": low, "high": high}
    if "nstep" in cfg:
        report["nstep_mse"] = metrics.nstep_mse(params, traj, int(cfg["nstep"]))
    return report


def cmd_analyze(config: dict, out_dir: Path) -> int:
    _validate(config, ANALYZE_SCHEMA)
    out_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {}
    if "sweep_dir" in config:
        _aggregate_sweep(Path(config["sweep_dir"]), out_dir)
    if "model" in config:
        params = load_params(config["model"])
        if config.get("fixed_points", True):
            fps = analysis.enumerate_fixed_points(params)
            report["fixed_points"] = [fp.to_dict() for fp in fps]
            try:
                hist = analysis.eig_histogram(fps, bins=int(config.get("eig_bins", 20)))
                analysis.histogram_to_csv(hist, out_dir / "eig_histogram.csv")
                report["eig_histogram"] = hist.to_dict()
            except ValueError as exc:
                report["eig_histogram"] = {"error": str(exc)}
        if "cycles" in config:
            cyc = analysis.find_cycles(params, int(config["cycles"]["k_max"]),
                                       n_samples=int(config["cycles"].get(
                                           "n_samples", 100)),
                                       seed=int(config.get("seed", 0)))
            report["cycles"] = [c.to_dict() for c in cyc]
        if "theorems" in config:
            sub = config["theorems"]
            z0 = np.asarray(sub.get("z0", np.zeros(params.M)), dtype=float)
            chk = analysis.check_theorems(params, z0, int(sub.get("T_max", 2000)))
            report["theorems"] = chk.to_dict()
        if "metrics" in config:
            if "dataset" not in config:
                raise ConfigError(
                    "config field 'dataset': required when 'metrics' is requested")
            report["metrics"] = _metric_report(params, config["dataset"],
                                               config["metrics"])
    with open(out_dir / "analysis.json", "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    _write_manifest(out_dir, "analyze", dict(config))
    return 0


def _aggregate_sweep(sweep_dir: Path, out_dir: Path) -> None:
    """Deviation-from-1 statistics across a tau_*/seed_* model sweep."""
    rows = []
    for tau_dir in sorted(sweep_dir.glob("tau_*")):
        tau = float(tau_dir.name.split("_", 1)[1])
        for seed_dir in sorted(tau_dir.glob("seed_*")):
            model = seed_dir / "model"
            if not model.with_suffix(".json").exists():
                continue
            params = load_params(model)
            fps = analysis.enumerate_fixed_points(params)
            try:
                hist = analysis.eig_histogram(fps)
                dev = float(hist.deviations[0]) if hist.deviations.size else None
            except ValueError:
                dev = None
            rows.append((tau, seed_dir.name, dev))
    with open(out_dir / "sweep_deviation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tau", "seed", "deviation_from_one"])
        for tau, seed_name, dev in rows:
            writer.writerow([repr(tau), seed_name,
                             "" if dev is None else repr(dev)])


def cmd_evaluate(config: dict, out_dir: Path) -> int:
    _validate(config, ANALYZE_SCHEMA)
    if "model" not in config or "dataset" not in config:
        raise ConfigError("config field 'model'/'dataset': both required")
    out_dir.mkdir(parents=True, exist_ok=True)
    params = load_params(config["model"])
    report = _metric_report(params, config["dataset"],
                            config.get("metrics", {}))
    with open(out_dir / "metrics.json", "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    _write_manifest(out_dir, "evaluate", dict(config))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit with code 1
        self.print_usage(sys.stderr)
        sys.exit(1)


def main(argv=None) -> int:
    parser = _Parser(prog="plrnn-lab",
                     description="PLRNN dynamics, trainers, analysis and metrics")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "analyze", "evaluate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker pool size (or PLRNN_LAB_THREADS)")
    args = parser.parse_args(argv)

    try:
        config = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        config["seed"] = args.seed
        config.pop("seeds", None)
    out_dir = Path(args.out if args.out is not None
                   else config.get("out", "plrnn_lab_out"))
    threads = args.threads if args.threads is not None else \
        int(os.environ.get("PLRNN_LAB_THREADS", "1"))

    try:
        if args.command == "generate":
            return cmd_generate(config, out_dir)
        if args.command == "train":
            return cmd_train(config, out_dir, threads=threads)
        if args.command == "analyze":
            return cmd_analyze(config, out_dir)
        return cmd_evaluate(config, out_dir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergedError, train_em.EmAbortError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
