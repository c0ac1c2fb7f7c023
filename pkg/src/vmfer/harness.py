"""Experiment runner: seeded training matrices, the toy study, ablations, summaries.

Run directory layout written by :func:`run_experiment`::

    seed_<s>.csv     one row per evaluation point (columns: METRIC_COLUMNS)
    aggregate.csv    step plus <metric>_mean / <metric>_var across seeds
    manifest.json    full config, its SHA-256, seeds and derived env seeds
    timing.json      wall-clock seconds per seed (kept out of the CSVs so
                     reruns stay bit-identical)

Configuration files are INI files with ``[experiment]``, ``[agent]`` and
``[toy]`` sections. Several files may be layered (later wins) and single keys
overridden with ``section.key=value`` strings. Relative output directories are
resolved under ``$VMFER_OUTPUT_ROOT`` (default ``./runs``).
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__, kernels
from .agents import Agent, AgentConfig
from .envs import (SHOOTING_TARGET, ToyCandidates, ToyLandscape, ToyStrategy, angle_grid, make_env,
                   toy_strategy_step)
from .errors import ConfigurationError, NumericalError
from .replay import SamplerMode

OUTPUT_ROOT_ENV = "VMFER_OUTPUT_ROOT"
METRIC_COLUMNS = ["step", "return_mean", "return_std", "critic_loss", "actor_loss",
                  "mean_factor", "mean_angle", "episodes"]
AGG_METRICS = METRIC_COLUMNS[1:]

_ENV_STREAM = 200
_EVAL_STREAM = 201


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_output(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


# ------------------------------------------------------------------ config
def _parse_value(text: str, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind == "floats":
        return tuple(float(v) for v in text.replace(",", " ").split())
    if kind == "ints":
        return tuple(int(v) for v in text.replace(",", " ").split())
    if kind == "optfloat":
        return None if text.lower() in ("", "none", "auto") else float(text)
    if kind == "optint":
        return None if text.lower() in ("", "none", "auto") else int(text)
    return text


_AGENT_KINDS = {
    "algorithm": str, "resampling": str, "eval_ensemble": int, "uncertainty_ensemble": int,
    "gamma": float, "tau": float, "batch_size": int, "utd_ratio": int, "hidden": "ints",
    "actor_lr": "optfloat", "critic_lr": "optfloat", "alpha_lr": "optfloat",
    "exploration_sigma": float, "smoothing_sigma": float, "noise_clip": float, "alpha": float,
    "target_entropy": "optfloat", "policy_delay": "optint", "warmup_steps": int,
    "buffer_capacity": int, "per": bool, "rank_refresh": int, "factor_update": str,
    "ema_decay": float,
}
_EXPERIMENT_KINDS = {
    "name": str, "env": str, "seeds": "ints", "total_steps": int, "eval_every": int,
    "eval_episodes": int, "output_dir": str,
}
_TOY_KINDS = {
    "seeds": "ints", "updates": int, "batch_size": int, "learning_rate": float, "start": "floats",
    "candidate_sigma": float, "candidate_clip": float, "noise_std": float, "hist_bins": int,
    "grid_size": int, "final_window": int, "output_dir": str,
}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    env: str = "pendulum"
    agent: AgentConfig = field(default_factory=AgentConfig)
    seeds: tuple = (0,)
    total_steps: int = 30_000
    eval_every: int = 5_000
    eval_episodes: int = 10
    output_dir: str = ""

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if isinstance(self.agent, dict):
            self.agent = AgentConfig.from_dict(self.agent)
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"seeds must be distinct, got {list(self.seeds)}")
        if self.total_steps < 1 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigurationError("total_steps, eval_every and eval_episodes must be >= 1")
        make_env(self.env)  # raises on an unknown name

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["agent"] = self.agent.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown experiment options {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def run_dir(self) -> Path:
        return resolve_output(self.output_dir or self.name)


@dataclass
class ToyConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    updates: int = 2000
    batch_size: int = 64
    learning_rate: float = 0.01
    start: tuple = (1.0, 1.5)
    candidate_sigma: float = 0.5
    candidate_clip: float = 1.0
    noise_std: float = 0.1
    hist_bins: int = 18
    grid_size: int = 81
    final_window: int = 100
    output_dir: str = "toy"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.start = tuple(float(v) for v in self.start)
        if not self.seeds or self.updates < 1 or self.batch_size < 1 or len(self.start) != 2:
            raise ConfigurationError("toy config needs seeds, updates >= 1, batch_size >= 1 and a 2-D start")
        if not 1 <= self.final_window <= self.updates:
            raise ConfigurationError("final_window must lie in [1, updates]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["start"] = list(self.start)
        return d


def parse_overrides(overrides: Iterable[str]) -> dict:
    """``["agent.utd_ratio=3", ...]`` -> ``{"agent": {"utd_ratio": "3"}}``."""
    out: dict = {}
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigurationError(f"override must look like section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = value
    return out


def read_config(paths: Sequence = (), overrides: Iterable[str] = ()) -> configparser.ConfigParser:
    """Layer INI files (later wins) and apply ``section.key=value`` overrides."""
    cp = configparser.ConfigParser()
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cp.read(p)
    for section, items in parse_overrides(overrides).items():
        if not cp.has_section(section):
            cp.add_section(section)
        for k, v in items.items():
            cp.set(section, k, v)
    return cp


def _section(cp: configparser.ConfigParser, name: str, kinds: dict) -> dict:
    if not cp.has_section(name):
        return {}
    out = {}
    for key, raw in cp.items(name):
        if key not in kinds:
            raise ConfigurationError(f"unknown option [{name}] {key}")
        try:
            out[key] = _parse_value(raw, kinds[key])
        except ValueError as exc:
            raise ConfigurationError(f"bad value for [{name}] {key}: {raw!r}") from exc
    return out


def experiment_from_parser(cp: configparser.ConfigParser) -> ExperimentConfig:
    unknown = set(cp.sections()) - {"experiment", "agent", "toy"}
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    exp = _section(cp, "experiment", _EXPERIMENT_KINDS)
    agent = AgentConfig(**_section(cp, "agent", _AGENT_KINDS))
    return ExperimentConfig(agent=agent, **exp)


def load_experiment(paths: Sequence = (), overrides: Iterable[str] = ()) -> ExperimentConfig:
    return experiment_from_parser(read_config(paths, overrides))


def load_toy(paths: Sequence = (), overrides: Iterable[str] = ()) -> ToyConfig:
    return ToyConfig(**_section(read_config(paths, overrides), "toy", _TOY_KINDS))


# ----------------------------------------------------------------- training
def _seq(seed: int, key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(key,))


def evaluate(agent: Agent, env_name: str, seed: int, episodes: int) -> np.ndarray:
    """Returns of ``episodes`` deterministic episodes on a fresh, seeded env.

    Uses the agent's greedy policy only; no buffer writes and no draws from
    the agent's random streams.
    """
    env = make_env(env_name, seed=_seq(seed, _EVAL_STREAM))
    returns = np.empty(episodes)
    for i in range(episodes):
        obs = env.reset()
        total = 0.0
        while True:
            obs, r, terminated, truncated = env.step(agent.act(obs, explore=False))
            total += r
            if terminated or truncated:
                break
        returns[i] = total
    return returns


def _check_finite(row: dict, where: str) -> None:
    for k, v in row.items():
        if not math.isfinite(v):
            raise NumericalError(f"non-finite metric {k}={v} ({where})")


def train_seed(config: ExperimentConfig, seed: int) -> tuple[list, float, Agent]:
    """Train one seed; returns (eval rows, wall-clock seconds, agent)."""
    t0 = time.perf_counter()
    env = make_env(config.env, seed=_seq(seed, _ENV_STREAM))
    agent_cfg = AgentConfig.from_dict(config.agent.to_dict())
    agent_cfg.buffer_capacity = min(agent_cfg.buffer_capacity, config.total_steps)
    agent = Agent(agent_cfg, env.obs_dim, env.act_dim, env.action_high, seed=seed)
    rows = []
    acc = {"critic_loss": [], "actor_loss": [], "mean_factor": [], "mean_angle": []}
    for t in range(config.total_steps):
        rec = agent.train_step(env, t)
        if rec["critic_updates"]:
            acc["critic_loss"].append(rec["critic_loss"])
        if rec["actor_updated"]:
            for k in ("actor_loss", "mean_factor", "mean_angle"):
                acc[k].append(rec[k])
        step = t + 1
        if step % config.eval_every == 0 or step == config.total_steps:
            rets = evaluate(agent, config.env, seed, config.eval_episodes)
            row = {
                "step": step,
                "return_mean": float(np.mean(rets)),
                "return_std": float(np.std(rets)),
                "critic_loss": float(np.mean(acc["critic_loss"])) if acc["critic_loss"] else 0.0,
                "actor_loss": float(np.mean(acc["actor_loss"])) if acc["actor_loss"] else 0.0,
                "mean_factor": float(np.mean(acc["mean_factor"])) if acc["mean_factor"] else 1.0,
                "mean_angle": float(np.mean(acc["mean_angle"])) if acc["mean_angle"] else 0.0,
                "episodes": agent.episodes,
            }
            _check_finite(row, f"seed {seed}, step {step}")
            rows.append(row)
            acc = {k: [] for k in acc}
    return rows, time.perf_counter() - t0, agent


def _train_seed_rows(args):
    config, seed = args
    rows, secs, _ = train_seed(config, seed)
    return rows, secs


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{k: _unfmt(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _unfmt(v: str):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def aggregate_rows(per_seed: Sequence[Sequence[dict]]) -> list:
    """Mean and population variance of every metric across seeds, per step."""
    out = []
    for rows in zip(*per_seed):
        steps = {r["step"] for r in rows}
        if len(steps) != 1:
            raise ConfigurationError("seed runs disagree on evaluation steps")
        agg = {"step": rows[0]["step"], "n_seeds": len(rows)}
        for m in AGG_METRICS:
            vals = np.array([r[m] for r in rows], dtype=np.float64)
            agg[f"{m}_mean"] = float(np.mean(vals))
            agg[f"{m}_var"] = float(np.var(vals))
        out.append(agg)
    return out


AGG_COLUMNS = ["step", "n_seeds"] + [f"{m}_{s}" for m in AGG_METRICS for s in ("mean", "var")]


def run_experiment(config: ExperimentConfig, run_dir=None, workers: int = 1) -> Path:
    """Train every seed and write per-seed CSVs, the aggregate and the manifest."""
    run_dir = Path(run_dir) if run_dir is not None else config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(config, s) for s in config.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_seed_rows, jobs))
    else:
        results = [_train_seed_rows(j) for j in jobs]
    per_seed = []
    timing = {}
    files = []
    for seed, (rows, secs) in zip(config.seeds, results):
        name = f"seed_{seed}.csv"
        write_csv(run_dir / name, METRIC_COLUMNS, rows)
        files.append(name)
        per_seed.append(rows)
        timing[str(seed)] = secs
    write_csv(run_dir / "aggregate.csv", AGG_COLUMNS, aggregate_rows(per_seed))
    manifest = {
        "format": "vmfer-run",
        "version": 1,
        "package_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seeds": list(config.seeds),
        "rng": {str(s): {"agent_seed": s, "env_seed_sequence": [s, _ENV_STREAM],
                         "eval_seed_sequence": [s, _EVAL_STREAM]} for s in config.seeds},
        "final_return": {str(s): rows[-1]["return_mean"] for s, rows in zip(config.seeds, per_seed)},
        "files": files + ["aggregate.csv"],
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (run_dir / "timing.json").write_text(json.dumps({"seconds_per_seed": timing}, indent=2))
    return run_dir


def load_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in {run_dir}")
    return json.loads(path.read_text())


def rerun_from_manifest(run_dir, new_dir) -> Path:
    """Regenerate a run from its manifest into ``new_dir``."""
    man = load_manifest(run_dir)
    config = ExperimentConfig.from_dict(man["config"])
    if config.config_hash() != man["config_hash"]:
        raise ConfigurationError("manifest config does not match its recorded hash")
    return run_experiment(config, new_dir)


# ---------------------------------------------------------------------- toy
def toy_run(strategy, seed: int, cfg: ToyConfig) -> dict:
    """Train the point policy of the Shooting task with one selection strategy.

    Each update draws ``batch_size`` candidate actions around the policy
    action, queries both toy critics at every candidate, lets the strategy
    pick one, and moves the policy along critic 1's gradient there.
    """
    strategy = ToyStrategy(strategy)
    rng = np.random.default_rng(_seq(seed, 0))
    land = ToyLandscape(cfg.noise_std, rng)
    a = np.array(cfg.start, dtype=np.float64)
    traj = np.empty((cfg.updates + 1, 2))
    traj[0] = a
    angles = np.empty(cfg.updates)
    rewards = np.empty(cfg.updates)
    for t in range(cfg.updates):
        noise = np.clip(rng.normal(0.0, cfg.candidate_sigma, (cfg.batch_size, 2)),
                        -cfg.candidate_clip, cfg.candidate_clip)
        cand = a + noise
        g1, g2 = land.gradients(cand)
        j = toy_strategy_step(strategy, ToyCandidates(cand, g1, g2), a, rng)
        u, v = g1[j], g2[j]
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        angles[t] = math.degrees(math.acos(max(-1.0, min(1.0, u @ v / (nu * nv))))) if nu * nv > 0 else 0.0
        a = a + cfg.learning_rate * g1[j]
        traj[t + 1] = a
        rewards[t] = -float(np.linalg.norm(a - SHOOTING_TARGET))
    return {
        "angles": angles,
        "rewards": rewards,
        "trajectory": traj,
        "final_reward": float(np.mean(rewards[-cfg.final_window:])),
        "mean_angle": float(np.mean(angles)),
    }


def run_toy_reproduction(cfg: Optional[ToyConfig] = None, out_dir=None) -> dict:
    """Run Uniform / Uncertainty / Oracle over all seeds and write figure data.

    Files: ``toy_angle_hist.csv`` (fraction of selected angles per bin),
    ``toy_reward_curve.csv`` (reward mean/std across seeds per update),
    ``toy_trajectory.csv`` (policy action per strategy, seed and update),
    ``toy_contour.csv`` (noise-free gradient angle on a grid) and
    ``toy_summary.json``. Returns the summary dict.
    """
    cfg = cfg or ToyConfig()
    out = Path(out_dir) if out_dir is not None else resolve_output(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    strategies = [s.value for s in ToyStrategy]
    runs = {s: [toy_run(s, seed, cfg) for seed in cfg.seeds] for s in strategies}

    edges = np.linspace(0.0, 180.0, cfg.hist_bins + 1)
    hist = {s: np.histogram(np.concatenate([r["angles"] for r in runs[s]]), bins=edges)[0] for s in strategies}
    write_csv(out / "toy_angle_hist.csv", ["bin_lo", "bin_hi", *strategies],
              [{"bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]),
                **{s: float(hist[s][i] / hist[s].sum()) for s in strategies}}
               for i in range(cfg.hist_bins)])

    curve_cols = ["update"] + [f"{s}_{k}" for s in strategies for k in ("mean", "std")]
    curves = {s: np.stack([r["rewards"] for r in runs[s]]) for s in strategies}
    write_csv(out / "toy_reward_curve.csv", curve_cols,
              [{"update": t + 1, **{f"{s}_{k}": float(f(curves[s][:, t]))
                                    for s in strategies for k, f in (("mean", np.mean), ("std", np.std))}}
               for t in range(cfg.updates)])

    traj_rows = []
    for s in strategies:
        for seed, r in zip(cfg.seeds, runs[s]):
            for t, (x, y) in enumerate(r["trajectory"]):
                traj_rows.append({"strategy": s, "seed": seed, "update": t, "a0": float(x), "a1": float(y)})
    write_csv(out / "toy_trajectory.csv", ["strategy", "seed", "update", "a0", "a1"], traj_rows)

    xs, ys, grid = angle_grid(n=cfg.grid_size)
    write_csv(out / "toy_contour.csv", ["a0", "a1", "angle"],
              [{"a0": float(xs[j]), "a1": float(ys[i]), "angle": float(grid[i, j])}
               for i in range(len(ys)) for j in range(len(xs))])

    summary = {
        "config": cfg.to_dict(),
        "strategies": {
            s: {
                "final_reward_per_seed": [r["final_reward"] for r in runs[s]],
                "mean_angle_per_seed": [r["mean_angle"] for r in runs[s]],
                "final_reward_mean": float(np.mean([r["final_reward"] for r in runs[s]])),
                "mean_angle": float(np.mean([r["mean_angle"] for r in runs[s]])),
                "mass_below_90": float(hist[s][edges[1:] <= 90.0].sum() / hist[s].sum()),
            }
            for s in strategies
        },
    }
    (out / "toy_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# ------------------------------------------------------------------ ablation
ABLATION_GRIDS = {"UTD": (1, 3, 5), "ENSEMBLE": (2, 3, 5)}


def run_ablation(kind: str, base: ExperimentConfig, grid: Optional[Sequence[int]] = None,
                 variants: Optional[Sequence] = None, out_dir=None) -> list:
    """Sweep the UTD ratio or the uncertainty-ensemble size.

    Writes one run directory per (variant, grid value), ``ablation.csv`` with
    the final mean return and its across-seed variance, and ``trend.json``
    reporting whether the final return is monotone in the grid value.
    """
    kind = kind.upper()
    if kind not in ABLATION_GRIDS:
        raise ConfigurationError(f"ablation kind must be UTD or ENSEMBLE, got {kind!r}")
    grid = tuple(int(g) for g in (grid or ABLATION_GRIDS[kind]))
    if not grid or len(set(grid)) != len(grid):
        raise ConfigurationError("ablation grid must be nonempty and distinct")
    lo = 1 if kind == "UTD" else max(2, base.agent.eval_ensemble)
    if min(grid) < lo:
        raise ConfigurationError(f"{kind} grid values must be >= {lo}")
    if variants is None:
        variants = ([SamplerMode.UNIFORM, base.agent.resampling] if kind == "UTD"
                    else [base.agent.resampling])
    variants = list(dict.fromkeys(SamplerMode.parse(v) for v in variants))
    if kind == "ENSEMBLE" and any(v not in (SamplerMode.VMFER_UNCERTAINTY, SamplerMode.VMFER_RANK)
                                  for v in variants):
        raise ConfigurationError("the ensemble ablation needs vMFER variants")
    out = Path(out_dir) if out_dir is not None else resolve_output(base.output_dir or f"{base.name}_ablation_{kind.lower()}")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in variants:
        for g in grid:
            agent = base.agent.to_dict()
            agent["resampling"] = variant.value
            agent["utd_ratio" if kind == "UTD" else "uncertainty_ensemble"] = g
            cfg = ExperimentConfig.from_dict({**base.to_dict(), "agent": agent,
                                              "name": f"{base.name}_{variant.value}_{kind.lower()}{g}"})
            run_dir = run_experiment(cfg, out / f"{variant.value}_{kind.lower()}{g}")
            finals = np.array(list(load_manifest(run_dir)["final_return"].values()))
            rows.append({"kind": kind, "variant": variant.value, "value": g,
                         "final_return_mean": float(finals.mean()), "final_return_var": float(finals.var()),
                         "n_seeds": len(finals), "run_dir": run_dir.name})
    write_csv(out / "ablation.csv", ["kind", "variant", "value", "final_return_mean", "final_return_var",
                                     "n_seeds", "run_dir"], rows)
    (out / "trend.json").write_text(json.dumps(trend_report(rows), indent=2))
    return rows


def trend_report(rows: Sequence[dict]) -> dict:
    """Per variant: the returns in grid order and their monotonic direction."""
    report = {}
    for variant in dict.fromkeys(r["variant"] for r in rows):
        pts = sorted((r["value"], r["final_return_mean"]) for r in rows if r["variant"] == variant)
        diffs = np.diff([v for _, v in pts])
        if diffs.size and np.all(diffs > 0):
            trend = "increasing"
        elif diffs.size and np.all(diffs < 0):
            trend = "decreasing"
        else:
            trend = "non-monotone" if diffs.size else "single-point"
        report[variant] = {"values": [g for g, _ in pts], "returns": [v for _, v in pts], "trend": trend}
    return report


# ----------------------------------------------------------------- summary
def relative_improvement(variant: float, baseline: float) -> float:
    """Variant return as a percentage of the baseline's, baseline = 100%.

    Written as ``100 * (1 + (v - b) / |b|)`` so that gains stay above 100%
    when returns are negative costs; for positive returns it equals ``100 v / b``.
    """
    if baseline == 0.0:
        raise NumericalError("baseline return is zero; relative improvement undefined")
    return 100.0 * (1.0 + (variant - baseline) / abs(baseline))


def aggregate_ratios(ratios: Sequence[float]) -> float:
    """Arithmetic mean of per-environment ratios."""
    if len(ratios) == 0:
        raise ConfigurationError("nothing to aggregate")
    return float(np.mean(ratios))


def final_return(run_dir) -> float:
    rows = read_csv(Path(run_dir) / "aggregate.csv")
    if not rows:
        raise ConfigurationError(f"{run_dir} has an empty aggregate.csv")
    return float(rows[-1]["return_mean_mean"])


def summarize(run_dirs: Sequence, baseline: str = "uniform", out_path=None) -> list:
    """Relative-improvement table of every variant against the baseline mode.

    Runs are grouped by (environment, algorithm). Within a group all runs must
    share the evaluation protocol (total steps, eval interval, episodes and
    seeds). One row per variant with a per-env ratio and the aggregate.
    """
    baseline = SamplerMode.parse(baseline).value
    runs = []
    for d in run_dirs:
        man = load_manifest(d)
        cfg = man["config"]
        runs.append({
            "dir": str(d), "env": cfg["env"], "algorithm": cfg["agent"]["algorithm"],
            "variant": cfg["agent"]["resampling"],
            "label": _variant_label(cfg["agent"]),
            "protocol": (cfg["total_steps"], cfg["eval_every"], cfg["eval_episodes"], tuple(cfg["seeds"])),
            "final": final_return(d),
        })
    groups: dict = {}
    for r in runs:
        groups.setdefault((r["env"], r["algorithm"]), []).append(r)
    ratios: dict = {}
    for (env, algo), members in groups.items():
        if len({m["protocol"] for m in members}) != 1:
            raise ConfigurationError(f"runs for {env}/{algo} use different evaluation protocols")
        base = [m for m in members if m["label"] == f"{algo}-{baseline}"]
        if len(base) != 1:
            raise ConfigurationError(f"need exactly one {baseline} run for {env}/{algo}, found {len(base)}")
        b = base[0]["final"]
        for m in members:
            ratios.setdefault(m["label"], {})[env] = relative_improvement(m["final"], b)
    envs = sorted({r["env"] for r in runs})
    table = []
    for label, per_env in ratios.items():
        row = {"variant": label}
        for env in envs:
            row[env] = per_env.get(env, float("nan"))
        row["aggregate"] = aggregate_ratios(list(per_env.values()))
        table.append(row)
    if out_path is not None:
        write_csv(Path(out_path), ["variant", *envs, "aggregate"], table)
    return table


def _variant_label(agent_cfg: dict) -> str:
    label = f"{agent_cfg['algorithm']}-{agent_cfg['resampling']}"
    if agent_cfg.get("per") and agent_cfg["resampling"] != SamplerMode.PER_RANK.value:
        label += "+per"
    return label
