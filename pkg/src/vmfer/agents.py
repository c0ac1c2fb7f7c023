"""Ensemble actor-critic agents with vMFER resampling.

Two algorithms share one :class:`Agent`:

* TD3 — deterministic tanh actor, clipped double-Q target with target-policy
  smoothing, delayed actor updates against critic 1.
* SAC — squashed-Gaussian actor, soft target, actor loss
  ``alpha * logpi - min_i Q_i`` over the evaluation critics, learned
  temperature.

The ensemble holds ``uncertainty_ensemble`` critics. The first
``eval_ensemble`` of them form the min in the TD target; the rest are trained
on the same target but only contribute gradient directions to the sampling
factors.

In ``UNIFORM`` (and ``PER_RANK``) mode the actor reuses the last critic batch
and ``a = pi(s)`` without smoothing noise, which is exactly standard TD3/SAC.
In a vMFER mode the actor batch is redrawn from the sampling factors, TD3 adds
clipped smoothing noise to the policy action, and the factors of the drawn
transitions are recomputed from the gradient bundle.

Random streams are split by purpose (exploration, batch sampling, policy
noise) and every network is initialized from its own seed, so changing the
ensemble size never perturbs the other networks or draws.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .dirstats import angles_between
from .errors import ConfigurationError, DimensionMismatchError, EmptyInputError, NumericalError
from .gradnet import (DEFAULT_HIDDEN, Adam, Mlp, critic_action_grads, load_params, polyak_update,
                      save_params)
from .replay import Batch, ReplayBuffer, SamplerMode

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)

# spawn keys for the per-purpose random streams
_STREAM_ACTOR = 0
_STREAM_EXPLORE = 1
_STREAM_SAMPLE = 2
_STREAM_NOISE = 3
_STREAM_CRITIC_BASE = 100


@dataclass
class AgentConfig:
    algorithm: str = "TD3"
    resampling: SamplerMode = SamplerMode.UNIFORM
    eval_ensemble: int = 2
    uncertainty_ensemble: int = 2
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    utd_ratio: int = 1
    hidden: tuple = DEFAULT_HIDDEN
    actor_lr: Optional[float] = None
    critic_lr: Optional[float] = None
    alpha_lr: Optional[float] = None
    exploration_sigma: float = 0.1
    smoothing_sigma: float = 0.2
    noise_clip: float = 0.5
    alpha: float = 0.2
    target_entropy: Optional[float] = None
    policy_delay: Optional[int] = None
    warmup_steps: int = 1000
    buffer_capacity: int = 1_000_000
    per: bool = False
    rank_refresh: int = 1000
    factor_update: str = "replace"
    ema_decay: float = 0.9

    def __post_init__(self):
        self.algorithm = str(self.algorithm).upper()
        self.resampling = SamplerMode.parse(self.resampling)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.resampling is SamplerMode.PER_RANK:
            self.per = True
        default_lr = 1e-3 if self.algorithm == "TD3" else 3e-4
        for name in ("actor_lr", "critic_lr", "alpha_lr"):
            if getattr(self, name) is None:
                setattr(self, name, default_lr)
        if self.policy_delay is None:
            self.policy_delay = 2 if self.algorithm == "TD3" else 1
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ("TD3", "SAC"):
            raise ConfigurationError(f"algorithm must be TD3 or SAC, got {self.algorithm!r}")
        if not self.uncertainty_ensemble >= self.eval_ensemble >= 2:
            raise ConfigurationError("need uncertainty_ensemble >= eval_ensemble >= 2")
        if not (0.0 <= self.gamma < 1.0 and 0.0 < self.tau < 1.0):
            raise ConfigurationError("gamma must lie in [0, 1) and tau in (0, 1)")
        if self.batch_size < 1 or self.utd_ratio < 1 or self.policy_delay < 1:
            raise ConfigurationError("batch_size, utd_ratio and policy_delay must be >= 1")
        if self.alpha <= 0.0:
            raise ConfigurationError("alpha must be positive")
        if self.factor_update not in ("replace", "ema"):
            raise ConfigurationError(f"factor_update must be 'replace' or 'ema', got {self.factor_update!r}")
        if self.exploration_sigma < 0 or self.smoothing_sigma < 0 or self.noise_clip < 0:
            raise ConfigurationError("noise scales must be non-negative")

    @property
    def vmfer(self) -> bool:
        return self.resampling in (SamplerMode.VMFER_UNCERTAINTY, SamplerMode.VMFER_RANK)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resampling"] = self.resampling.value
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown agent options {sorted(unknown)}")
        return cls(**d)


def _child_rng(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


class EnsembleCritic:
    """N Q-networks over ``concat(state, action)`` with Polyak-coupled targets."""

    def __init__(self, obs_dim: int, act_dim: int, n: int, hidden=DEFAULT_HIDDEN, seed: int = 0,
                 lr: float = 1e-3):
        sizes = [obs_dim + act_dim, *hidden, 1]
        self.critics = [Mlp(sizes, rng=_child_rng(seed, _STREAM_CRITIC_BASE + i)) for i in range(n)]
        self.targets = [c.copy() for c in self.critics]
        self.optimizers = [Adam(c.params, lr=lr) for c in self.critics]

    def __len__(self) -> int:
        return len(self.critics)

    def q_values(self, states, actions, target: bool = False, members=None) -> np.ndarray:
        nets = self.targets if target else self.critics
        if members is not None:
            nets = nets[:members]
        sa = np.concatenate([states, actions], axis=1)
        return np.stack([net.forward(sa)[:, 0] for net in nets])

    def regress(self, states, actions, y) -> tuple[float, np.ndarray]:
        """One Adam step of every critic on ``mean((Q_i - y)^2)``.

        Returns the mean loss over critics and the pre-update Q values (N, b).
        """
        sa = np.concatenate([states, actions], axis=1)
        b = sa.shape[0]
        losses = []
        qs = []
        for net, opt in zip(self.critics, self.optimizers):
            q, cache = net.forward_with_cache(sa)
            err = q[:, 0] - y
            losses.append(float(np.mean(err * err)))
            qs.append(q[:, 0])
            _, grads = net.backward(cache, (2.0 / b) * err[:, None])
            opt.step(grads)
        return float(np.mean(losses)), np.stack(qs)

    def soft_update(self, tau: float) -> None:
        for tgt, src in zip(self.targets, self.critics):
            polyak_update(tgt, src, tau)


class Agent:
    """TD3 or SAC agent with an ensemble critic and vMFER actor resampling."""

    def __init__(self, config: AgentConfig, obs_dim: int, act_dim: int, action_high: float = 1.0,
                 seed: int = 0):
        self.config = config
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.action_high = float(np.max(action_high))
        self.seed = int(seed)
        self.sac = config.algorithm == "SAC"
        hid = config.hidden
        actor_rng = _child_rng(seed, _STREAM_ACTOR)
        if self.sac:
            self.actor = Mlp([obs_dim, *hid, 2 * act_dim], rng=actor_rng)
            self.actor_target = None
        else:
            self.actor = Mlp([obs_dim, *hid, act_dim], "tanh", self.action_high, rng=actor_rng)
            self.actor_target = self.actor.copy()
        self.actor_opt = Adam(self.actor.params, lr=config.actor_lr)
        self.ensemble = EnsembleCritic(obs_dim, act_dim, config.uncertainty_ensemble, hid, seed,
                                       config.critic_lr)
        self.log_alpha = np.array([math.log(config.alpha)])
        self.alpha_opt = Adam([self.log_alpha], lr=config.alpha_lr)
        self.target_entropy = (-float(act_dim) if config.target_entropy is None
                               else float(config.target_entropy))
        self.buffer = ReplayBuffer(config.buffer_capacity, obs_dim, act_dim, per=config.per,
                                   rank_refresh=config.rank_refresh)
        self.rng_explore = _child_rng(seed, _STREAM_EXPLORE)
        self.rng_sample = _child_rng(seed, _STREAM_SAMPLE)
        self.rng_noise = _child_rng(seed, _STREAM_NOISE)
        self.learn_calls = 0
        self.critic_updates = 0
        self.actor_updates = 0
        self._last_batch: Optional[Batch] = None
        self.last_td_target: Optional[np.ndarray] = None
        self._obs = None
        self._episode_return = 0.0
        self.last_episode_return = 0.0
        self.episodes = 0

    # ----------------------------------------------------------------- policy
    @property
    def alpha(self) -> float:
        return float(math.exp(self.log_alpha[0]))

    def _check_state(self, s) -> tuple[np.ndarray, bool]:
        s = np.asarray(s, dtype=np.float64)
        single = s.ndim == 1
        if single:
            s = s[None, :]
        if s.shape[1] != self.obs_dim:
            raise DimensionMismatchError(f"state dimension {s.shape[1]} != {self.obs_dim}")
        return s, single

    def _gaussian_head(self, out):
        mean = out[:, :self.act_dim]
        raw = out[:, self.act_dim:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)

    def _squash(self, mean, log_std, xi):
        """Reparameterized squashed-Gaussian sample and its log-density.

        logpi omits the constant ``-act_dim * log(action_high)`` of the output
        scaling; it does not affect any gradient.
        """
        u = mean + np.exp(log_std) * xi
        t = np.tanh(u)
        log1mt2 = 2.0 * (LOG_2 - u - np.logaddexp(0.0, -2.0 * u))
        logpi = np.sum(-0.5 * xi * xi - 0.5 * LOG_2PI - log_std - log1mt2, axis=1)
        return self.action_high * t, logpi, u, t

    def act(self, s, explore: bool = False) -> np.ndarray:
        s, single = self._check_state(s)
        if self.sac:
            mean, log_std, _ = self._gaussian_head(self.actor.forward(s))
            if explore:
                xi = self.rng_explore.standard_normal(mean.shape)
                a, _, _, _ = self._squash(mean, log_std, xi)
            else:
                a = self.action_high * np.tanh(mean)
        else:
            a = self.actor.forward(s)
            if explore and self.config.exploration_sigma > 0.0:
                noise = self.rng_explore.normal(0.0, self.config.exploration_sigma * self.action_high, a.shape)
                a = np.clip(a + noise, -self.action_high, self.action_high)
        return a[0] if single else a

    def _smoothing_noise(self, shape) -> np.ndarray:
        c = self.config
        noise = self.rng_noise.normal(0.0, c.smoothing_sigma * self.action_high, shape)
        lim = c.noise_clip * self.action_high
        return np.clip(noise, -lim, lim)

    # ----------------------------------------------------------------- critic
    def td_target(self, batch: Batch) -> np.ndarray:
        """TD target y for a batch; draws target-policy noise from the noise stream."""
        c = self.config
        s2 = batch.next_states
        if self.sac:
            mean, log_std, _ = self._gaussian_head(self.actor.forward(s2))
            xi = self.rng_noise.standard_normal(mean.shape)
            a2, logpi2, _, _ = self._squash(mean, log_std, xi)
            q2 = self.ensemble.q_values(s2, a2, target=True, members=c.eval_ensemble).min(axis=0)
            q2 = q2 - self.alpha * logpi2
        else:
            a2 = self.actor_target.forward(s2)
            a2 = np.clip(a2 + self._smoothing_noise(a2.shape), -self.action_high, self.action_high)
            q2 = self.ensemble.q_values(s2, a2, target=True, members=c.eval_ensemble).min(axis=0)
        return batch.rewards + c.gamma * (1.0 - batch.dones.astype(np.float64)) * q2

    def critic_update(self, batch: Batch) -> float:
        if len(batch) == 0:
            raise EmptyInputError("critic update on an empty batch")
        y = self.td_target(batch)
        self.last_td_target = y
        loss, q = self.ensemble.regress(batch.states, batch.actions, y)
        if self.config.per:
            td = np.abs(q[:self.config.eval_ensemble] - y).mean(axis=0)
            self.buffer.update_td_priority(batch.indices, td)
        self.critic_updates += 1
        self._last_batch = batch
        return loss

    # ------------------------------------------------------------------ actor
    def _bundle(self, states, actions):
        """Actor-loss gradients dl_i/da = -dQ_i/da for every critic, plus Q (N, b)."""
        q, dq = critic_action_grads(self.ensemble.critics, states, actions)
        return q, -dq

    def actor_update_vmfer(self, b: Optional[int] = None) -> dict:
        """One actor step; in vMFER modes also refreshes the drawn factors.

        Returns a dict with the actor loss, the drawn slot indices, the mean
        factor of the drawn batch (before the update) and the mean angle
        between the first two critics' gradients on that batch.
        """
        c = self.config
        b = c.batch_size if b is None else int(b)
        if len(self.ensemble) < 2:
            raise ConfigurationError("vMFER needs at least two critics")
        if c.vmfer:
            batch = self.buffer.resample_vmfer(b, c.resampling, self.rng_sample)
        else:
            batch = self._last_batch if self._last_batch is not None else self.buffer.sample_uniform(b, self.rng_sample)
        s = batch.states
        out, cache = self.actor.forward_with_cache(s)
        if self.sac:
            mean, log_std, mask = self._gaussian_head(out)
            xi = self.rng_noise.standard_normal(mean.shape)
            a_hat, logpi, u, t = self._squash(mean, log_std, xi)
        else:
            a_hat = out + self._smoothing_noise(out.shape) if c.vmfer else out
        q, grads = self._bundle(s, a_hat)
        n_b = s.shape[0]
        cols = np.arange(n_b)
        if self.sac:
            # the pessimistic critic among those that define the policy objective
            e = np.argmin(q[:c.eval_ensemble], axis=0).astype(np.int64)
        else:
            e = np.zeros(n_b, dtype=np.int64)
        mean_factor = float(np.mean(batch.factors))
        if c.vmfer:
            if c.factor_update == "ema":
                _, _, fresh = kernels.bundle_factors(grads, e)
                new = c.ema_decay * self.buffer.factors[batch.indices] + (1.0 - c.ema_decay) * fresh
                self.buffer.set_factors(batch.indices, new)
            else:
                self.buffer.update_factors(batch.indices, grads, e)
        g_e = grads[e, cols]  # dl_e/da, shape (b, p)
        if self.sac:
            alpha = self.alpha
            q_e = q[e, cols]
            loss = float(np.mean(alpha * logpi - q_e))
            dl_du = (alpha * 2.0 * t + g_e * self.action_high * (1.0 - t * t)) / n_b
            d_mean = dl_du
            d_logstd = (dl_du * np.exp(log_std) * xi - alpha / n_b) * mask
            cot = np.concatenate([d_mean, d_logstd], axis=1)
        else:
            loss = float(np.mean(-q[0]))
            cot = g_e / n_b
        _, pgrads = self.actor.backward(cache, cot)
        self.actor_opt.step(pgrads)
        self.actor_updates += 1
        info = {
            "actor_loss": loss,
            "indices": batch.indices,
            "mean_factor": mean_factor,
            "mean_angle": _mean_angle(grads[0], grads[1]),
            "critic_index": e,
            "q_values": q,
        }
        if self.sac:
            info["logpi"] = logpi
        return info

    def sac_temperature_update(self, logpi) -> float:
        """One Adam step on log(alpha) for J = -mean(alpha * (logpi + H_target)).

        alpha rises when the policy entropy ``-logpi`` is below target.
        """
        if not self.sac:
            raise ConfigurationError("temperature updates exist only in SAC mode")
        grad = -float(np.mean(np.asarray(logpi, dtype=np.float64) + self.target_entropy))
        self.alpha_opt.step([np.array([grad])])
        return self.alpha

    def soft_update_targets(self) -> None:
        self.ensemble.soft_update(self.config.tau)
        if self.actor_target is not None:
            polyak_update(self.actor_target, self.actor, self.config.tau)

    # --------------------------------------------------------------- training
    def update(self) -> dict:
        """G critic updates, then (subject to the policy delay) one actor update."""
        c = self.config
        self.learn_calls += 1
        closs = [self.critic_update(self.buffer.sample_evaluation(c.batch_size, self.rng_sample))
                 for _ in range(c.utd_ratio)]
        rec = {"critic_loss": float(np.mean(closs)), "critic_updates": c.utd_ratio, "actor_updated": 0}
        if self.learn_calls % c.policy_delay == 0:
            info = self.actor_update_vmfer()
            if self.sac:
                self.sac_temperature_update(info["logpi"])
            self.soft_update_targets()
            rec.update(actor_updated=1, actor_loss=info["actor_loss"],
                       mean_factor=info["mean_factor"], mean_angle=info["mean_angle"])
        return rec

    def train_step(self, env, t: int) -> dict:
        """One environment interaction followed by learning once warmup is over."""
        if self._obs is None:
            self._obs = env.reset()
        if t < self.config.warmup_steps:
            a = self.rng_explore.uniform(-self.action_high, self.action_high, self.act_dim)
        else:
            a = self.act(self._obs, explore=True)
        obs2, r, terminated, truncated = env.step(a)
        self.buffer.insert(self._obs, a, r, obs2, terminated)
        self._episode_return += r
        if terminated or truncated:
            self.last_episode_return = self._episode_return
            self._episode_return = 0.0
            self.episodes += 1
            self._obs = env.reset()
        else:
            self._obs = obs2
        rec = {"step": t, "reward": float(r), "episode_return": self.last_episode_return,
               "critic_loss": 0.0, "critic_updates": 0, "actor_updated": 0,
               "actor_loss": 0.0, "mean_factor": 1.0, "mean_angle": 0.0}
        if t >= self.config.warmup_steps:
            rec.update(self.update())
        rec["alpha"] = self.alpha if self.sac else 0.0
        for k, v in rec.items():
            if not math.isfinite(v):
                raise NumericalError(f"non-finite metric {k}={v} at step {t}")
        return rec

    # ------------------------------------------------------------- checkpoint
    def _networks(self) -> dict:
        nets = {"actor": self.actor}
        if self.actor_target is not None:
            nets["actor_target"] = self.actor_target
        for i, (q, qt) in enumerate(zip(self.ensemble.critics, self.ensemble.targets)):
            nets[f"critic{i}"] = q
            nets[f"critic{i}_target"] = qt
        return nets

    def _optimizers(self) -> dict:
        opts = {"actor": self.actor_opt, "alpha": self.alpha_opt}
        for i, o in enumerate(self.ensemble.optimizers):
            opts[f"critic{i}"] = o
        return opts

    def save(self, directory) -> Path:
        """Write a checkpoint bundle sufficient for a bit-exact resume.

        Layout: ``agent.json`` (config, counters, alpha, RNG states), one
        network file plus JSON sidecar per network, ``optimizers.npz`` with
        Adam moments, and the replay dump ``buffer.bin`` + ``buffer.bin.json``.
        """
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, net in self._networks().items():
            save_params(net, d / f"{name}.bin")
        arrays = {}
        steps = {}
        for name, opt in self._optimizers().items():
            st = opt.state_dict()
            steps[name] = st["t"]
            for j, (m, v) in enumerate(zip(st["m"], st["v"])):
                arrays[f"{name}.m{j}"] = m
                arrays[f"{name}.v{j}"] = v
        np.savez(d / "optimizers.npz", **arrays)
        self.buffer.dump(d / "buffer.bin")
        last = None if self._last_batch is None else self._last_batch.indices.tolist()
        meta = {
            "format": "vmfer-agent",
            "version": 1,
            "config": self.config.to_dict(),
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "action_high": self.action_high,
            "seed": self.seed,
            "log_alpha": float(self.log_alpha[0]),
            "optimizer_steps": steps,
            "counters": {"learn_calls": self.learn_calls, "critic_updates": self.critic_updates,
                         "actor_updates": self.actor_updates, "episodes": self.episodes},
            "episode": {"obs": None if self._obs is None else self._obs.tolist(),
                        "return": self._episode_return, "last_return": self.last_episode_return},
            "last_batch": last,
            "rng": {"explore": self.rng_explore.bit_generator.state,
                    "sample": self.rng_sample.bit_generator.state,
                    "noise": self.rng_noise.bit_generator.state},
            "networks": sorted(self._networks()),
        }
        (d / "agent.json").write_text(json.dumps(meta, indent=2))
        return d

    @classmethod
    def load(cls, directory) -> "Agent":
        d = Path(directory)
        meta = json.loads((d / "agent.json").read_text())
        config = AgentConfig.from_dict(meta["config"])
        agent = cls(config, meta["obs_dim"], meta["act_dim"], meta["action_high"], meta["seed"])
        for name, net in agent._networks().items():
            net.set_flat(load_params(d / f"{name}.bin").get_flat())
        with np.load(d / "optimizers.npz") as z:
            for name, opt in agent._optimizers().items():
                n = len(opt.m)
                opt.load_state_dict({"t": meta["optimizer_steps"][name],
                                     "m": [z[f"{name}.m{j}"] for j in range(n)],
                                     "v": [z[f"{name}.v{j}"] for j in range(n)]})
        agent.log_alpha[0] = meta["log_alpha"]
        agent.buffer = ReplayBuffer.restore(d / "buffer.bin")
        cnt = meta["counters"]
        agent.learn_calls = cnt["learn_calls"]
        agent.critic_updates = cnt["critic_updates"]
        agent.actor_updates = cnt["actor_updates"]
        agent.episodes = cnt["episodes"]
        ep = meta["episode"]
        agent._obs = None if ep["obs"] is None else np.array(ep["obs"])
        agent._episode_return = ep["return"]
        agent.last_episode_return = ep["last_return"]
        if meta["last_batch"] is not None:
            agent._last_batch = agent.buffer.batch(meta["last_batch"])
        agent.rng_explore.bit_generator.state = meta["rng"]["explore"]
        agent.rng_sample.bit_generator.state = meta["rng"]["sample"]
        agent.rng_noise.bit_generator.state = meta["rng"]["noise"]
        return agent


def _mean_angle(g1, g2) -> float:
    """Mean angle in degrees between paired gradient rows, skipping zero rows."""
    ok = (np.linalg.norm(g1, axis=1) > 0.0) & (np.linalg.norm(g2, axis=1) > 0.0)
    if not ok.any():
        return 0.0
    return float(np.mean(angles_between(g1[ok], g2[ok])))
