"""Desk-scale environments.

``ShootingEnv`` and ``ToyLandscape`` reproduce the two-critic toy study;
``PendulumEnv`` and ``DoubleIntegratorEnv`` are small continuous-control tasks
for the agents. Environments follow a minimal interface: ``reset()`` returns
an observation, ``step(action)`` returns ``(obs, reward, terminated,
truncated)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .dirstats import angles_between
from .errors import ConfigurationError, EmptyInputError
from .gradnet import QuadraticHead

SHOOTING_START = np.array([-0.5, -0.5])
SHOOTING_TARGET = np.array([-0.5, -0.5])
TOY_NOISE_STD = 0.1  # N(0, 0.01) read as variance 0.01


def shooting_step(action) -> tuple[float, bool]:
    """Reward ``-||a - a*||`` of one shot; every episode ends after it."""
    a = np.asarray(action, dtype=np.float64)
    return -float(np.linalg.norm(a - SHOOTING_TARGET)), True


class ShootingEnv:
    """One-step MDP: a fixed start state, one shot, reward by distance to target."""

    obs_dim = 2
    act_dim = 2
    horizon = 1
    return_floor = None

    def __init__(self, action_high: float = 2.0, seed=None):
        self.action_high = np.full(2, float(action_high))

    def reset(self) -> np.ndarray:
        return SHOOTING_START.copy()

    def step(self, action):
        r, done = shooting_step(action)
        return SHOOTING_START.copy(), r, done, False


class ToyLandscape:
    """Two fixed critics that disagree about the best action.

    ``Q1(a) = -(a + 1 + e)^T (a + 1 + e)`` and ``Q2(a) = -(a - 1 + e)^T (a - 1 + e)``
    with a fresh ``e ~ N(0, 0.1^2 I)`` per critic per query.
    """

    def __init__(self, noise_std: float = TOY_NOISE_STD, rng=None):
        self.noise_std = float(noise_std)
        self.rng = np.random.default_rng(rng)

    def _noise(self, shape):
        if self.noise_std == 0.0:
            return np.zeros(shape)
        return self.rng.normal(0.0, self.noise_std, size=shape)

    def q_values(self, actions) -> tuple[np.ndarray, np.ndarray]:
        a = np.asarray(actions, dtype=np.float64)
        d1 = a + 1.0 + self._noise(a.shape)
        d2 = a - 1.0 + self._noise(a.shape)
        return -np.sum(d1 * d1, axis=-1), -np.sum(d2 * d2, axis=-1)

    def gradients(self, actions) -> tuple[np.ndarray, np.ndarray]:
        """dQ1/da and dQ2/da for one action (2,) or a batch (m, 2)."""
        a = np.asarray(actions, dtype=np.float64)
        g1 = -2.0 * (a + 1.0 + self._noise(a.shape))
        g2 = -2.0 * (a - 1.0 + self._noise(a.shape))
        return g1, g2

    def critics(self, obs_dim: int = 2) -> list:
        """The two critics as networks over ``concat(state, action)``."""
        return [
            QuadraticHead(obs_dim + 2, -np.ones(2), -1.0, offset=obs_dim,
                          noise_std=self.noise_std, rng=self.rng),
            QuadraticHead(obs_dim + 2, np.ones(2), -1.0, offset=obs_dim,
                          noise_std=self.noise_std, rng=self.rng),
        ]


def toy_gradients(action, rng=None, noise_std: float = TOY_NOISE_STD):
    return ToyLandscape(noise_std, rng).gradients(action)


def angle_grid(lo: float = -2.0, hi: float = 2.0, n: int = 81):
    """Noise-free angle between the two toy gradients on an n x n grid.

    Returns ``(xs, ys, angles)`` with ``angles[i, j]`` at action ``(xs[j], ys[i])``.
    Points where a gradient vanishes get NaN.
    """
    xs = np.linspace(lo, hi, n)
    ys = np.linspace(lo, hi, n)
    X, Y = np.meshgrid(xs, ys)
    a = np.stack([X.ravel(), Y.ravel()], axis=1)
    g1 = -2.0 * (a + 1.0)
    g2 = -2.0 * (a - 1.0)
    ok = (np.linalg.norm(g1, axis=1) > 0) & (np.linalg.norm(g2, axis=1) > 0)
    ang = np.full(a.shape[0], np.nan)
    ang[ok] = angles_between(g1[ok], g2[ok])
    return xs, ys, ang.reshape(n, n)


class ToyStrategy(str, enum.Enum):
    UNIFORM = "uniform"
    UNCERTAINTY = "uncertainty"
    ORACLE = "oracle"


@dataclass
class ToyCandidates:
    """Candidate transitions for one toy policy update.

    ``g1``/``g2`` are the two critics' action gradients at each candidate and
    ``update`` is the gradient the policy step would apply (defaults to ``g1``,
    the TD3 convention of improving against the first critic).
    """

    actions: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    update: np.ndarray = None

    def __post_init__(self):
        if self.update is None:
            self.update = self.g1

    def __len__(self) -> int:
        return self.actions.shape[0]


def toy_strategy_step(strategy, candidates: ToyCandidates, policy_action, rng=None,
                      target=SHOOTING_TARGET) -> int:
    """Index of the candidate a strategy would learn from.

    UNIFORM picks at random. UNCERTAINTY picks the smallest angle between the
    two critic gradients. ORACLE picks at random among candidates whose update
    gradient points toward the optimal action, or at random if none does.
    """
    strategy = ToyStrategy(strategy)
    n = len(candidates)
    if n == 0:
        raise EmptyInputError("empty candidate batch")
    rng = np.random.default_rng(rng)
    if strategy is ToyStrategy.UNIFORM:
        return int(rng.integers(n))
    if strategy is ToyStrategy.UNCERTAINTY:
        return int(np.argmin(angles_between(candidates.g1, candidates.g2)))
    toward = np.asarray(target, dtype=np.float64) - np.asarray(policy_action, dtype=np.float64)
    good = np.flatnonzero(candidates.update @ toward > 0.0)
    if good.size == 0:
        return int(rng.integers(n))
    return int(good[rng.integers(good.size)])


PENDULUM_DT = 0.05
PENDULUM_G = 10.0
PENDULUM_MAX_SPEED = 8.0
PENDULUM_MAX_TORQUE = 2.0


def angle_normalize(x):
    return ((x + np.pi) % (2.0 * np.pi)) - np.pi


def pendulum_step(state, action):
    """One semi-implicit Euler step of a rigid pendulum (theta = 0 is upright).

    Returns ``(next_state, reward, done)`` with reward
    ``-(theta^2 + 0.1 thetadot^2 + 0.001 u^2)`` on the pre-step state.
    """
    th, thdot = float(state[0]), float(state[1])
    u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                      -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE))
    cost = angle_normalize(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
    newthdot = thdot + (3.0 * PENDULUM_G / 2.0 * math.sin(th) + 3.0 * u) * PENDULUM_DT
    newthdot = min(max(newthdot, -PENDULUM_MAX_SPEED), PENDULUM_MAX_SPEED)
    newth = th + newthdot * PENDULUM_DT
    return np.array([newth, newthdot]), -cost, False


def pendulum_energy(state) -> float:
    """Mechanical energy per unit inertia of the undamped, unforced pendulum."""
    th, thdot = state
    return 0.5 * thdot ** 2 + 1.5 * PENDULUM_G * math.cos(th)


class PendulumEnv:
    """Swing-up pendulum with a 200-step horizon and torque in [-2, 2]."""

    obs_dim = 3
    act_dim = 1
    horizon = 200
    return_floor = -horizon * (math.pi ** 2 + 0.1 * PENDULUM_MAX_SPEED ** 2 + 0.001 * PENDULUM_MAX_TORQUE ** 2)

    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.action_high = np.array([PENDULUM_MAX_TORQUE])
        self.state = np.zeros(2)
        self.t = 0

    def _obs(self) -> np.ndarray:
        th, thdot = self.state
        return np.array([math.sin(th), math.cos(th), thdot])

    def reset(self) -> np.ndarray:
        self.state = np.array([self.rng.uniform(-np.pi, np.pi), self.rng.uniform(-1.0, 1.0)])
        self.t = 0
        return self._obs()

    def step(self, action):
        self.state, r, done = pendulum_step(self.state, action)
        self.t += 1
        return self._obs(), r, done, self.t >= self.horizon


class DoubleIntegratorEnv:
    """Point mass in the plane driven by a bounded 2-D acceleration.

    Reward ``-(||x||^2 + 0.1 ||v||^2 + 0.01 ||u||^2)`` per step, 100 steps.
    """

    obs_dim = 4
    act_dim = 2
    horizon = 100
    dt = 0.1
    return_floor = None

    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.action_high = np.ones(2)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.t = 0

    def reset(self) -> np.ndarray:
        self.pos = self.rng.uniform(-1.0, 1.0, size=2)
        self.vel = np.zeros(2)
        self.t = 0
        return np.concatenate([self.pos, self.vel])

    def step(self, action):
        u = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        r = -(self.pos @ self.pos + 0.1 * self.vel @ self.vel + 0.01 * u @ u)
        self.vel = np.clip(self.vel + u * self.dt, -2.0, 2.0)
        self.pos = np.clip(self.pos + self.vel * self.dt, -3.0, 3.0)
        self.t += 1
        return np.concatenate([self.pos, self.vel]), float(r), False, self.t >= self.horizon


ENVIRONMENTS = {
    "pendulum": PendulumEnv,
    "double_integrator": DoubleIntegratorEnv,
    "shooting": ShootingEnv,
}


def make_env(name: str, seed=None):
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(seed=seed)
