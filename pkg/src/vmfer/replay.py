"""Replay buffer with per-transition sampling factors.

Critic (policy-evaluation) batches are drawn uniformly, or rank-prioritized by
TD error when PER is enabled. Actor (policy-improvement) batches are drawn
from the sampling factors ``p_j``, either proportionally or by rank.

Binary dump layout (all little-endian), written by :meth:`ReplayBuffer.dump`:

    header   magic b"VMFRBUF1", uint32 version, uint32 obs_dim, uint32 act_dim,
             uint64 capacity, uint64 size, uint64 next_insert_index
    records  ``size`` rows of :func:`record_dtype` in slot order
    sections for each rank index (factor, then td priority if PER is on):
             uint64 n, float64[n] snapshot of sorted keys

The JSON manifest next to it carries the buffer configuration and counters.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionMismatchError, EmptyInputError

BUFFER_MAGIC = b"VMFRBUF1"
BUFFER_VERSION = 1
BRUTE_FORCE_LIMIT = 10_000


class SamplerMode(str, enum.Enum):
    UNIFORM = "uniform"
    VMFER_UNCERTAINTY = "vmfer_uncertainty"
    VMFER_RANK = "vmfer_rank"
    PER_RANK = "per_rank"

    @classmethod
    def parse(cls, value) -> "SamplerMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown sampler mode {value!r}") from None


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    sampling_factor: float = 1.0
    td_priority: float = 0.0
    insert_index: int = -1


@dataclass
class Batch:
    """Arrays for a sampled mini-batch; iterating yields ``(index, Transition)``."""

    indices: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    factors: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]

    def __iter__(self) -> Iterator[tuple[int, Transition]]:
        for k, idx in enumerate(self.indices):
            yield int(idx), Transition(
                self.states[k], self.actions[k], float(self.rewards[k]),
                self.next_states[k], bool(self.dones[k]), float(self.factors[k]),
            )


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class SumTree:
    """Array-backed binary sum tree over ``capacity`` non-negative leaves."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        n = 1
        while n < self.capacity:
            n *= 2
        self.n_leaves = n
        self.tree = np.zeros(2 * n, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaves(self) -> np.ndarray:
        return self.tree[self.n_leaves:self.n_leaves + self.capacity]

    def set(self, idx, values) -> None:
        kernels.sumtree_set(self.tree, self.n_leaves, np.atleast_1d(idx), np.atleast_1d(values))

    def load(self, values) -> None:
        """Replace every leaf at once and rebuild the internal nodes."""
        self.tree[:] = 0.0
        self.tree[self.n_leaves:self.n_leaves + len(values)] = values
        kernels.sumtree_rebuild(self.tree, self.n_leaves)

    def find(self, targets) -> np.ndarray:
        return kernels.sumtree_find(self.tree, self.n_leaves, targets)

    def sample(self, b: int, rng) -> np.ndarray:
        total = self.tree[1]
        if total <= 0.0:
            raise EmptyInputError("sum tree has no mass")
        return self.find(_as_rng(rng).random(b) * total)


class RankIndex:
    """Rank-based sampling weights 1/rank over a per-slot key.

    Rank 1 is the largest key. Tied keys share the best rank among them
    (competition ranking), so equal keys are equally likely; the snapshot
    itself is ordered by key, then by insert index. Exact ranks are
    recomputed from the sorted snapshot every ``refresh_every`` writes. In
    between, a written slot gets the rank its new key would have in the
    snapshot (binary search), so ranks can be slightly stale.
    """

    def __init__(self, capacity: int, refresh_every: int = 1000):
        if refresh_every < 1:
            raise ConfigurationError("refresh_every must be >= 1")
        self.refresh_every = int(refresh_every)
        self.keys = np.zeros(capacity, dtype=np.float64)
        self.tree = SumTree(capacity)
        self.snapshot_neg = np.zeros(0)
        self.pending = 0

    def write(self, slots, keys, size: int, insert_index: np.ndarray) -> None:
        slots = np.atleast_1d(slots)
        keys = np.atleast_1d(np.asarray(keys, dtype=np.float64))
        self.keys[slots] = keys
        self.pending += slots.shape[0]
        if self.pending >= self.refresh_every:
            self.refresh(size, insert_index)
            return
        ranks = np.searchsorted(self.snapshot_neg, -keys, side="left") + 1
        self.tree.set(slots, 1.0 / ranks)

    def refresh(self, size: int, insert_index: np.ndarray) -> None:
        keys = self.keys[:size]
        order = np.lexsort((insert_index[:size], -keys))
        self.snapshot_neg = -keys[order]
        ranks = np.searchsorted(self.snapshot_neg, -keys, side="left") + 1
        self.tree.load(1.0 / ranks)
        self.pending = 0

    def sample(self, b: int, rng) -> np.ndarray:
        return self.tree.sample(b, rng)


def exact_rank_probabilities(keys, insert_index) -> np.ndarray:
    """Normalized 1/rank weights by direct counting; reference for tests.

    The rank of a key is one plus the number of strictly larger keys.
    """
    keys = np.asarray(keys, dtype=np.float64)
    ranks = (keys[None, :] > keys[:, None]).sum(axis=1) + 1
    w = 1.0 / ranks
    return w / w.sum()


def record_dtype(obs_dim: int, act_dim: int) -> np.dtype:
    return np.dtype([
        ("insert_index", "<i8"),
        ("state", "<f8", (obs_dim,)),
        ("action", "<f8", (act_dim,)),
        ("reward", "<f8"),
        ("next_state", "<f8", (obs_dim,)),
        ("done", "u1"),
        ("factor", "<f8"),
        ("td_priority", "<f8"),
        ("rank_weight", "<f8"),
        ("per_weight", "<f8"),
    ])


class ReplayBuffer:
    """FIFO ring buffer of transitions with vMFER sampling factors.

    Every stored transition starts with ``p_j = 1``. Factors only change
    through :meth:`update_factors` / :meth:`update_factor_ema`, which the
    agent calls for the transitions it resampled.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, per: bool = False,
                 rank_refresh: int = 1000):
        if capacity < 1 or obs_dim < 1 or act_dim < 1:
            raise ConfigurationError("capacity and dimensions must be positive")
        self.capacity = int(capacity)
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.per = bool(per)
        self.rank_refresh = int(rank_refresh)
        self.states = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.factors = np.ones(capacity)
        self.td_priority = np.zeros(capacity)
        self.insert_index = np.full(capacity, -1, dtype=np.int64)
        self.size = 0
        self.next_insert = 0
        self.factor_tree = SumTree(capacity)
        self.factor_rank = RankIndex(capacity, rank_refresh)
        self.per_rank = RankIndex(capacity, rank_refresh) if per else None

    def __len__(self) -> int:
        return self.size

    def insert(self, state, action, reward, next_state, done) -> int:
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        next_state = np.asarray(next_state, dtype=np.float64)
        if state.shape != (self.obs_dim,) or next_state.shape != (self.obs_dim,):
            raise DimensionMismatchError(f"state shape {state.shape} != ({self.obs_dim},)")
        if action.shape != (self.act_dim,):
            raise DimensionMismatchError(f"action shape {action.shape} != ({self.act_dim},)")
        slot = self.next_insert % self.capacity
        if self.per:
            prio = float(self.td_priority[:self.size].max()) if self.size else 1.0
            if prio <= 0.0:
                prio = 1.0
        self.states[slot] = state
        self.actions[slot] = action
        self.rewards[slot] = reward
        self.next_states[slot] = next_state
        self.dones[slot] = bool(done)
        self.insert_index[slot] = self.next_insert
        self.next_insert += 1
        self.size = min(self.size + 1, self.capacity)
        self.factors[slot] = 1.0
        self.factor_tree.set(slot, 1.0)
        self.factor_rank.write(slot, 1.0, self.size, self.insert_index)
        if self.per:
            self.td_priority[slot] = prio
            self.per_rank.write(slot, prio, self.size, self.insert_index)
        return slot

    def get(self, index: int) -> Transition:
        self._check_index(index)
        return Transition(
            self.states[index].copy(), self.actions[index].copy(), float(self.rewards[index]),
            self.next_states[index].copy(), bool(self.dones[index]), float(self.factors[index]),
            float(self.td_priority[index]), int(self.insert_index[index]),
        )

    def _check_index(self, index) -> None:
        idx = np.atleast_1d(index)
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise IndexError(f"index out of range for buffer of size {self.size}")

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(idx, self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx], self.factors[idx])

    def _require_data(self) -> None:
        if self.size == 0:
            raise EmptyInputError("cannot sample from an empty buffer")

    def sample_uniform(self, b: int, rng) -> Batch:
        self._require_data()
        return self.batch(_as_rng(rng).integers(0, self.size, size=b))

    def sample_evaluation(self, b: int, rng) -> Batch:
        """Critic mini-batch: rank-prioritized by TD error with PER, else uniform."""
        if not self.per:
            return self.sample_uniform(b, rng)
        self._require_data()
        return self.batch(self.per_rank.sample(b, rng))

    def resample_vmfer(self, b: int, mode, rng) -> Batch:
        """Actor mini-batch drawn from the sampling factors (with replacement)."""
        mode = SamplerMode.parse(mode)
        self._require_data()
        if mode is SamplerMode.VMFER_UNCERTAINTY:
            return self.batch(self.factor_tree.sample(b, rng))
        if mode is SamplerMode.VMFER_RANK:
            return self.batch(self.factor_rank.sample(b, rng))
        raise ConfigurationError(f"resample_vmfer needs a vMFER mode, got {mode.value}")

    def refresh_ranks(self) -> None:
        self.factor_rank.refresh(self.size, self.insert_index)
        if self.per:
            self.per_rank.refresh(self.size, self.insert_index)

    def set_factors(self, indices, values) -> None:
        """Overwrite sampling factors; later duplicates win."""
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        vals = np.atleast_1d(np.asarray(values, dtype=np.float64))
        self._check_index(idx)
        if np.any(~(vals > 0.0)):
            raise ValueError("sampling factors must be positive")
        self.factors[idx] = vals
        self.factor_tree.set(idx, vals)
        self.factor_rank.write(idx, vals, self.size, self.insert_index)

    def update_factors(self, indices, grads, e):
        """Recompute ``p_j = exp(R mu . x_e)`` for a batch of gradient bundles.

        Args:
            indices: (b,) buffer slots.
            grads: (N, b, p) per-critic action gradients dl_i/da.
            e: (b,) or scalar index of the critic used for the policy update.

        Returns:
            (R, cos_e, factors) arrays of shape (b,).
        """
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        grads = np.asarray(grads, dtype=np.float64)
        if grads.ndim != 3 or grads.shape[1] != idx.shape[0]:
            raise DimensionMismatchError(f"grads shape {grads.shape} does not match {idx.shape[0]} indices")
        e = np.broadcast_to(np.asarray(e, dtype=np.int64), idx.shape)
        if grads.shape[0] < 2:
            raise ConfigurationError("a gradient bundle needs at least two critics")
        if e.min() < 0 or e.max() >= grads.shape[0]:
            raise IndexError("critic index out of range")
        R, cos_e, fac = kernels.bundle_factors(grads, e)
        self.set_factors(idx, fac)
        return R, cos_e, fac

    def update_factor(self, index: int, bundle, e: int) -> float:
        grads = np.asarray(getattr(bundle, "grads", bundle), dtype=np.float64)
        _, _, fac = self.update_factors([index], grads[:, None, :], [e])
        return float(fac[0])

    def update_factor_ema(self, index: int, bundle, e: int, decay: float = 0.9) -> float:
        """``p_j <- decay * p_j + (1 - decay) * exp(R mu . x_e)``."""
        self._check_index(index)
        grads = np.asarray(getattr(bundle, "grads", bundle), dtype=np.float64)
        if grads.shape[0] < 2:
            raise ConfigurationError("a gradient bundle needs at least two critics")
        _, _, fresh = kernels.bundle_factors(grads[:, None, :], np.array([e]))
        new = decay * self.factors[index] + (1.0 - decay) * float(fresh[0])
        self.set_factors([index], [new])
        return float(new)

    def update_td_priority(self, index, td_error) -> None:
        if not self.per:
            raise ConfigurationError("TD priorities need a buffer built with per=True")
        idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
        self._check_index(idx)
        prio = np.abs(np.atleast_1d(np.asarray(td_error, dtype=np.float64)))
        self.td_priority[idx] = prio
        self.per_rank.write(idx, prio, self.size, self.insert_index)

    def brute_force_distribution(self, mode) -> np.ndarray:
        """Exact sampling probabilities over slots ``0..size-1`` by direct summation."""
        mode = SamplerMode.parse(mode)
        if self.size > BRUTE_FORCE_LIMIT:
            raise ConfigurationError(f"brute force limited to {BRUTE_FORCE_LIMIT} transitions")
        self._require_data()
        n = self.size
        if mode is SamplerMode.UNIFORM:
            return np.full(n, 1.0 / n)
        if mode is SamplerMode.VMFER_UNCERTAINTY:
            f = self.factors[:n]
            return f / f.sum()
        if mode is SamplerMode.VMFER_RANK:
            return exact_rank_probabilities(self.factors[:n], self.insert_index[:n])
        if not self.per:
            raise ConfigurationError("PER_RANK distribution needs per=True")
        return exact_rank_probabilities(self.td_priority[:n], self.insert_index[:n])

    def manifest(self) -> dict:
        return {
            "format": "vmfer-replay",
            "version": BUFFER_VERSION,
            "capacity": self.capacity,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "per": self.per,
            "rank_refresh": self.rank_refresh,
            "size": self.size,
            "next_insert_index": self.next_insert,
            "factor_rank_pending": self.factor_rank.pending,
            "per_rank_pending": self.per_rank.pending if self.per else 0,
            "record_fields": [name for name in record_dtype(1, 1).names],
        }

    def dump(self, path) -> Path:
        """Write the buffer to ``path`` and its manifest to ``path.json``."""
        path = Path(path)
        n = self.size
        rec = np.zeros(n, dtype=record_dtype(self.obs_dim, self.act_dim))
        rec["insert_index"] = self.insert_index[:n]
        rec["state"] = self.states[:n]
        rec["action"] = self.actions[:n]
        rec["reward"] = self.rewards[:n]
        rec["next_state"] = self.next_states[:n]
        rec["done"] = self.dones[:n]
        rec["factor"] = self.factors[:n]
        rec["td_priority"] = self.td_priority[:n]
        rec["rank_weight"] = self.factor_rank.tree.leaves()[:n]
        if self.per:
            rec["per_weight"] = self.per_rank.tree.leaves()[:n]
        with open(path, "wb") as fh:
            fh.write(BUFFER_MAGIC)
            fh.write(struct.pack("<III", BUFFER_VERSION, self.obs_dim, self.act_dim))
            fh.write(struct.pack("<QQQ", self.capacity, n, self.next_insert))
            fh.write(rec.tobytes())
            for index in (self.factor_rank, self.per_rank):
                if index is None:
                    continue
                snap = np.ascontiguousarray(-index.snapshot_neg, dtype="<f8")
                fh.write(struct.pack("<Q", snap.shape[0]))
                fh.write(snap.tobytes())
        Path(str(path) + ".json").write_text(json.dumps(self.manifest(), indent=2))
        return path

    @classmethod
    def restore(cls, path) -> "ReplayBuffer":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        raw = path.read_bytes()
        if raw[:8] != BUFFER_MAGIC:
            raise ValueError(f"{path} is not a vmfer replay dump")
        version, obs_dim, act_dim = struct.unpack_from("<III", raw, 8)
        if version != BUFFER_VERSION:
            raise ValueError(f"unsupported buffer version {version}")
        capacity, n, next_insert = struct.unpack_from("<QQQ", raw, 20)
        buf = cls(capacity, obs_dim, act_dim, per=meta["per"], rank_refresh=meta["rank_refresh"])
        dt = record_dtype(obs_dim, act_dim)
        off = 44
        rec = np.frombuffer(raw, dtype=dt, count=n, offset=off)
        off += n * dt.itemsize
        buf.size = int(n)
        buf.next_insert = int(next_insert)
        buf.insert_index[:n] = rec["insert_index"]
        buf.states[:n] = rec["state"]
        buf.actions[:n] = rec["action"]
        buf.rewards[:n] = rec["reward"]
        buf.next_states[:n] = rec["next_state"]
        buf.dones[:n] = rec["done"].astype(bool)
        buf.factors[:n] = rec["factor"]
        buf.td_priority[:n] = rec["td_priority"]
        buf.factor_tree.load(buf.factors[:n])
        buf.factor_rank.keys[:n] = rec["factor"]
        buf.factor_rank.tree.load(rec["rank_weight"])
        buf.factor_rank.pending = meta["factor_rank_pending"]
        indices = [(buf.factor_rank, "rank_weight")]
        if buf.per:
            buf.per_rank.keys[:n] = rec["td_priority"]
            buf.per_rank.tree.load(rec["per_weight"])
            buf.per_rank.pending = meta["per_rank_pending"]
            indices.append((buf.per_rank, "per_weight"))
        for index, _ in indices:
            (m,) = struct.unpack_from("<Q", raw, off)
            off += 8
            index.snapshot_neg = -np.frombuffer(raw, dtype="<f8", count=m, offset=off).astype(np.float64)
            off += 8 * m
        return buf
