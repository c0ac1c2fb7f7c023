"""Small multilayer perceptrons with hand-written backpropagation.

Only what the agents need: ReLU hidden layers, an identity or scaled-tanh
output, gradients with respect to both the parameters and the input, Adam,
Polyak averaging and a flat binary checkpoint format.

Checkpoint format (``save_params``): the ``.bin`` file is

    8 bytes   magic b"VMFRNET1"
    uint32    number of size entries L (little-endian)
    uint32[L] layer sizes
    float64[] parameters W0, b0, W1, b1, ... each in C order, little-endian

with a JSON sidecar ``<path>.json`` naming every tensor and its shape.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionMismatchError

MAGIC = b"VMFRNET1"
DEFAULT_HIDDEN = (64, 64)


class Mlp:
    """Fully connected network ``x -> relu(x W0 + b0) -> ... -> out``.

    Weights are stored as (fan_in, fan_out) so a batch of row vectors is
    propagated with ``x @ W``. Inputs may be a single vector or a 2-D batch;
    outputs have the matching rank.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        output_activation: str = "identity",
        output_scale: float = 1.0,
        rng=None,
    ):
        if len(layer_sizes) < 2 or any(int(s) < 1 for s in layer_sizes):
            raise ConfigurationError(f"bad layer sizes {layer_sizes!r}")
        if output_activation not in ("identity", "tanh"):
            raise ConfigurationError(f"unknown output activation {output_activation!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.output_activation = output_activation
        self.output_scale = float(output_scale)
        rng = np.random.default_rng(rng)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @property
    def param_count(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise DimensionMismatchError(f"expected {self.param_count} parameters, got {flat.shape}")
        pos = 0
        for p in self.params:
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def copy(self) -> "Mlp":
        net = Mlp.__new__(Mlp)
        net.layer_sizes = list(self.layer_sizes)
        net.output_activation = self.output_activation
        net.output_scale = self.output_scale
        net.weights = [W.copy() for W in self.weights]
        net.biases = [b.copy() for b in self.biases]
        return net

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionMismatchError(f"input shape {x.shape} does not match in_dim {self.in_dim}")
        return x, single

    def _forward(self, x: np.ndarray):
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            pre.append(z)
            if i < last:
                h = np.maximum(z, 0.0)
                acts.append(h)
            elif self.output_activation == "tanh":
                h = self.output_scale * np.tanh(z)
            else:
                h = z
        return h, (acts, pre)

    def forward(self, x) -> np.ndarray:
        x, single = self._check_input(x)
        y, _ = self._forward(x)
        return y[0] if single else y

    __call__ = forward

    def forward_with_cache(self, x):
        x, _ = self._check_input(x)
        return self._forward(x)

    def backward(self, cache, cotangent):
        """Reverse pass for a cached batch forward.

        Returns ``(d_input, grads)`` where ``grads`` lists dW0, db0, dW1, ...
        summed over the batch.
        """
        acts, pre = cache
        d = np.asarray(cotangent, dtype=np.float64)
        if d.ndim == 1:
            d = d[None, :]
        if d.shape != pre[-1].shape:
            raise DimensionMismatchError(f"cotangent shape {d.shape} != output shape {pre[-1].shape}")
        if self.output_activation == "tanh":
            t = np.tanh(pre[-1])
            d = d * self.output_scale * (1.0 - t * t)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = acts[i].T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            d = d @ self.weights[i].T
            if i > 0:
                d = d * (pre[i - 1] > 0.0)
        return d, grads

    def grad_wrt_input(self, x, output_cotangent) -> np.ndarray:
        """d(cotangent . f(x))/dx, row-wise for a batch."""
        xb, single = self._check_input(x)
        cot = np.asarray(output_cotangent, dtype=np.float64)
        if single:
            cot = cot[None, :]
        _, cache = self._forward(xb)
        dx, _ = self.backward(cache, cot)
        return dx[0] if single else dx

    def grad_wrt_params(self, x, output_cotangent) -> np.ndarray:
        """Flat gradient of sum over the batch of cotangent . f(x)."""
        xb, single = self._check_input(x)
        cot = np.asarray(output_cotangent, dtype=np.float64)
        if single:
            cot = cot[None, :]
        _, cache = self._forward(xb)
        _, grads = self.backward(cache, cot)
        return np.concatenate([g.ravel() for g in grads])


class QuadraticHead:
    """Fixed quadratic ``scale * ||x[offset:] - center||^2``, optionally noisy.

    Shares the forward/backward interface of :class:`Mlp` so analytic critics
    (the toy landscape) plug into the same gradient code. With ``noise_std``
    > 0 a fresh offset is drawn for every row of every query.
    """

    def __init__(self, in_dim: int, center, scale: float = -1.0, offset: int = 0,
                 noise_std: float = 0.0, rng=None):
        self.center = np.asarray(center, dtype=np.float64)
        self.scale = float(scale)
        self.offset = int(offset)
        self.noise_std = float(noise_std)
        self.rng = np.random.default_rng(rng)
        self.layer_sizes = [int(in_dim), 1]
        if self.offset + self.center.shape[0] != in_dim:
            raise ConfigurationError("center does not fit the input slice")

    in_dim = property(lambda self: self.layer_sizes[0])
    out_dim = property(lambda self: 1)

    def forward_with_cache(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise DimensionMismatchError(f"input shape {x.shape} does not match in_dim {self.in_dim}")
        d = x[:, self.offset:] - self.center
        if self.noise_std > 0.0:
            d = d + self.rng.normal(0.0, self.noise_std, size=d.shape)
        y = self.scale * np.einsum("ij,ij->i", d, d)[:, None]
        return y, d

    def forward(self, x):
        single = np.ndim(x) == 1
        y, _ = self.forward_with_cache(x)
        return y[0] if single else y

    __call__ = forward

    def backward(self, cache, cotangent):
        d = cache
        cot = np.asarray(cotangent, dtype=np.float64).reshape(-1, 1)
        dx = np.zeros((d.shape[0], self.in_dim))
        dx[:, self.offset:] = 2.0 * self.scale * d * cot
        return dx, []

    def grad_wrt_input(self, x, output_cotangent):
        single = np.ndim(x) == 1
        y, cache = self.forward_with_cache(x)
        dx, _ = self.backward(cache, np.broadcast_to(np.asarray(output_cotangent, dtype=np.float64).reshape(-1, 1), y.shape))
        return dx[0] if single else dx


def polyak_update(target: Mlp, source: Mlp, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target, in place."""
    for pt, ps in zip(target.params, source.params):
        pt *= 1.0 - tau
        pt += tau * ps


class Adam:
    """Adam over a fixed list of arrays, updated in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


@dataclass
class GradBundle:
    """Per-critic actor losses and their action gradients.

    ``grads`` has shape (N, p) for one transition or (N, b, p) for a batch;
    ``losses`` has shape (N,) or (N, b).
    """

    grads: np.ndarray
    losses: np.ndarray

    @property
    def size(self) -> int:
        return self.grads.shape[0]


def critic_action_grads(critics: Sequence[Mlp], states, actions):
    """Q values (N, b) and dQ_i/da (N, b, p) for every critic."""
    sa = np.concatenate([states, actions], axis=1)
    obs_dim = states.shape[1]
    n = len(critics)
    b, p = actions.shape
    q = np.empty((n, b))
    dq = np.empty((n, b, p))
    ones = np.ones((b, 1))
    for i, net in enumerate(critics):
        y, cache = net.forward_with_cache(sa)
        dx, _ = net.backward(cache, ones)
        q[i] = y[:, 0]
        dq[i] = dx[:, obs_dim:]
    return q, dq


def actor_loss_bundle(critics, actor_out, state, mode: str = "TD3", alpha: float = 0.0, logpi=0.0) -> GradBundle:
    """Losses l_i and gradients dl_i/da for every critic in the ensemble.

    TD3 uses l_i = -Q_i(s, a); SAC uses l_i = alpha * logpi - Q_i(s, a). The
    entropy term is treated as constant in the action input, so both modes
    give the same gradients and differ only in the losses.

    Accepts a single transition (1-D state/action) or a batch.
    """
    nets = getattr(critics, "critics", critics)
    if len(nets) < 2:
        raise ConfigurationError("gradient uncertainty needs at least two critics")
    mode = mode.upper()
    if mode not in ("TD3", "SAC"):
        raise ConfigurationError(f"unknown actor-loss mode {mode!r}")
    s = np.asarray(state, dtype=np.float64)
    a = np.asarray(actor_out, dtype=np.float64)
    single = a.ndim == 1
    if single:
        s, a = s[None, :], a[None, :]
    q, dq = critic_action_grads(nets, s, a)
    losses = -q
    if mode == "SAC":
        losses = losses + alpha * np.asarray(logpi, dtype=np.float64)
    grads = -dq
    if single:
        return GradBundle(grads[:, 0, :], losses[:, 0])
    return GradBundle(grads, losses)


def save_params(net: Mlp, path) -> Path:
    """Write a network to ``path`` plus the ``path.json`` sidecar."""
    path = Path(path)
    sizes = net.layer_sizes
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        fh.write(net.get_flat().astype("<f8").tobytes())
    tensors = []
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        tensors.append({"name": f"W{i}", "shape": list(W.shape)})
        tensors.append({"name": f"b{i}", "shape": list(b.shape)})
    meta = {
        "format": "vmfer-mlp",
        "version": 1,
        "dtype": "<f8",
        "order": "C",
        "layer_sizes": sizes,
        "output_activation": net.output_activation,
        "output_scale": net.output_scale,
        "param_count": net.param_count,
        "tensors": tensors,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))
    return path


def load_params(path) -> Mlp:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a vmfer network file")
    (n,) = struct.unpack_from("<I", raw, 8)
    sizes = list(struct.unpack_from(f"<{n}I", raw, 12))
    if sizes != meta["layer_sizes"]:
        raise ValueError("binary header and JSON sidecar disagree on layer sizes")
    flat = np.frombuffer(raw, dtype="<f8", offset=12 + 4 * n).astype(np.float64)
    net = Mlp(sizes, meta["output_activation"], meta["output_scale"], rng=0)
    net.set_flat(flat)
    return net
