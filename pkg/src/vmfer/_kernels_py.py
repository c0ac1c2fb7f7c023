"""Numpy reference implementation of the hot kernels.

Mirrors ``_kernels.pyx`` operation for operation so both backends produce
bit-identical trees, draws and factors.
"""
import math

import numpy as np

DEGENERATE_R = 1e-12


def sumtree_set(tree, n_leaves, idx, values):
    """Write ``values`` into leaves ``idx`` and refresh every ancestor.

    Parents are recomputed as ``left + right`` instead of accumulating deltas,
    so the tree is a pure function of its leaves.
    """
    idx = np.asarray(idx, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    for i in range(idx.shape[0]):
        node = n_leaves + int(idx[i])
        tree[node] = values[i]
        node >>= 1
        while node >= 1:
            tree[node] = tree[2 * node] + tree[2 * node + 1]
            node >>= 1


def sumtree_rebuild(tree, n_leaves):
    for node in range(n_leaves - 1, 0, -1):
        tree[node] = tree[2 * node] + tree[2 * node + 1]


def sumtree_find(tree, n_leaves, targets):
    """Leaf index holding each cumulative-mass target.

    Descent is vectorized over targets and looped over tree levels. A branch
    with zero mass is never entered, which guards against float round-off
    pushing a target past the total.
    """
    targets = np.array(targets, dtype=np.float64)
    node = np.ones(targets.shape[0], dtype=np.int64)
    depth = int(n_leaves).bit_length() - 1
    for _ in range(depth):
        left = 2 * node
        lmass = tree[left]
        rmass = tree[left + 1]
        go_left = (targets < lmass) | (rmass <= 0.0)
        targets = np.where(go_left, targets, targets - lmass)
        node = np.where(go_left, left, left + 1)
    return node - n_leaves


def bundle_factors(grads, e):
    """Sampling factors for a batch of gradient bundles.

    Args:
        grads: array (N, b, p) of per-critic action gradients.
        e: int array (b,) with the critic index used for the update.

    Returns:
        (R, cos_e, factor) each of shape (b,). Degenerate bundles (fewer than
        two nonzero gradients, a zero selected gradient, or R below 1e-12)
        get R=0, cos_e=0 and factor 1.
    """
    grads = np.asarray(grads, dtype=np.float64)
    n_crit, b, p = grads.shape
    # sums run in the same order as the compiled loops so results match bit for bit
    sq = np.zeros((n_crit, b))
    for k in range(p):
        sq = sq + grads[:, :, k] * grads[:, :, k]
    norms = np.sqrt(sq)
    alive = norms > 0.0
    count = alive.sum(axis=0)
    safe = np.where(alive, norms, 1.0)
    xsum = np.zeros((b, p))
    for i in range(n_crit):
        xsum = np.where(alive[i][:, None], xsum + grads[i] / safe[i][:, None], xsum)
    mean = xsum / np.maximum(count, 1)[:, None]
    ss = np.zeros(b)
    for k in range(p):
        ss = ss + mean[:, k] * mean[:, k]
    R = np.sqrt(ss)
    e = np.asarray(e, dtype=np.int64)
    cols = np.arange(b)
    alive_e = alive[e, cols]
    ok = (count >= 2) & alive_e & (R >= DEGENERATE_R)
    x_e = grads[e, cols] / safe[e, cols][:, None]
    c = np.zeros(b)
    for k in range(p):
        c = c + mean[:, k] * x_e[:, k]
    cos_e = np.where(ok, c / np.where(ok, R, 1.0), 0.0)
    R = np.where(ok, R, 0.0)
    rc = R * cos_e
    factor = np.array([math.exp(v) if o else 1.0 for v, o in zip(rc.tolist(), ok.tolist())])
    return R, cos_e, factor
