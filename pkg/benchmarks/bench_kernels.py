"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times sum-tree writes, sum-tree draws and batched bundle factors on both
backends (when the extension is built) and checks that they agree exactly.
"""
import argparse
import timeit

import numpy as np

from vmfer import kernels


def cases(rng):
    n_leaves = 1 << 17
    idx = rng.integers(0, n_leaves, 256)
    vals = rng.random(256) + 0.1
    leaves = rng.random(n_leaves) + 0.1
    targets = rng.random(256)
    grads = rng.normal(size=(5, 256, 6))
    e = rng.integers(0, 2, 256)
    return n_leaves, idx, vals, leaves, targets, grads, e


def bench(mod, repeat, rng):
    n_leaves, idx, vals, leaves, targets, grads, e = cases(rng)
    tree = np.zeros(2 * n_leaves)
    tree[n_leaves:] = leaves
    mod.sumtree_rebuild(tree, n_leaves)
    scaled = targets * tree[1]
    out = {}
    out["sumtree_set (256 writes)"] = min(timeit.repeat(lambda: mod.sumtree_set(tree, n_leaves, idx, vals),
                                                        number=10, repeat=repeat)) / 10
    out["sumtree_find (256 draws)"] = min(timeit.repeat(lambda: mod.sumtree_find(tree, n_leaves, scaled),
                                                        number=10, repeat=repeat)) / 10
    out["bundle_factors (N=5, b=256, p=6)"] = min(timeit.repeat(lambda: mod.bundle_factors(grads, e),
                                                                number=10, repeat=repeat)) / 10
    results = (mod.sumtree_find(tree, n_leaves, scaled), mod.bundle_factors(grads, e), tree.copy())
    return out, results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    timings = {}
    outputs = {}
    for name, mod in backends.items():
        timings[name], outputs[name] = bench(mod, args.repeat, np.random.default_rng(0))
    names = list(backends)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':34s}" + "".join(f"{n:>14s}" for n in names) + ("      speedup" if len(names) == 2 else ""))
    for k in timings[names[0]]:
        row = f"{k:34s}" + "".join(f"{timings[n][k] * 1e6:12.1f}us" for n in names)
        if len(names) == 2:
            row += f"{timings['python'][k] / timings['cython'][k]:12.1f}x"
        print(row)
    if len(names) == 2:
        a, b = outputs["cython"], outputs["python"]
        same = (np.array_equal(a[0], b[0]) and all(np.array_equal(x, y) for x, y in zip(a[1], b[1]))
                and np.array_equal(a[2], b[2]))
        print(f"backends agree bit-for-bit: {same}")


if __name__ == "__main__":
    main()
