# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled sum-tree and gradient-bundle kernels.

Each routine performs the same floating-point operations, in the same
order, as its twin in ``_kernels_py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp

cnp.import_array()

DEF DEGENERATE_R = 1e-12


def sumtree_set(double[::1] tree, Py_ssize_t n_leaves, idx, values):
    cdef const cnp.int64_t[::1] ix = np.ascontiguousarray(idx, dtype=np.int64)
    cdef const double[::1] vals = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t i, node
    for i in range(ix.shape[0]):
        node = n_leaves + ix[i]
        tree[node] = vals[i]
        node >>= 1
        while node >= 1:
            tree[node] = tree[2 * node] + tree[2 * node + 1]
            node >>= 1


def sumtree_rebuild(double[::1] tree, Py_ssize_t n_leaves):
    cdef Py_ssize_t node
    for node in range(n_leaves - 1, 0, -1):
        tree[node] = tree[2 * node] + tree[2 * node + 1]


def sumtree_find(double[::1] tree, Py_ssize_t n_leaves, targets):
    cdef double[::1] tg = np.array(targets, dtype=np.float64)
    cdef Py_ssize_t m = tg.shape[0]
    out = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] res = out
    cdef Py_ssize_t i, node, left
    cdef double t, lmass, rmass
    for i in range(m):
        t = tg[i]
        node = 1
        while node < n_leaves:
            left = 2 * node
            lmass = tree[left]
            rmass = tree[left + 1]
            if t < lmass or rmass <= 0.0:
                node = left
            else:
                t = t - lmass
                node = left + 1
        res[i] = node - n_leaves
    return out


def bundle_factors(grads, e):
    cdef const double[:, :, ::1] g = np.ascontiguousarray(grads, dtype=np.float64)
    cdef const cnp.int64_t[::1] sel = np.ascontiguousarray(e, dtype=np.int64)
    cdef Py_ssize_t n_crit = g.shape[0], b = g.shape[1], p = g.shape[2]
    R_out = np.zeros(b, dtype=np.float64)
    cos_out = np.zeros(b, dtype=np.float64)
    fac_out = np.ones(b, dtype=np.float64)
    cdef double[::1] Rv = R_out
    cdef double[::1] Cv = cos_out
    cdef double[::1] Fv = fac_out
    cdef double[::1] norms = np.empty(n_crit, dtype=np.float64)
    cdef double[::1] mean = np.empty(p, dtype=np.float64)
    cdef Py_ssize_t j, i, k, count, ei
    cdef double s, r, c, xe
    for j in range(b):
        count = 0
        for i in range(n_crit):
            s = 0.0
            for k in range(p):
                s = s + g[i, j, k] * g[i, j, k]
            norms[i] = sqrt(s)
            if norms[i] > 0.0:
                count += 1
        ei = sel[j]
        for k in range(p):
            s = 0.0
            for i in range(n_crit):
                if norms[i] > 0.0:
                    s = s + g[i, j, k] / norms[i]
            mean[k] = s / (count if count > 0 else 1)
        s = 0.0
        for k in range(p):
            s = s + mean[k] * mean[k]
        r = sqrt(s)
        if count < 2 or not (norms[ei] > 0.0) or r < DEGENERATE_R:
            continue
        c = 0.0
        for k in range(p):
            xe = g[ei, j, k] / norms[ei]
            c = c + mean[k] * xe
        c = c / r
        Rv[j] = r
        Cv[j] = c
        Fv[j] = exp(r * c)
    return R_out, cos_out, fac_out
