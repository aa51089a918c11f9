"""Exact voxel traversal (Siddon path lengths) compiled with numba.

Grids are described by ``lower`` (mm, corner of voxel 0), ``voxel`` (mm)
and ``dims``; flat indices follow C order of ``data[ix, iy, iz]``.
Ray-parallel kernels write to disjoint outputs, and reductions run over a
fixed number of chunks, so results do not depend on the thread count.
"""
from __future__ import annotations

import numba as nb
import numpy as np
from scipy import sparse

# the bundled TBB is too old for numba; fall back quietly
if nb.config.THREADING_LAYER == "default":
    nb.config.THREADING_LAYER = "workqueue"

N_CHUNKS = 16


@nb.njit(cache=True, inline="always")
def _clip(a, b, lower, upper):
    t0 = 0.0
    t1 = 1.0
    for k in range(3):
        d = b[k] - a[k]
        if d == 0.0:
            if a[k] < lower[k] or a[k] > upper[k]:
                return 1.0, 0.0
        else:
            ta = (lower[k] - a[k]) / d
            tb = (upper[k] - a[k]) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@nb.njit(cache=True)
def trace_ray(a, b, lower, voxel, dims, out_idx, out_len):
    """Fill ``out_idx``/``out_len`` with the voxels crossed by segment a->b; return the count."""
    upper = np.empty(3)
    for k in range(3):
        upper[k] = lower[k] + voxel[k] * dims[k]
    t0, t1 = _clip(a, b, lower, upper)
    if t1 <= t0:
        return 0
    d = np.empty(3)
    for k in range(3):
        d[k] = b[k] - a[k]
    length = np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])

    idx = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    for k in range(3):
        p = (a[k] + t0 * d[k] - lower[k]) / voxel[k]
        if d[k] < 0.0:
            i = np.int64(np.ceil(p)) - 1
            step[k] = -1
        else:
            i = np.int64(np.floor(p))
            step[k] = 1
        if i < 0:
            i = 0
        if i > dims[k] - 1:
            i = dims[k] - 1
        idx[k] = i

    tnext = np.empty(3)
    for k in range(3):
        tnext[k] = _plane_t(a, d, lower, voxel, idx, step, k)

    n = 0
    t = t0
    ny = dims[1]
    nz = dims[2]
    while t < t1:
        tm = min(tnext[0], min(tnext[1], tnext[2]))
        te = tm if tm < t1 else t1
        seg = (te - t) * length
        if seg > 0.0:
            out_idx[n] = (idx[0] * ny + idx[1]) * nz + idx[2]
            out_len[n] = seg
            n += 1
        if tm >= t1:
            break
        t = tm
        for k in range(3):
            if tnext[k] == tm:
                idx[k] += step[k]
                if idx[k] < 0 or idx[k] >= dims[k]:
                    return n
                tnext[k] = _plane_t(a, d, lower, voxel, idx, step, k)
    return n


@nb.njit(cache=True, inline="always")
def _plane_t(a, d, lower, voxel, idx, step, k):
    if d[k] == 0.0:
        return np.inf
    if step[k] > 0:
        plane = lower[k] + (idx[k] + 1) * voxel[k]
    else:
        plane = lower[k] + idx[k] * voxel[k]
    return (plane - a[k]) / d[k]


def max_path_entries(dims) -> int:
    return int(sum(dims)) + 3


@nb.njit(cache=True, parallel=True)
def _line_integrals(A, B, image, lower, voxel, dims, cap):
    n = A.shape[0]
    out = np.zeros(n)
    for i in nb.prange(n):
        idx = np.empty(cap, dtype=np.int64)
        lens = np.empty(cap)
        m = trace_ray(A[i], B[i], lower, voxel, dims, idx, lens)
        s = 0.0
        for j in range(m):
            s += image[idx[j]] * lens[j]
        out[i] = s
    return out


@nb.njit(cache=True, parallel=True)
def _count_entries(A, B, lower, voxel, dims, cap):
    n = A.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    for i in nb.prange(n):
        idx = np.empty(cap, dtype=np.int64)
        lens = np.empty(cap)
        counts[i] = trace_ray(A[i], B[i], lower, voxel, dims, idx, lens)
    return counts


@nb.njit(cache=True, parallel=True)
def _fill_entries(A, B, lower, voxel, dims, cap, indptr, indices, data):
    n = A.shape[0]
    for i in nb.prange(n):
        idx = np.empty(cap, dtype=np.int64)
        lens = np.empty(cap)
        m = trace_ray(A[i], B[i], lower, voxel, dims, idx, lens)
        start = indptr[i]
        # fill in ascending voxel order: canonical CSR layout
        order = np.argsort(idx[:m])
        for j in range(m):
            indices[start + j] = idx[order[j]]
            data[start + j] = lens[order[j]]


@nb.njit(cache=True, parallel=True)
def _backproject_chunks(A, B, weights, lower, voxel, dims, cap, n_chunks):
    n = A.shape[0]
    nvox = dims[0] * dims[1] * dims[2]
    partial = np.zeros((n_chunks, nvox))
    for c in nb.prange(n_chunks):
        lo = (n * c) // n_chunks
        hi = (n * (c + 1)) // n_chunks
        idx = np.empty(cap, dtype=np.int64)
        lens = np.empty(cap)
        for i in range(lo, hi):
            w = weights[i]
            if w == 0.0:
                continue
            m = trace_ray(A[i], B[i], lower, voxel, dims, idx, lens)
            for j in range(m):
                partial[c, idx[j]] += w * lens[j]
    out = np.zeros(nvox)
    for c in range(n_chunks):
        out += partial[c]
    return out


def _grid_args(lower, voxel, dims):
    return (np.ascontiguousarray(lower, dtype=np.float64),
            np.ascontiguousarray(voxel, dtype=np.float64),
            np.ascontiguousarray(dims, dtype=np.int64))


def _endpoints(A, B):
    return (np.ascontiguousarray(np.atleast_2d(A), dtype=np.float64),
            np.ascontiguousarray(np.atleast_2d(B), dtype=np.float64))


def ray_path(a, b, lower, voxel, dims) -> tuple[np.ndarray, np.ndarray]:
    lower, voxel, dims = _grid_args(lower, voxel, dims)
    cap = max_path_entries(dims)
    idx = np.empty(cap, dtype=np.int64)
    lens = np.empty(cap)
    m = trace_ray(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64),
                  lower, voxel, dims, idx, lens)
    return idx[:m].copy(), lens[:m].copy()


def line_integrals(A, B, image_flat, lower, voxel, dims) -> np.ndarray:
    A, B = _endpoints(A, B)
    lower, voxel, dims = _grid_args(lower, voxel, dims)
    image = np.ascontiguousarray(image_flat, dtype=np.float64).ravel()
    return _line_integrals(A, B, image, lower, voxel, dims, max_path_entries(dims))


def system_matrix(A, B, lower, voxel, dims) -> sparse.csr_matrix:
    """CSR matrix of intersection lengths, one row per segment."""
    A, B = _endpoints(A, B)
    lower, voxel, dims = _grid_args(lower, voxel, dims)
    cap = max_path_entries(dims)
    counts = _count_entries(A, B, lower, voxel, dims, cap)
    indptr = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    nnz = int(indptr[-1])
    indices = np.empty(nnz, dtype=np.int64)
    data = np.empty(nnz, dtype=np.float64)
    _fill_entries(A, B, lower, voxel, dims, cap, indptr, indices, data)
    nvox = int(np.prod(dims))
    index_dtype = np.int32 if nnz < 2**31 - 1 else np.int64
    return sparse.csr_matrix((data, indices.astype(index_dtype), indptr.astype(index_dtype)),
                             shape=(A.shape[0], nvox))


def backproject(A, B, weights, lower, voxel, dims) -> np.ndarray:
    """Weighted sum of intersection lengths over segments (flat image)."""
    A, B = _endpoints(A, B)
    lower, voxel, dims = _grid_args(lower, voxel, dims)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    return _backproject_chunks(A, B, w, lower, voxel, dims, max_path_entries(dims), N_CHUNKS)
