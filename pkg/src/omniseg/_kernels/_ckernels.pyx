# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``; same outputs bit for bit."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline bint _less(double da, long ja, double db, long jb) noexcept nogil:
    return da < db or (da == db and ja < jb)


def knn_hash(positions, long k):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p = np.ascontiguousarray(positions, dtype=np.float64)
    cdef long m = p.shape[0]
    out_arr = np.empty((m, k), dtype=np.int64)
    if m == 0:
        return out_arr
    cdef long[:, :] out = out_arr
    cdef long need = min(k - 1, m - 1)

    from ._pykernels import hash_cell_size
    cdef double h = hash_cell_size(p, k)
    cdef double lo0 = p[:, 0].min(), lo1 = p[:, 1].min(), lo2 = p[:, 2].min()

    cdef long[:, :] cells = np.empty((m, 3), dtype=np.int64)
    cdef long i, j, a, nx = 0, ny = 0, nz = 0
    for i in range(m):
        cells[i, 0] = <long>floor((p[i, 0] - lo0) / h)
        cells[i, 1] = <long>floor((p[i, 1] - lo1) / h)
        cells[i, 2] = <long>floor((p[i, 2] - lo2) / h)
        if cells[i, 0] + 1 > nx: nx = cells[i, 0] + 1
        if cells[i, 1] + 1 > ny: ny = cells[i, 1] + 1
        if cells[i, 2] + 1 > nz: nz = cells[i, 2] + 1
    cdef long ncell = nx * ny * nz
    cdef long max_r = max(nx, max(ny, nz))

    # counting sort by linear cell id; stable so buckets keep ascending indices
    cdef long[:] start = np.zeros(ncell + 1, dtype=np.int64)
    cdef long[:] order = np.empty(m, dtype=np.int64)
    cdef long[:] fill = np.zeros(ncell, dtype=np.int64)
    cdef long c
    for i in range(m):
        c = (cells[i, 0] * ny + cells[i, 1]) * nz + cells[i, 2]
        start[c + 1] += 1
    for c in range(ncell):
        start[c + 1] += start[c]
    for i in range(m):
        c = (cells[i, 0] * ny + cells[i, 1]) * nz + cells[i, 2]
        order[start[c] + fill[c]] = i
        fill[c] += 1

    cdef double[:] best_d = np.empty(max(need, 1), dtype=np.float64)
    cdef long[:] best_j = np.empty(max(need, 1), dtype=np.int64)
    cdef long nbest, r, cx, cy, cz, ci0, ci1, ci2, s, pos, t
    cdef double xi, yi, zi, dx, dy, dz, d2, bound
    with nogil:
        for i in range(m):
            nbest = 0
            ci0 = cells[i, 0]; ci1 = cells[i, 1]; ci2 = cells[i, 2]
            xi = p[i, 0]; yi = p[i, 1]; zi = p[i, 2]
            r = 0
            while need > 0:
                for cx in range(ci0 - r, ci0 + r + 1):
                    if cx < 0 or cx >= nx:
                        continue
                    for cy in range(ci1 - r, ci1 + r + 1):
                        if cy < 0 or cy >= ny:
                            continue
                        for cz in range(ci2 - r, ci2 + r + 1):
                            if cz < 0 or cz >= nz:
                                continue
                            if max(abs(cx - ci0), max(abs(cy - ci1), abs(cz - ci2))) != r:
                                continue
                            c = (cx * ny + cy) * nz + cz
                            for s in range(start[c], start[c + 1]):
                                j = order[s]
                                if j == i:
                                    continue
                                dx = xi - p[j, 0]
                                dy = yi - p[j, 1]
                                dz = zi - p[j, 2]
                                d2 = dx * dx + dy * dy + dz * dz
                                if nbest < need:
                                    pos = nbest
                                    nbest += 1
                                elif _less(d2, j, best_d[nbest - 1], best_j[nbest - 1]):
                                    pos = nbest - 1
                                else:
                                    continue
                                # insertion into the sorted prefix
                                while pos > 0 and _less(d2, j, best_d[pos - 1], best_j[pos - 1]):
                                    best_d[pos] = best_d[pos - 1]
                                    best_j[pos] = best_j[pos - 1]
                                    pos -= 1
                                best_d[pos] = d2
                                best_j[pos] = j
                if r >= max_r:
                    break
                bound = (r - 0.5) * h
                if nbest == need and r >= 1 and best_d[nbest - 1] < bound * bound:
                    break
                r += 1
            out[i, 0] = i
            for t in range(nbest):
                out[i, t + 1] = best_j[t]
            for t in range(nbest + 1, k):
                out[i, t] = out[i, t - 1]
    return out_arr


def fill_holes(depth):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] src = np.array(depth, dtype=np.float64, copy=True)
    cdef long h = src.shape[0], w = src.shape[1]
    cdef double[:, :] d = src
    cdef double[:, :] nxt = src.copy()
    cdef unsigned char[:, :] valid = (src > 0).view(np.uint8)
    cdef unsigned char[:, :] nvalid = (src > 0).view(np.uint8).copy()
    cdef long y, x, remaining = 0, any_valid = 0
    for y in range(h):
        for x in range(w):
            if valid[y, x]:
                any_valid = 1
            else:
                remaining += 1
    if not any_valid:
        return src
    with nogil:
        while remaining > 0:
            for y in range(h):
                for x in range(w):
                    if valid[y, x]:
                        continue
                    if y > 0 and valid[y - 1, x]:
                        nxt[y, x] = d[y - 1, x]
                    elif x > 0 and valid[y, x - 1]:
                        nxt[y, x] = d[y, x - 1]
                    elif x < w - 1 and valid[y, x + 1]:
                        nxt[y, x] = d[y, x + 1]
                    elif y < h - 1 and valid[y + 1, x]:
                        nxt[y, x] = d[y + 1, x]
                    else:
                        continue
                    nvalid[y, x] = 1
                    remaining -= 1
            for y in range(h):
                for x in range(w):
                    d[y, x] = nxt[y, x]
                    valid[y, x] = nvalid[y, x]
    return src
