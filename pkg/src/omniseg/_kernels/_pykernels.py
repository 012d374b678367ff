"""Pure-Python/numpy versions of the hot geometry kernels.

These define the reference semantics; ``_ckernels.pyx`` must agree with them
bit for bit.
"""
import numpy as np


def hash_cell_size(positions, k):
    m = positions.shape[0]
    extent = float((positions.max(axis=0) - positions.min(axis=0)).max()) if m else 0.0
    if extent <= 0.0:
        return 1.0
    cells_per_axis = max(1.0, (m / max(k, 1)) ** (1.0 / 3.0))
    return extent / cells_per_axis


def knn_hash(positions, k):
    """k-NN via a uniform spatial hash. Row i starts with i itself, the rest are
    sorted by (squared distance, index); short rows repeat their last entry."""
    p = np.ascontiguousarray(positions, dtype=np.float64)
    m = p.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    if m == 0:
        return out
    need = min(k - 1, m - 1)
    h = hash_cell_size(p, k)
    lo = p.min(axis=0)
    cells = np.floor((p - lo) / h).astype(np.int64)
    dims = cells.max(axis=0) + 1
    buckets = {}
    for j in range(m):
        buckets.setdefault(tuple(cells[j]), []).append(j)
    max_r = int(dims.max())
    pl = p.tolist()
    for i in range(m):
        best = []  # sorted list of (d2, j), at most `need` long
        ci = cells[i]
        r = 0
        while need > 0:
            for cx in range(ci[0] - r, ci[0] + r + 1):
                for cy in range(ci[1] - r, ci[1] + r + 1):
                    for cz in range(ci[2] - r, ci[2] + r + 1):
                        if max(abs(cx - ci[0]), abs(cy - ci[1]), abs(cz - ci[2])) != r:
                            continue
                        bucket = buckets.get((cx, cy, cz))
                        if bucket is None:
                            continue
                        xi, yi, zi = pl[i]
                        for j in bucket:
                            if j == i:
                                continue
                            xj, yj, zj = pl[j]
                            dx = xi - xj
                            dy = yi - yj
                            dz = zi - zj
                            cand = (dx * dx + dy * dy + dz * dz, j)
                            if len(best) < need:
                                _insort(best, cand)
                            elif cand < best[-1]:
                                best.pop()
                                _insort(best, cand)
            if r >= max_r:
                break
            if len(best) == need and r >= 1 and best[-1][0] < ((r - 0.5) * h) ** 2:
                break
            r += 1
        row = [i] + [j for _, j in best]
        while len(row) < k:
            row.append(row[-1])
        out[i] = row
    return out


def _insort(lst, item):
    lo, hi = 0, len(lst)
    while lo < hi:
        mid = (lo + hi) // 2
        if item < lst[mid]:
            hi = mid
        else:
            lo = mid + 1
    lst.insert(lo, item)


def fill_holes(depth):
    """Synchronous 4-neighbour dilation of valid (>0) depth into zero pixels.

    Each sweep fills every hole that touches a pixel valid before the sweep,
    taking the neighbour first in (row, col) order: up, left, right, down.
    """
    d = np.array(depth, dtype=np.float64, copy=True)
    valid = d > 0
    if not valid.any():
        return d
    h, w = d.shape
    while not valid.all():
        new = d.copy()
        filled = np.zeros_like(valid)
        # (src rows, src cols) -> (dst rows, dst cols) for each neighbour direction
        shifts = (
            ((slice(0, h - 1), slice(None)), (slice(1, h), slice(None))),  # up
            ((slice(None), slice(0, w - 1)), (slice(None), slice(1, w))),  # left
            ((slice(None), slice(1, w)), (slice(None), slice(0, w - 1))),  # right
            ((slice(1, h), slice(None)), (slice(0, h - 1), slice(None))),  # down
        )
        for src, dst in shifts:
            take = ~valid[dst] & ~filled[dst] & valid[src]
            new[dst][take] = d[src][take]  # basic slices are views
            filled[dst] |= take
        d = new
        valid = valid | filled
    return d

