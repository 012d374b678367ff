"""Pinhole camera geometry and the point-cloud primitives shared by the model.

Conventions: camera frame is x right, y down, z forward; poses map camera to
world (``p_world = R @ p_cam + t``); pixel ``(u, v)`` is column ``u``, row ``v``
and pixel centres sit on integer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractViolation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ContractViolation(f"image size must be >= 1, got {self.width}x{self.height}")

    def scaled(self, stride: int) -> "CameraIntrinsics":
        """Intrinsics of the ``stride``-subsampled grid whose pixel (x, y) is full-res pixel (x*stride, y*stride)."""
        return CameraIntrinsics(
            self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride,
            self.width // stride, self.height // stride,
        )

    def as_tuple(self):
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3) or not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ContractViolation("pose rotation must be a finite 3x3 matrix and translation a finite 3-vector")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ContractViolation("pose rotation is not orthonormal with det +1 (tolerance 1e-6)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ContractViolation(f"pose matrix must be 4x4, got {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise ContractViolation("pose matrix bottom row must be 0 0 0 1")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def check_depth(depth) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ContractViolation(f"depth map must be 2-D, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or (d < 0).any():
        raise ContractViolation("depth map entries must be finite and >= 0")
    return d


@dataclass
class FeaturizedPointCloud:
    positions: np.ndarray  # N x 3
    features: np.ndarray | None  # N x F
    provenance: np.ndarray  # N x 3 (view, row, col)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.provenance = np.asarray(self.provenance, dtype=np.int64).reshape(-1, 3)
        n = len(self.positions)
        if len(self.provenance) != n:
            raise ContractViolation("positions and provenance lengths differ")
        if self.features is not None and len(self.features) != n:
            raise ContractViolation("positions and features lengths differ")

    def __len__(self):
        return len(self.positions)

    @staticmethod
    def concatenate(clouds):
        clouds = list(clouds)
        feats = None
        if clouds and all(c.features is not None for c in clouds):
            feats = np.concatenate([c.features for c in clouds])
        return FeaturizedPointCloud(
            np.concatenate([c.positions for c in clouds]) if clouds else np.zeros((0, 3)),
            feats,
            np.concatenate([c.provenance for c in clouds]) if clouds else np.zeros((0, 3), np.int64),
        )


@dataclass
class VoxelGrid:
    voxel_size: float
    origin: np.ndarray
    pooled_positions: np.ndarray  # M x 3
    pooled_features: np.ndarray | None  # M x F
    point_to_voxel: np.ndarray  # N
    voxel_to_points: list = field(repr=False)
    counts: np.ndarray = field(repr=False, default=None)

    @property
    def num_voxels(self):
        return len(self.pooled_positions)


@dataclass
class KnnGraph:
    k: int
    neighbor_index: np.ndarray  # M x k
    relative_offset: np.ndarray  # M x k x 3, p_i - p_j


# ---------------------------------------------------------------------------
# camera model


def pixel_rays(intrinsics: CameraIntrinsics):
    """Camera-frame ray directions with unit z for every pixel, H x W x 3."""
    v, u = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width].astype(np.float64)
    return np.stack(
        [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)], axis=-1
    )


def unproject_depth(intrinsics: CameraIntrinsics, pose: CameraPose, depth, view: int = 0) -> FeaturizedPointCloud:
    d = check_depth(depth)
    if d.shape != (intrinsics.height, intrinsics.width):
        raise ContractViolation(
            f"depth is {d.shape[0]}x{d.shape[1]} but intrinsics expect {intrinsics.height}x{intrinsics.width}"
        )
    rows, cols = np.nonzero(d > 0)
    z = d[rows, cols]
    cam = np.stack([(cols - intrinsics.cx) * z / intrinsics.fx, (rows - intrinsics.cy) * z / intrinsics.fy, z], axis=1)
    world = cam @ pose.rotation.T + pose.translation
    prov = np.stack([np.full_like(rows, view), rows, cols], axis=1)
    return FeaturizedPointCloud(world, None, prov)


def project_points(intrinsics: CameraIntrinsics, pose: CameraPose, points):
    """World points to continuous ``(u, v, depth)``; second value flags z <= 1e-9."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = (p - pose.translation) @ pose.rotation
    z = cam[:, 2]
    behind = z <= 1e-9
    safe = np.where(behind, 1.0, z)
    u = intrinsics.fx * cam[:, 0] / safe + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / safe + intrinsics.cy
    return np.stack([u, v, z], axis=1), behind


# ---------------------------------------------------------------------------
# depth maps


def fill_depth_holes(depth) -> np.ndarray:
    """Fill zero pixels from the nearest valid pixel by repeated 4-neighbour dilation."""
    d = check_depth(depth)
    return _kernels.fill_holes(d)


def nearest_resize_depth(depth, stride: int) -> np.ndarray:
    d = check_depth(depth)
    if stride < 1 or d.shape[0] % stride or d.shape[1] % stride:
        raise ContractViolation(f"stride {stride} does not divide depth size {d.shape}")
    return d[::stride, ::stride].copy()


# ---------------------------------------------------------------------------
# voxels


def voxel_partition(positions, voxel_size: float):
    """Return (origin, point_to_voxel, counts) with voxels numbered by first appearance."""
    if not voxel_size > 0:
        raise ContractViolation(f"voxel_size must be positive, got {voxel_size}")
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        return np.zeros(3), np.zeros(0, np.int64), np.zeros(0, np.int64)
    origin = p.min(axis=0)
    cells = np.floor((p - origin) / voxel_size).astype(np.int64)
    _, first, inverse, counts = np.unique(cells, axis=0, return_index=True, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    # renumber so voxel ids follow the order of their first member point
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return origin, rank[inverse], counts[np.argsort(rank)]


def voxelize(cloud: FeaturizedPointCloud, voxel_size: float) -> VoxelGrid:
    origin, p2v, counts = voxel_partition(cloud.positions, voxel_size)
    m = len(counts)
    pooled_pos = np.zeros((m, 3))
    np.add.at(pooled_pos, p2v, cloud.positions)
    pooled_pos /= np.maximum(counts, 1)[:, None]
    pooled_feat = None
    if cloud.features is not None:
        f = np.asarray(cloud.features, dtype=np.float64)
        pooled_feat = np.zeros((m,) + f.shape[1:])
        np.add.at(pooled_feat, p2v, f)
        pooled_feat /= np.maximum(counts, 1).reshape((-1,) + (1,) * (f.ndim - 1))
    order = np.argsort(p2v, kind="stable")
    members = np.split(order, np.cumsum(counts)[:-1]) if m else []
    return VoxelGrid(float(voxel_size), origin, pooled_pos, pooled_feat, p2v, members, counts)


def devoxelize(grid: VoxelGrid, voxel_features):
    vf = np.asarray(voxel_features)
    if len(vf) != grid.num_voxels:
        raise ContractViolation(f"got {len(vf)} voxel features for a grid of {grid.num_voxels} voxels")
    return vf[grid.point_to_voxel]


# ---------------------------------------------------------------------------
# k nearest neighbours


def knn_bruteforce(positions, k: int) -> np.ndarray:
    """O(M^2) reference neighbour table (self first, ties by lower index)."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    m = len(p)
    dx = p[:, None, 0] - p[None, :, 0]
    dy = p[:, None, 1] - p[None, :, 1]
    dz = p[:, None, 2] - p[None, :, 2]
    d2 = dx * dx + dy * dy + dz * dz
    np.fill_diagonal(d2, -1.0)
    order = np.lexsort((np.broadcast_to(np.arange(m), (m, m)), d2), axis=1)
    take = min(k, m)
    out = np.empty((m, k), dtype=np.int64)
    out[:, :take] = order[:, :take]
    out[:, take:] = out[:, take - 1 : take]
    return out


BRUTE_FORCE_LIMIT = 384


def knn(positions, k: int, method: str = "auto") -> KnnGraph:
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(p) < 1 or k < 1:
        raise ContractViolation(f"knn needs M >= 1 and k >= 1, got M={len(p)}, k={k}")
    if method == "auto":
        method = "brute" if len(p) <= BRUTE_FORCE_LIMIT else "hash"
    if method == "brute":
        idx = knn_bruteforce(p, k)
    elif method == "hash":
        idx = _kernels.knn_hash(p, k)
    else:
        raise ContractViolation(f"unknown knn method {method!r}")
    return KnnGraph(k, idx, p[:, None, :] - p[idx])


# ---------------------------------------------------------------------------
# interpolation


def bilinear_sample(fmap, u: float, v: float):
    """Sample an H x W x F map at continuous (col u, row v), clamping to the border."""
    m = np.asarray(fmap)
    h, w = m.shape[:2]
    u = min(max(float(u), 0.0), w - 1.0)
    v = min(max(float(v), 0.0), h - 1.0)
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    u1, v1 = min(u0 + 1, w - 1), min(v0 + 1, h - 1)
    fu, fv = u - u0, v - v0
    return (
        (1 - fv) * ((1 - fu) * m[v0, u0] + fu * m[v0, u1])
        + fv * ((1 - fu) * m[v1, u0] + fu * m[v1, u1])
    )


@dataclass
class TrilinearPlan:
    """Index/weight tables for blending per-cell mean features at query points.

    ``corner_cell`` holds -1 for empty lattice corners; queries with no occupied
    corner use ``fallback`` (nearest source point) instead.
    """

    source_cell: np.ndarray  # N, cell id of each source point
    cell_counts: np.ndarray  # C
    corner_cell: np.ndarray  # Q x 8
    corner_weight: np.ndarray  # Q x 8, renormalised over occupied corners
    fallback: np.ndarray  # Q, nearest source index or -1

    @property
    def num_cells(self):
        return len(self.cell_counts)


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def nearest_source(source_positions, query_positions, chunk: int = 4096):
    src = np.asarray(source_positions, dtype=np.float64)
    q = np.asarray(query_positions, dtype=np.float64)
    out = np.empty(len(q), dtype=np.int64)
    sq = (src * src).sum(1)
    for s in range(0, len(q), chunk):
        blk = q[s : s + chunk]
        d2 = sq[None, :] - 2.0 * blk @ src.T
        out[s : s + chunk] = np.argmin(d2, axis=1)
    return out


def trilinear_plan(source_positions, voxel_size: float, query_positions) -> TrilinearPlan:
    src = np.asarray(source_positions, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(query_positions, dtype=np.float64).reshape(-1, 3)
    if len(src) < 1:
        raise ContractViolation("trilinear interpolation needs at least one source point")
    cells = np.floor(src / voxel_size).astype(np.int64)
    uniq, source_cell, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    source_cell = source_cell.reshape(-1)
    # cell centres sit at (c + 0.5) * voxel_size
    g = q / voxel_size - 0.5
    base = np.floor(g).astype(np.int64)
    frac = g - base
    corners = base[:, None, :] + _CORNERS[None]  # Q x 8 x 3
    w = np.prod(np.where(_CORNERS[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)
    corner_cell = _lookup_cells(uniq, corners.reshape(-1, 3)).reshape(len(q), 8)
    w = np.where(corner_cell >= 0, w, 0.0)
    total = w.sum(1)
    empty = total <= 0
    w = np.where(empty[:, None], 0.0, w / np.where(empty, 1.0, total)[:, None])
    fallback = np.full(len(q), -1, dtype=np.int64)
    if empty.any():
        fallback[empty] = nearest_source(src, q[empty])
    return TrilinearPlan(source_cell, counts, corner_cell, w, fallback)


def _lookup_cells(sorted_cells, queries):
    """Row index of each query in the lexicographically sorted unique cell table, or -1."""
    if len(queries) == 0:
        return np.zeros(0, dtype=np.int64)
    lo = np.minimum(sorted_cells.min(0), queries.min(0))
    span = np.maximum(sorted_cells.max(0), queries.max(0)) - lo + 1

    def enc(c):
        c = c - lo
        return (c[:, 0] * span[1] + c[:, 1]) * span[2] + c[:, 2]

    keys = enc(sorted_cells)  # already sorted: np.unique sorts rows lexicographically
    qk = enc(queries)
    pos = np.searchsorted(keys, qk)
    pos = np.minimum(pos, len(keys) - 1)
    return np.where(keys[pos] == qk, pos, -1)


def apply_trilinear_plan(plan: TrilinearPlan, source_features):
    f = np.asarray(source_features, dtype=np.float64)
    cell_feat = np.zeros((plan.num_cells,) + f.shape[1:])
    np.add.at(cell_feat, plan.source_cell, f)
    cell_feat /= plan.cell_counts.reshape((-1,) + (1,) * (f.ndim - 1))
    safe = np.maximum(plan.corner_cell, 0)
    out = np.einsum("qc,qc...->q...", plan.corner_weight, cell_feat[safe])
    fb = plan.fallback >= 0
    out[fb] = f[plan.fallback[fb]]
    return out


def trilinear_interpolate(source_positions, source_features, voxel_size: float, query_positions):
    plan = trilinear_plan(source_positions, voxel_size, query_positions)
    return apply_trilinear_plan(plan, source_features)
