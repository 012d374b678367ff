"""Cross-view 3D fusion: lift per-view maps to voxel tokens, run k-NN attention
with relative positional embeddings, and scatter the result back to the views.

The index bookkeeping (which pixel lands in which voxel, who neighbours whom)
depends only on depth and cameras, so it lives in a :class:`LiftPlan` that is
built once per scene/stride and reused by every forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolation, EmptyTokensError
from .geometry import (
    FeaturizedPointCloud,
    KnnGraph,
    VoxelGrid,
    fill_depth_holes,
    knn,
    nearest_resize_depth,
    unproject_depth,
    voxelize,
)


def voxel_size_for_stride(stride: int, v4: float = 0.04) -> float:
    return v4 * stride / 4


@dataclass
class LiftPlan:
    stride: int
    voxel_size: float
    shape: tuple  # (V, h, w)
    cloud: FeaturizedPointCloud  # one point per pixel with depth, provenance (view, row, col)
    grid: VoxelGrid
    graph: KnnGraph
    _tensors: dict = field(default_factory=dict, repr=False)

    @property
    def num_tokens(self):
        return self.grid.num_voxels

    def pixel_positions(self):
        """V x h x w x 3 world positions, zero where depth is missing."""
        v, h, w = self.shape
        out = np.zeros((v, h, w, 3))
        p = self.cloud.provenance
        out[p[:, 0], p[:, 1], p[:, 2]] = self.cloud.positions
        return out

    def pixel_valid(self):
        v, h, w = self.shape
        out = np.zeros((v, h, w), bool)
        p = self.cloud.provenance
        out[p[:, 0], p[:, 1], p[:, 2]] = True
        return out

    def tensors(self, dtype):
        """Torch views of the index tables (cached per dtype)."""
        key = str(dtype)
        if key not in self._tensors:
            v, h, w = self.shape
            prov = self.cloud.provenance
            self._tensors[key] = dict(
                flat=torch.as_tensor((prov[:, 0] * h + prov[:, 1]) * w + prov[:, 2]),
                p2v=torch.as_tensor(self.grid.point_to_voxel),
                counts=torch.as_tensor(self.grid.counts, dtype=dtype),
                nbr=torch.as_tensor(self.graph.neighbor_index),
                rel=torch.as_tensor(self.graph.relative_offset / self.voxel_size, dtype=dtype),
            )
        return self._tensors[key]


def build_lift_plan(depths, intrinsics, poses, stride: int, voxel_size: float, k: int, transform=None) -> LiftPlan:
    """Geometry half of lifting: nearest-resized depth, unprojection, voxels, k-NN.

    ``depths`` are full-resolution, already hole-filled maps; ``transform`` (an
    augmentation with ``apply(points, jitter_seed)``) moves the lifted points.
    """
    clouds = []
    h = w = None
    for view, (d, intr, pose) in enumerate(zip(depths, intrinsics, poses)):
        small = nearest_resize_depth(d, stride)
        h, w = small.shape
        clouds.append(unproject_depth(intr.scaled(stride), pose, small, view=view))
    cloud = FeaturizedPointCloud.concatenate(clouds)
    if len(cloud) == 0:
        raise EmptyTokensError(f"no valid depth in any of {len(depths)} views at stride {stride}")
    if transform is not None:
        cloud = FeaturizedPointCloud(transform.apply(cloud.positions, stride), None, cloud.provenance)
    grid = voxelize(cloud, voxel_size)
    graph = knn(grid.pooled_positions, k)
    return LiftPlan(stride, voxel_size, (len(depths), h, w), cloud, grid, graph)


@dataclass
class Token3DSet:
    features: torch.Tensor  # M x D voxel tokens
    plan: LiftPlan

    @property
    def positions(self):
        return self.plan.grid.pooled_positions

    @property
    def knn(self):
        return self.plan.graph


def lift_with_plan(maps: torch.Tensor, plan: LiftPlan) -> Token3DSet:
    """``maps`` is V x D x h x w; returns voxel mean-pooled tokens."""
    v, d, h, w = maps.shape
    if (v, h, w) != plan.shape:
        raise ContractViolation(f"maps {tuple(maps.shape)} do not match the plan's {plan.shape}")
    t = plan.tensors(maps.dtype)
    pts = maps.permute(0, 2, 3, 1).reshape(v * h * w, d)[t["flat"]]
    pooled = torch.zeros(plan.num_tokens, d, dtype=maps.dtype).index_add_(0, t["p2v"], pts)
    return Token3DSet(pooled / t["counts"][:, None], plan)


def lift_to_3d(maps, depths, intrinsics, poses, stride, voxel_size, k=8, transform=None) -> Token3DSet:
    filled = [fill_depth_holes(d) for d in depths]
    return lift_with_plan(maps, build_lift_plan(filled, intrinsics, poses, stride, voxel_size, k, transform))


def project_to_2d(tokens: Token3DSet, features: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
    """Copy each voxel's feature to its member pixels; pixels without depth keep ``maps``."""
    plan = tokens.plan
    if features.shape[0] != plan.num_tokens:
        raise ContractViolation(f"{features.shape[0]} features for {plan.num_tokens} tokens")
    v, d, h, w = maps.shape
    t = plan.tensors(maps.dtype)
    flat = maps.permute(0, 2, 3, 1).reshape(v * h * w, d)
    flat = flat.index_copy(0, t["flat"], features[t["p2v"]])
    return flat.reshape(v, h, w, d).permute(0, 3, 1, 2)


class RelPosAttentionLayer(nn.Module):
    """Pre-norm k-NN attention; positions enter only through MLP(p_i - p_j)."""

    def __init__(self, dim, heads=4):
        super().__init__()
        if dim % heads:
            raise ContractViolation(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.pos_mlp = nn.Sequential(nn.Linear(3, dim // 2), nn.ReLU(), nn.Linear(dim // 2, dim))
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        for lin in (self.out, self.ffn[2]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def attention_weights(self, x, nbr, rel):
        h = self.norm1(x)
        m, k = nbr.shape
        d = x.shape[1] // self.heads
        query_pos = self.pos_mlp(torch.zeros(1, 3, dtype=x.dtype))
        key_pos = self.pos_mlp(rel)  # M x k x D
        q = self.q(h + query_pos).view(m, self.heads, d)
        kk = self.k(h[nbr] + key_pos).view(m, k, self.heads, d)
        logits = torch.einsum("mhd,mkhd->mhk", q, kk) / d**0.5
        return h, F.softmax(logits, dim=-1)

    def forward(self, x, nbr, rel):
        m, k = nbr.shape
        h, attn = self.attention_weights(x, nbr, rel)
        vv = self.v(h[nbr]).view(m, k, self.heads, -1)
        y = torch.einsum("mhk,mkhd->mhd", attn, vv).reshape(m, -1)
        x = x + self.out(y)
        return x + self.ffn(self.norm2(x))


class FusionStage(nn.Module):
    """lift -> L relative-position attention layers -> project back (residually)."""

    def __init__(self, dim, layers=2, heads=4):
        super().__init__()
        self.layers = nn.ModuleList(RelPosAttentionLayer(dim, heads) for _ in range(layers))

    def attend(self, tokens: Token3DSet) -> torch.Tensor:
        t = tokens.plan.tensors(tokens.features.dtype)
        x = tokens.features
        for layer in self.layers:
            x = layer(x, t["nbr"], t["rel"])
        return x

    def forward(self, maps: torch.Tensor, plan: LiftPlan) -> torch.Tensor:
        # Pixels receive their voxel's *change*, so a zero branch is an exact identity
        # even where several pixels were pooled into one voxel.
        tokens = lift_with_plan(maps, plan)
        delta = self.attend(tokens) - tokens.features
        return maps + project_to_2d(tokens, delta, torch.zeros_like(maps))


def relpos_attention_forward(stage: FusionStage, tokens: Token3DSet) -> torch.Tensor:
    return stage.attend(tokens)
