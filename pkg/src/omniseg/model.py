"""The full segmenter: backbone with interleaved 3D fusion, pixel decoder, query decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import STRIDES, Backbone
from .decoder import (
    DeformableLayer,
    QueryDecoder,
    XYZEncoding,
    apply_trilinear_torch,
    flatten_maps,
    fourier_encoding_2d,
    transfer_to_mesh,
    upsample_2x,
)
from .errors import ConfigError
from .fusion3d import FusionStage, build_lift_plan, voxel_size_for_stride
from .geometry import fill_depth_holes, trilinear_plan

FUSION_MODES = ("interleaved", "late", "none")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16  # C; backbone widths C, 2C, 4C, 8C
    dim: int = 64  # decoder width
    heads: int = 4
    knn_k: int = 8
    voxel_v4: float = 0.04
    fusion_layers: int = 2
    rounds: int = 3
    queries: int = 20
    deform_points: int = 4
    upsample_voxel: float = 0.16
    fusion: str = "interleaved"
    class_names: tuple = ("room shell", "box", "ball", "tall cabinet", "beach ball")
    open_vocab: bool = False

    def validate(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        for name in ("width", "dim", "heads", "knn_k", "queries", "deform_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("fusion_layers", "rounds"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.width % self.heads or self.dim % self.heads or self.dim % 4:
            raise ConfigError("width and dim must be divisible by heads, dim by 4")
        if self.voxel_v4 <= 0 or self.upsample_voxel <= 0:
            raise ConfigError("voxel sizes must be positive")
        if len(self.class_names) < 1:
            raise ConfigError("need at least one class")
        return self

    @property
    def num_classes(self):
        return len(self.class_names)

    def to_dict(self):
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        return d


class ViewBatch:
    """RGB views plus optional depth and cameras; caches geometry plans.

    Without depth the batch is a pure 2D input and every 3D layer is skipped.
    """

    def __init__(self, rgb, depths=None, intrinsics=None, poses=None, transform=None):
        self.rgb = torch.as_tensor(np.ascontiguousarray(np.asarray(rgb).transpose(0, 3, 1, 2)))
        self.depths = None if depths is None else [fill_depth_holes(d) for d in depths]
        self.intrinsics = intrinsics
        self.poses = poses
        self.transform = transform
        self._plans = {}

    @classmethod
    def from_frames(cls, frames, with_depth=True, transform=None):
        rgb = np.stack([f.rgb for f in frames])
        if not with_depth:
            return cls(rgb)
        return cls(rgb, [f.depth for f in frames], [f.intrinsics for f in frames], [f.pose for f in frames], transform)

    @property
    def has_depth(self):
        return self.depths is not None

    @property
    def num_views(self):
        return self.rgb.shape[0]

    def to(self, dtype):
        self.rgb = self.rgb.to(dtype)
        return self

    def lift_plan(self, stride, voxel_size, k):
        key = ("lift", stride, voxel_size, k)
        if key not in self._plans:
            self._plans[key] = build_lift_plan(self.depths, self.intrinsics, self.poses, stride, voxel_size, k, self.transform)
        return self._plans[key]

    def upsample_plan(self, voxel_size, v8, v4, k):
        """Trilinear plan from stride-8 pixel points to stride-4 pixel points."""
        key = ("up", voxel_size, v8, v4, k)
        if key not in self._plans:
            src = self.lift_plan(8, v8, k).cloud.positions
            dst = self.lift_plan(4, v4, k).cloud.positions
            self._plans[key] = trilinear_plan(src, voxel_size, dst)
        return self._plans[key]


@dataclass
class Predictions:
    rounds: list  # per refinement round: (class logits N x (K+1), mask logits N x T)
    token_shape: tuple  # (V, h, w) for pixel tokens or (P,) for mesh points
    extras: dict = field(default_factory=dict)

    @property
    def class_logits(self):
        return self.rounds[-1][0]

    @property
    def mask_logits(self):
        return self.rounds[-1][1]


class OmniSegModel(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config.validate()
        c = config
        self.backbone = Backbone(c.width)
        widths = self.backbone.channels  # strides 4, 8, 16, 32
        self.strides = STRIDES
        self.fusion = nn.ModuleList(FusionStage(w, c.fusion_layers, c.heads) for w in widths[1:])
        self.input_proj = nn.ModuleList(nn.Conv2d(w, c.dim, 1) for w in widths[1:])
        self.deform = DeformableLayer(c.dim, 3, c.deform_points)
        self.decoder_fusion = nn.ModuleList(FusionStage(c.dim, c.fusion_layers, c.heads) for _ in range(3))
        self.skip_proj = nn.Conv2d(widths[0], c.dim, 1)
        # blend between 2D bilinear and 3D trilinear upsampling, starts fully 2D
        self.up_gate = nn.Parameter(torch.zeros(c.dim))
        self.xyz_enc = XYZEncoding(c.dim)
        words = [w for n in c.class_names for w in n.split()] if c.open_vocab else None
        self.query_decoder = QueryDecoder(c.dim, c.num_classes, c.queries, c.rounds, c.heads, words)

    def voxel_size(self, stride):
        return voxel_size_for_stride(stride, self.config.voxel_v4)

    def plan(self, batch, stride):
        return batch.lift_plan(stride, self.voxel_size(stride), self.config.knn_k)

    def features(self, batch: ViewBatch, use_3d=None):
        """Backbone + pixel decoder. Returns a dict of per-view maps and token sets."""
        c = self.config
        three_d = batch.has_depth if use_3d is None else use_3d and batch.has_depth
        fuse = three_d and c.fusion != "none"
        rgb = batch.rgb.to(self.up_gate.dtype)
        hook = None
        if fuse and c.fusion == "interleaved":
            def hook(stage, x):
                return self.fusion[stage - 2](x, self.plan(batch, self.strides[stage - 1]))
        pyramid = self.backbone(rgb, hook)
        if fuse and c.fusion == "late":
            pyramid = [pyramid[0]] + [f(m, self.plan(batch, s)) for f, m, s in zip(self.fusion, pyramid[1:], self.strides[1:])]

        strides = self.strides[1:]
        levels = [proj(m) for proj, m in zip(self.input_proj, pyramid[1:])]
        nv = rgb.shape[0]
        pos2d = [fourier_encoding_2d(nv, m.shape[2], m.shape[3], c.dim, rgb.dtype) for m in levels]
        fused = []
        for lv in range(3):
            m = self.deform(levels, lv, strides, pos2d[lv])
            if fuse:
                m = self.decoder_fusion[lv](m, self.plan(batch, strides[lv]))
            fused.append(m)

        up = upsample_2x(fused[0])
        if fuse:
            up = up + self._trilinear_delta(batch, fused[0], up)
        skip = self.skip_proj(pyramid[0])
        mask_maps = up + skip

        token_levels = []
        for lv in (2, 1, 0):  # strides 32, 16, 8
            pos = pos2d[lv]
            if three_d:
                xyz = torch.as_tensor(self.plan(batch, strides[lv]).pixel_positions().reshape(-1, 3), dtype=rgb.dtype)
                pos = pos + self.xyz_enc(xyz)
            token_levels.append((flatten_maps(fused[lv]), pos))
        return dict(pyramid=pyramid, fused=fused, skip=skip, mask_maps=mask_maps, token_levels=token_levels, three_d=three_d)

    def _trilinear_delta(self, batch, f8, up):
        c = self.config
        p8, p4 = self.plan(batch, 8), self.plan(batch, 4)
        tri_plan = batch.upsample_plan(c.upsample_voxel, self.voxel_size(8), self.voxel_size(4), c.knn_k)
        src = flatten_maps(f8)[p8.tensors(f8.dtype)["flat"]]
        tri = apply_trilinear_torch(tri_plan, src)
        idx = p4.tensors(f8.dtype)["flat"]
        flat_up = flatten_maps(up)
        delta = torch.zeros_like(flat_up).index_copy(0, idx, self.up_gate * (tri - flat_up[idx]))
        nv, d, h, w = up.shape
        return delta.view(nv, h, w, d).permute(0, 3, 1, 2)

    def mesh_tokens(self, batch, feats, mesh_points):
        """Mask tokens on arbitrary 3D points (e.g. a mesh-sampled cloud)."""
        c = self.config
        pts = np.asarray(mesh_points, dtype=np.float64).reshape(-1, 3)
        p8, p4 = self.plan(batch, 8), self.plan(batch, 4)
        dtype = feats["skip"].dtype
        f8 = flatten_maps(feats["fused"][0])[p8.tensors(dtype)["flat"]]
        s4 = flatten_maps(feats["skip"])[p4.tensors(dtype)["flat"]]
        plan8 = trilinear_plan(p8.cloud.positions, c.upsample_voxel, pts)
        plan4 = trilinear_plan(p4.cloud.positions, self.voxel_size(4), pts)
        return transfer_to_mesh(plan8, f8, plan4, s4)

    def forward(self, batch: ViewBatch, mesh_points=None, use_3d=None) -> Predictions:
        feats = self.features(batch, use_3d)
        if mesh_points is not None:
            tokens = self.mesh_tokens(batch, feats, mesh_points)
            shape = (tokens.shape[0],)
        else:
            tokens = flatten_maps(feats["mask_maps"])
            nv, _, h, w = feats["mask_maps"].shape
            shape = (nv, h, w)
        names = list(self.config.class_names) if self.config.open_vocab else None
        rounds = self.query_decoder(feats["token_levels"], tokens, names)
        return Predictions(rounds, shape, dict(three_d=feats["three_d"]))


@dataclass
class Instance:
    mask: np.ndarray  # bool over tokens
    class_id: int
    score: float


def extract_instances(class_logits, mask_logits, ignore_classes=(0,)):
    """Per query: best real class, mask = logit > 0, score = p(class) * mean sigmoid inside the mask."""
    with torch.no_grad():
        probs = F.softmax(class_logits.double(), dim=-1)[:, :-1]
        sig = torch.sigmoid(mask_logits.double())
    out = []
    for q in range(probs.shape[0]):
        cls = int(probs[q].argmax())
        if cls in ignore_classes:
            continue
        mask = (mask_logits[q] > 0).numpy()
        if not mask.any():
            continue
        score = float(probs[q, cls]) * float(sig[q][torch.as_tensor(mask)].mean())
        out.append(Instance(mask, cls, min(max(score, 0.0), 1.0)))
    return out
