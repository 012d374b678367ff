"""Pixel decoder (deformable cross-scale fusion + upsampling) and the query decoder.

Token layouts: per-view maps are V x D x h x w; flattened token sets are
(V*h*w) x D in view-major, row-major order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolation
from .geometry import TrilinearPlan


def flatten_maps(maps):
    v, d, h, w = maps.shape
    return maps.permute(0, 2, 3, 1).reshape(v * h * w, d)


def fourier_encoding_2d(views, h, w, dim, dtype=torch.float32):
    """Sine/cosine of normalized (row, col); (views*h*w) x dim, identical for every view."""
    if dim % 4:
        raise ContractViolation(f"fourier encoding needs dim divisible by 4, got {dim}")
    nf = dim // 4
    freqs = 2.0 ** torch.arange(nf, dtype=dtype) * math.pi
    rows = (torch.arange(h, dtype=dtype) + 0.5) / h
    cols = (torch.arange(w, dtype=dtype) + 0.5) / w
    r = rows[:, None, None] * freqs
    c = cols[None, :, None] * freqs
    r, c = torch.broadcast_tensors(r, c)
    enc = torch.cat([r.sin(), r.cos(), c.sin(), c.cos()], dim=-1).reshape(h * w, dim)
    return enc.repeat(views, 1)


class XYZEncoding(nn.Module):
    """MLP over 3D coordinates; the last layer starts at zero."""

    def __init__(self, dim):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(3, dim), nn.ReLU(), nn.Linear(dim, dim))
        nn.init.zeros_(self.mlp[2].weight)
        nn.init.zeros_(self.mlp[2].bias)

    def forward(self, xyz):
        return self.mlp(xyz)


def bilinear_gather(maps, u, v):
    """Sample V x D x h x w maps at continuous pixel coords, clamped to the border.

    ``u`` (column) and ``v`` (row) are V x Q x P; returns V x Q x P x D.
    """
    nv, d, h, w = maps.shape
    u = u.clamp(0, w - 1)
    v = v.clamp(0, h - 1)
    u0 = u.detach().floor().clamp(max=w - 1)
    v0 = v.detach().floor().clamp(max=h - 1)
    fu = (u - u0).unsqueeze(-1)
    fv = (v - v0).unsqueeze(-1)
    u0 = u0.long()
    v0 = v0.long()
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)
    flat = maps.permute(0, 2, 3, 1).reshape(nv, h * w, d)
    q, p = u.shape[1:]

    def get(rr, cc):
        idx = (rr * w + cc).reshape(nv, q * p, 1).expand(-1, -1, d)
        return torch.gather(flat, 1, idx).reshape(nv, q, p, d)

    top = (1 - fu) * get(v0, u0) + fu * get(v0, u1)
    bot = (1 - fu) * get(v1, u0) + fu * get(v1, u1)
    return (1 - fv) * top + fv * bot


class DeformableLayer(nn.Module):
    """Multi-scale deformable attention (single head) + feed-forward, pre-norm.

    Offsets are in pixels of the sampled level, i.e. normalized offsets times the
    level size, as in the usual formulation.
    """

    def __init__(self, dim, levels=3, points=4):
        super().__init__()
        self.levels, self.points = levels, points
        self.level_embed = nn.Parameter(torch.zeros(levels, dim))
        nn.init.normal_(self.level_embed, std=0.02)
        self.norm = nn.LayerNorm(dim)
        self.offset = nn.Linear(dim, levels * points * 2)
        self.weight = nn.Linear(dim, levels * points)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        for lin in (self.offset, self.out, self.ffn[2]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def sampling(self, query):
        """V x Q x D normalized queries -> (offsets V x Q x L x K x 2, weights V x Q x L x K)."""
        nv, q, _ = query.shape
        off = self.offset(query).view(nv, q, self.levels, self.points, 2)
        w = F.softmax(self.weight(query).view(nv, q, self.levels * self.points), dim=-1)
        return off, w.view(nv, q, self.levels, self.points)

    def forward(self, maps, level, strides, pos=None, weights_override=None):
        """Update ``maps[level]`` by sampling all levels around each of its pixels."""
        x = maps[level]
        nv, d, h, w = x.shape
        tokens = x.permute(0, 2, 3, 1).reshape(nv, h * w, d)
        query = self.norm(tokens) + self.level_embed[level]
        if pos is not None:
            query = query + pos.view(nv, h * w, d)
        off, weights = self.sampling(query)
        if weights_override is not None:
            weights = weights_override
        rows = torch.arange(h, dtype=x.dtype).repeat_interleave(w)
        cols = torch.arange(w, dtype=x.dtype).repeat(h)
        out = 0
        for lv, m in enumerate(maps):
            scale = strides[level] / strides[lv]
            vmap = self.value(self.norm(m.permute(0, 2, 3, 1))).permute(0, 3, 1, 2)
            u = cols[None, :, None] * scale + off[:, :, lv, :, 0]
            v = rows[None, :, None] * scale + off[:, :, lv, :, 1]
            samples = bilinear_gather(vmap, u, v)  # V x Q x K x D
            out = out + (weights[:, :, lv, :, None] * samples).sum(2)
        tokens = tokens + self.out(out)
        tokens = tokens + self.ffn(self.norm2(tokens))
        return tokens.view(nv, h, w, d).permute(0, 3, 1, 2)


def upsample_2x(maps):
    """1/8 -> 1/4: quarter-res pixel (r, c) reads the 1/8 map at (r/2, c/2)."""
    nv, d, h, w = maps.shape
    rows = torch.arange(2 * h, dtype=maps.dtype) / 2
    cols = torch.arange(2 * w, dtype=maps.dtype) / 2
    v = rows.repeat_interleave(2 * w)[None, :, None].expand(nv, -1, 1)
    u = cols.repeat(2 * h)[None, :, None].expand(nv, -1, 1)
    out = bilinear_gather(maps, u, v)[:, :, 0]
    return out.view(nv, 2 * h, 2 * w, d).permute(0, 3, 1, 2)


def apply_trilinear_torch(plan: TrilinearPlan, features):
    """Differentiable twin of geometry.apply_trilinear_plan for torch features."""
    d = features.shape[1]
    cells = torch.zeros(plan.num_cells, d, dtype=features.dtype)
    cells = cells.index_add(0, torch.as_tensor(plan.source_cell), features)
    cells = cells / torch.as_tensor(plan.cell_counts, dtype=features.dtype)[:, None]
    safe = torch.as_tensor(np.maximum(plan.corner_cell, 0))
    out = torch.einsum("qc,qcd->qd", torch.as_tensor(plan.corner_weight, dtype=features.dtype), cells[safe])
    fb = plan.fallback >= 0
    if fb.any():
        idx = torch.as_tensor(np.nonzero(fb)[0])
        out = out.index_copy(0, idx, features[torch.as_tensor(plan.fallback[fb])])
    return out


def transfer_to_mesh(plan8: TrilinearPlan, feats8, plan4: TrilinearPlan, skip4):
    """Mesh-point features: trilinear from the 1/8 cloud plus a trilinear skip from the 1/4 cloud."""
    if plan8.corner_cell.shape[0] == 0:
        return feats8.new_zeros(0, feats8.shape[1])
    return apply_trilinear_torch(plan8, feats8) + apply_trilinear_torch(plan4, skip4)


class MLP(nn.Module):
    def __init__(self, dim, out):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, out)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class Attention(nn.Module):
    """Pre-norm residual multi-head attention with a zero-initialized output."""

    def __init__(self, dim, heads):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        nn.init.zeros_(self.attn.out_proj.weight)
        nn.init.zeros_(self.attn.out_proj.bias)

    def forward(self, x, qpos, keys, kpos, values=None, self_attn=False):
        h = self.norm(x)
        if self_attn:
            keys = values = h
        elif values is None:
            values = keys
        q = h + qpos
        k = keys if kpos is None else keys + kpos
        out, _ = self.attn(q[None], k[None], values[None], need_weights=False)
        return x + out[0]


class FeedForward(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return x + self.fc2(F.relu(self.fc1(self.norm(x))))


class RefinementRound(nn.Module):
    def __init__(self, dim, heads, prompt=False):
        super().__init__()
        self.prompt_attn = Attention(dim, heads) if prompt else None
        self.cross = Attention(dim, heads)
        self.self_attn = Attention(dim, heads)
        self.ffn = FeedForward(dim)

    def forward(self, x, qpos, tokens, tpos, prompt_tokens=None):
        if self.prompt_attn is not None and prompt_tokens is not None:
            x = self.prompt_attn(x, qpos, prompt_tokens, None)
        x = self.cross(x, qpos, tokens, tpos, values=tokens)
        x = self.self_attn(x, qpos, None, None, self_attn=True)
        return self.ffn(x)


@dataclass
class PromptEncoding:
    words: list  # token list in vocabulary order
    word_ids: torch.Tensor  # per-token row in the word table
    spans: list  # per class (start, stop) into the token list
    tokens: torch.Tensor  # encoded token vectors, T x D


class PromptEncoder(nn.Module):
    """Learned word table standing in for a pretrained text encoder."""

    def __init__(self, dim, words):
        super().__init__()
        self.words = sorted(set(words))
        self.index = {w: i for i, w in enumerate(self.words)}
        self.table = nn.Embedding(len(self.words), dim)
        nn.init.normal_(self.table.weight, std=0.02)
        self.proj = nn.Linear(dim, dim)

    def forward(self, class_names) -> PromptEncoding:
        words, spans = [], []
        for name in class_names:
            parts = name.split()
            for p in parts:
                if p not in self.index:
                    raise ContractViolation(f"word {p!r} is not in the prompt vocabulary")
            spans.append((len(words), len(words) + len(parts)))
            words.extend(parts)
        ids = torch.as_tensor([self.index[w] for w in words])
        return PromptEncoding(words, ids, spans, self.proj(self.table(ids)))


def predict_classes_open(query_embed, prompt: PromptEncoding, no_object_logit):
    """Per-token dot products averaged over each class span, then the no-object column."""
    token_logits = query_embed @ prompt.tokens.T
    cols = [token_logits[:, a:b].mean(1) for a, b in prompt.spans]
    cols.append(no_object_logit.expand(query_embed.shape[0]))
    return torch.stack(cols, dim=1)


def predict_masks(mask_embed, tokens):
    return mask_embed @ tokens.T


def semantic_from_instances(mask_logits, class_logits):
    """Per-token class id from soft query votes; the no-object column is dropped.

    argmax returns the first maximum, so ties go to the lower class id.
    """
    probs = F.softmax(class_logits, dim=-1)[:, :-1]
    score = probs.T @ torch.sigmoid(mask_logits)  # classes x tokens
    return score.argmax(0)


class QueryDecoder(nn.Module):
    def __init__(self, dim, num_classes, queries=20, rounds=3, heads=4, open_vocab_words=None):
        super().__init__()
        self.rounds = rounds
        self.query_feat = nn.Parameter(torch.randn(queries, dim) * 0.02)
        self.query_pos = nn.Parameter(torch.randn(queries, dim) * 0.02)
        self.open_vocab = open_vocab_words is not None
        self.blocks = nn.ModuleList(RefinementRound(dim, heads, self.open_vocab) for _ in range(rounds))
        self.norm = nn.LayerNorm(dim)
        self.mask_embed = MLP(dim, dim)
        if self.open_vocab:
            self.prompt = PromptEncoder(dim, open_vocab_words)
            self.class_embed = MLP(dim, dim)
            self.no_object = nn.Parameter(torch.zeros(()))
        else:
            self.class_head = MLP(dim, num_classes + 1)

    def heads(self, x, mask_tokens, prompt=None):
        h = self.norm(x)
        masks = predict_masks(self.mask_embed(h), mask_tokens)
        if self.open_vocab:
            classes = predict_classes_open(self.class_embed(h), prompt, self.no_object)
        else:
            classes = self.class_head(h)
        return classes, masks

    def refine(self, levels, prompt=None, rounds=None, queries=None, query_pos=None):
        """``levels`` is [(tokens, pos)] for strides 32, 16, 8; returns the query state per round."""
        x = self.query_feat if queries is None else queries
        qpos = self.query_pos if query_pos is None else query_pos
        states = []
        prompt_tokens = prompt.tokens if prompt is not None else None
        for r in range(self.rounds if rounds is None else rounds):
            tokens, pos = levels[r % len(levels)]
            x = self.blocks[r % len(self.blocks)](x, qpos, tokens, pos, prompt_tokens)
            states.append(x)
        return states

    def forward(self, levels, mask_tokens, class_names=None):
        prompt = self.prompt(class_names) if self.open_vocab else None
        states = self.refine(levels, prompt)
        return [self.heads(x, mask_tokens, prompt) for x in states]
