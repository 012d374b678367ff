"""Analytic vs central finite-difference gradients on a tiny model, per parameter block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

from ..model import ModelConfig, OmniSegModel, ViewBatch
from ..scenedata import SceneConfig, generate_scene
from .losses import compute_losses
from .train import frame_targets

GRADCHECK_MODEL = ModelConfig(
    width=1, dim=4, heads=1, queries=3, rounds=2, fusion_layers=1, deform_points=2,
    class_names=("room shell", "box", "ball"),
)
GRADCHECK_SCENE = SceneConfig(width=32, height=32, views=2, min_objects=2, max_objects=3, n_classes=2)


@dataclass
class BlockResult:
    name: str
    size: int
    error: float  # max relative error over the checked directions
    passed: bool
    kinks: int = 0  # directions redrawn because a relu/floor/clamp switched inside +-eps


class BranchRecorder(TorchFunctionMode):
    """Records which side of every kink (relu, floor, clamp) each element lies on."""

    KINKED = {F.relu, torch.relu, torch.Tensor.relu, torch.floor, torch.Tensor.floor, torch.clamp, torch.Tensor.clamp}

    def __init__(self):
        super().__init__()
        self.trace = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if func in self.KINKED:
            x = args[0]
            if func in (torch.floor, torch.Tensor.floor):
                self.trace.append(out.detach().clone())
            elif func in (torch.clamp, torch.Tensor.clamp):
                self.trace.append((out.detach() != x.detach()) * torch.sign(x.detach() - out.detach()))
            else:
                self.trace.append(x.detach() > 0)
        return out


def _branches(loss):
    with BranchRecorder() as rec:
        value = float(loss())
    return value, rec.trace


def _same_branches(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


def _loss_fn(model, batch, gt, matches):
    def f():
        total, _, _ = compute_losses(model(batch).rounds, gt, matches=matches)
        return total
    return f


def gradcheck(model_config=GRADCHECK_MODEL, scene_config=GRADCHECK_SCENE, seed=0, eps=1e-4, coords=2, tol=1e-4,
              corrupt=None, param_std=0.5, max_skips=8, only=None):
    """Returns one BlockResult per named parameter.

    Every parameter (zero-initialized ones too) is redrawn so all branches carry
    gradient. The Hungarian assignment is computed once and held fixed.
    ``corrupt`` maps block name -> factor applied to its analytic gradient (negative control).
    ``only`` restricts the finite-difference probes to the named blocks.
    """
    torch.manual_seed(seed)
    model = OmniSegModel(model_config).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * param_std)
    scene = generate_scene(seed, scene_config)
    batch = ViewBatch.from_frames(scene.frames).to(torch.float64)
    gt = frame_targets(scene.frames, scene.instance_classes())
    _, _, matches = compute_losses(model(batch).rounds, gt)
    loss = _loss_fn(model, batch, gt, matches)

    model.zero_grad()
    loss().backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    for name, factor in (corrupt or {}).items():
        grads[name] = grads[name] * factor
    # Blocks whose gradient is exactly zero (a key bias under softmax) or negligible
    # are judged against a millionth of the largest gradient instead of their own scale.
    scale = max(float(g.abs().max()) for g in grads.values())
    floor = 1e-6 * max(scale, 1e-30)

    rng = np.random.default_rng(seed)
    results = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            if only is not None and name not in only:
                continue
            g = grads[name].reshape(-1)
            flat = p.view(-1)
            n = flat.numel()

            def probe(direction):
                """Central difference, or None if a relu/floor/clamp switches between the probes."""
                orig = flat.clone()
                flat.add_(eps * direction)
                up, br_up = _branches(loss)
                flat.copy_(orig - eps * direction)
                down, br_down = _branches(loss)
                flat.copy_(orig)
                return (up - down) / (2 * eps) if _same_branches(br_up, br_down) else None

            def unit(i):
                e = torch.zeros(n, dtype=torch.float64)
                e[i] = 1.0
                return e

            randoms = (torch.as_tensor(rng.normal(size=n)) for _ in range(max_skips + 1))
            phases = [
                ((u / u.norm() for u in randoms), 1, max(float(g.norm()), floor)),
                ((unit(i) for i in rng.permutation(n)[: coords + max_skips]), min(coords, n), max(float(g.abs().max()), floor)),
            ]
            err, done, skipped = 0.0, 0, 0
            for directions, want, ref in phases:
                got = 0
                for direction in directions:
                    if got == want:
                        break
                    fd = probe(direction)
                    if fd is None:
                        skipped += 1
                        continue
                    err = max(err, abs(float(g @ direction) - fd) / ref)
                    got += 1
                done += got
            ok = err <= tol and done > 0
            results.append(BlockResult(name, n, err, ok, skipped))
    return results


def format_results(results):
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}} {r.size:>6d} {r.error:.3e} kinks={r.kinks} {'ok' if r.passed else 'FAIL'}" for r in results]
    return "\n".join(lines)
