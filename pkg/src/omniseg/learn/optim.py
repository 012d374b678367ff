"""Adam with optional global-norm clipping (torch provides both)."""
from __future__ import annotations

import torch


def make_optimizer(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def optimizer_step(optimizer, clip=1.0):
    """Clip the gradients held by ``optimizer``'s params, step, and zero them. Returns the pre-clip norm."""
    params = [p for group in optimizer.param_groups for p in group["params"] if p.grad is not None]
    norm = torch.nn.utils.clip_grad_norm_(params, clip) if clip else None
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return None if norm is None else float(norm)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr
