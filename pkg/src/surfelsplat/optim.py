"""Adaptive-moment optimizer and adaptive density control for splat clouds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import Tensor

from .scene import SplatCloud


class AdamOptimizer:
    """Per-group Adam with bias correction over named tensors.

    Positions use a tiny epsilon (splatting convention); everything else the
    standard 1e-8. Parameter tensors are updated in place so autograd leaves
    stay stable between steps.
    """

    def __init__(self, params: dict[str, Tensor], lrs: dict[str, float],
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: Optional[dict[str, float]] = None, default_eps: float = 1e-8):
        self.params = params
        self.lrs = dict(lrs)
        self.betas = betas
        self.eps = {name: (eps or {}).get(name, default_eps) for name in params}
        self.exp_avg = {k: torch.zeros_like(v) for k, v in params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, grads: dict[str, Optional[Tensor]]):
        unknown = set(grads) - set(self.params)
        if unknown:
            raise ValueError(f"gradients for unknown parameters: {sorted(unknown)}")
        for name, g in grads.items():
            if g is not None and g.shape != self.params[name].shape:
                raise ValueError(
                    f"gradient shape {tuple(g.shape)} does not match parameter "
                    f"'{name}' {tuple(self.params[name].shape)}"
                )
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        with torch.no_grad():
            for name, g in grads.items():
                if g is None:
                    continue
                m = self.exp_avg[name]
                v = self.exp_avg_sq[name]
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                denom = (v / bc2).sqrt_().add_(self.eps[name])
                self.params[name].addcdiv_(m, denom, value=-self.lrs[name] / bc1)

    def set_lr(self, name: str, lr: float):
        self.lrs[name] = lr

    def select_rows(self, keep: Tensor, names: Optional[set[str]] = None):
        """Shrink state to the kept splat rows (after pruning)."""
        for d in (self.exp_avg, self.exp_avg_sq):
            for name in d:
                if names is not None and name not in names:
                    continue
                d[name] = d[name][keep].contiguous()

    def append_rows(self, counts: int, names: Optional[set[str]] = None):
        """Grow state with zero moments for newly added splats."""
        for d in (self.exp_avg, self.exp_avg_sq):
            for name, t in d.items():
                if names is not None and name not in names:
                    continue
                pad = torch.zeros((counts,) + tuple(t.shape[1:]), dtype=t.dtype)
                d[name] = torch.cat([t, pad], dim=0)

    def rebind(self, params: dict[str, Tensor]):
        self.params = params


def exponential_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    """Log-linear interpolation from lr_init to lr_final over total steps."""
    if total <= 1:
        return lr_final
    t = min(max(step / (total - 1), 0.0), 1.0)
    return float(math.exp((1 - t) * math.log(lr_init) + t * math.log(lr_final)))


@dataclass
class DensifyStats:
    """Accumulated screen-space gradient magnitudes and observation counts."""

    grad_accum: Tensor
    count: Tensor

    @classmethod
    def zeros(cls, n: int, dtype=torch.float32) -> "DensifyStats":
        return cls(torch.zeros(n, dtype=dtype), torch.zeros(n, dtype=torch.int64))

    def update(self, screen_grad: Tensor, visible: Tensor):
        self.grad_accum = self.grad_accum + screen_grad * visible
        self.count = self.count + visible.to(torch.int64)

    def mean_grad(self) -> Tensor:
        return self.grad_accum / self.count.clamp_min(1).to(self.grad_accum.dtype)

    def reset(self, n: int):
        self.grad_accum = torch.zeros(n, dtype=self.grad_accum.dtype)
        self.count = torch.zeros(n, dtype=torch.int64)


@dataclass
class DensifyOutcome:
    cloned: int
    split: int
    pruned: int
    total: int


def densify_and_prune(
    cloud: SplatCloud,
    optimizer: AdamOptimizer,
    stats: DensifyStats,
    scene_extent: float,
    grad_threshold: float = 2e-4,
    percent_dense: float = 0.01,
    prune_opacity: float = 0.005,
    prune_scale_factor: float = 0.1,
    split_scale_divisor: float = 1.6,
    max_splats: int = 500_000,
    generator: Optional[torch.Generator] = None,
) -> tuple[SplatCloud, DensifyOutcome]:
    """Clone small / split large high-gradient splats, prune transparent or
    oversized ones; optimizer moments follow the surviving rows.

    Returns the new cloud; stats are reset to the new population.
    """
    with torch.no_grad():
        act = cloud.activate()
        n = len(cloud)
        mean_grad = stats.mean_grad()
        hot = (mean_grad > grad_threshold) & (stats.count > 0)
        world_scale = act.scale.max(dim=-1).values
        big = world_scale > percent_dense * scene_extent
        clone_mask = hot & ~big
        split_mask = hot & big
        room = max(max_splats - n, 0)
        if int(clone_mask.sum() + split_mask.sum()) > room:
            # keep the hottest candidates when at the population cap
            budgeted = torch.zeros_like(hot)
            order = torch.argsort(mean_grad, descending=True, stable=True)
            chosen = order[hot[order]][:room]
            budgeted[chosen] = True
            clone_mask &= budgeted
            split_mask &= budgeted

        params = cloud.parameters()
        new_parts = []
        state_rows = []

        if bool(clone_mask.any()):
            idx = torch.nonzero(clone_mask, as_tuple=False).squeeze(-1)
            new_parts.append({k: v.detach()[idx].clone() for k, v in params.items()})
            state_rows.append(int(idx.numel()))

        if bool(split_mask.any()):
            idx = torch.nonzero(split_mask, as_tuple=False).squeeze(-1)
            reps = 2
            base = {k: v.detach()[idx].repeat_interleave(reps, dim=0).clone() for k, v in params.items()}
            # sample child centers from the parent's own tangent Gaussian
            t_u = act.t_u[idx].repeat_interleave(reps, dim=0)
            t_v = act.t_v[idx].repeat_interleave(reps, dim=0)
            s = act.scale[idx].repeat_interleave(reps, dim=0)
            eps = torch.randn(idx.numel() * reps, 2, generator=generator, dtype=s.dtype)
            base["positions"] = base["positions"] + t_u * (eps[:, :1] * s[:, :1]) + t_v * (eps[:, 1:] * s[:, 1:])
            base["log_scales"] = base["log_scales"] - math.log(split_scale_divisor)
            new_parts.append(base)
            state_rows.append(int(idx.numel() * reps))

        # survivors: drop split parents, transparent and oversized splats
        prune = (act.opacity < prune_opacity) | (world_scale > prune_scale_factor * scene_extent)
        keep = ~(prune | split_mask)
        keep_idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)

        merged = {k: v.detach()[keep_idx].clone() for k, v in params.items()}
        for part in new_parts:
            merged = {k: torch.cat([merged[k], part[k]], dim=0) for k in merged}
        new_cloud = SplatCloud(**merged)

        splat_names = set(params)
        optimizer.select_rows(keep_idx, names=splat_names)
        optimizer.append_rows(sum(state_rows), names=splat_names)
        optimizer.rebind({**optimizer.params, **new_cloud.parameters()})

        outcome = DensifyOutcome(
            cloned=int(clone_mask.sum()),
            split=int(split_mask.sum()),
            pruned=int(prune.sum()),
            total=len(new_cloud),
        )
        stats.reset(len(new_cloud))
    return new_cloud, outcome


def reset_opacity(cloud: SplatCloud, optimizer: AdamOptimizer, ceiling: float = 0.01):
    """Clamp opacities to at most ``ceiling`` and clear their moments."""
    from .scene import sigmoid_inverse

    with torch.no_grad():
        ceiling_logit = float(sigmoid_inverse(torch.tensor(ceiling, dtype=torch.float64)))
        cloud.opacity_logits.clamp_(max=ceiling_logit)
        optimizer.exp_avg["opacity_logits"].zero_()
        optimizer.exp_avg_sq["opacity_logits"].zero_()
