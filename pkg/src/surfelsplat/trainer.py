"""Two-stage training loop.

Stage 1 fits geometry with spherical-harmonic appearance, supervised by the
photometric loss plus pseudo-GT normal/depth terms, with adaptive density
control. Stage 2 switches the color path to physically-based shading against
the trainable environment light and optimizes geometry, materials, and light
jointly. One view per iteration, cycled in a seeded shuffled order; fully
deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor
from tqdm import tqdm

from .config import TrainConfig
from .losses import total_loss
from .optim import AdamOptimizer, DensifyStats, densify_and_prune, exponential_lr, reset_opacity
from .plyio import save_splats
from .rasterizer import RasterSettings, rasterize, screen_space_gradient
from .scene import (
    SceneError,
    SplatCloud,
    TrainDataset,
    sh_band_count,
    sigmoid_inverse,
)
from .shading import TrainableEnvironment, shade_deferred, shade_forward


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


def scene_bounds(dataset: TrainDataset) -> tuple[np.ndarray, float]:
    """Scene center and extent from camera positions and the scale hint."""
    centers = np.stack([v.camera.center for v in dataset.views])
    center = centers.mean(axis=0)
    cam_spread = float(np.linalg.norm(centers - center, axis=1).max())
    extent = max(dataset.scene_scale, 1e-6)
    return center, max(extent, cam_spread * 0.5)


def initialize(dataset: TrainDataset, config: TrainConfig) -> tuple[SplatCloud, TrainableEnvironment]:
    """Seed splats from provided points or uniformly inside the scene ball;
    constant-gray light."""
    if len(dataset.views) == 0:
        raise SceneError("dataset has no cameras")
    gen = torch.Generator().manual_seed(config.seed)
    center, extent = scene_bounds(dataset)
    if dataset.points is not None and len(dataset.points) > 0:
        pts = torch.as_tensor(np.asarray(dataset.points), dtype=torch.float32)
        colors = None
        if dataset.point_colors is not None:
            colors = torch.as_tensor(np.asarray(dataset.point_colors), dtype=torch.float32)
    else:
        # uniform in a ball of radius scene_scale around the scene center
        n = config.init_points
        u = torch.rand(n, 1, generator=gen)
        d = torch.randn(n, 3, generator=gen)
        d = d / d.norm(dim=-1, keepdim=True).clamp_min(1e-9)
        pts = torch.as_tensor(center, dtype=torch.float32) + d * (u ** (1.0 / 3.0)) * dataset.scene_scale
        colors = None
    n = pts.shape[0]

    from scipy.spatial import cKDTree

    tree = cKDTree(pts.numpy())
    dist, _ = tree.query(pts.numpy(), k=min(4, n))
    if n > 1:
        nn = np.clip(dist[:, 1:].mean(axis=1), 1e-4 * extent, None)
    else:
        nn = np.full(n, 0.1 * extent)
    log_scales = torch.log(torch.as_tensor(nn, dtype=torch.float32))[:, None].repeat(1, 2)

    bands = sh_band_count(config.sh_degree)
    sh = torch.zeros(n, bands, 3)
    if colors is not None:
        sh[:, 0, :] = (colors - 0.5) / 0.28209479177387814

    def logit(x):
        return float(sigmoid_inverse(torch.tensor(x, dtype=torch.float64)))

    cloud = SplatCloud(
        positions=pts.clone(),
        quaternions=torch.tensor([1.0, 0.0, 0.0, 0.0]).repeat(n, 1),
        log_scales=log_scales,
        opacity_logits=torch.full((n,), logit(config.init_opacity)),
        sh_coeffs=sh,
        albedo_logits=torch.full((n, 3), logit(config.init_albedo)),
        metallic_logits=torch.full((n,), logit(config.init_metallic)),
        roughness_logits=torch.full((n,), logit(config.init_roughness)),
    )
    env = TrainableEnvironment.constant(
        0.5,
        resolution=config.cube_resolution,
        levels=config.env_levels,
        irradiance_res=config.irradiance_res,
        lut_resolution=config.lut_resolution,
        lut_samples=config.lut_samples,
    )
    return cloud, env


@dataclass
class TrainResult:
    cloud: SplatCloud
    env: TrainableEnvironment
    log_path: Optional[Path]
    checkpoint_dir: Optional[Path]
    final_loss: float
    iterations: int


def save_checkpoint(directory: Path, cloud: SplatCloud, env: TrainableEnvironment,
                    config: TrainConfig, iteration: int):
    directory.mkdir(parents=True, exist_ok=True)
    save_splats(directory / "splats.ply", cloud)
    np.save(directory / "env_cube.npy", env.cube_map().detach().cpu().numpy().astype(np.float32))
    np.save(directory / "env_raw.npy", env.raw.detach().cpu().numpy().astype(np.float32))
    config.to_file(directory / "config.yaml")
    (directory / "meta.json").write_text(json.dumps({"iteration": iteration}))


def load_checkpoint(directory: Path) -> tuple[SplatCloud, TrainableEnvironment, TrainConfig]:
    from .plyio import load_splats

    directory = Path(directory)
    cloud = load_splats(directory / "splats.ply")
    config = TrainConfig.from_file(directory / "config.yaml")
    raw = np.load(directory / "env_raw.npy")
    env = TrainableEnvironment(
        torch.from_numpy(raw),
        levels=config.env_levels,
        irradiance_res=config.irradiance_res,
        lut_resolution=config.lut_resolution,
        lut_samples=config.lut_samples,
    )
    return cloud, env, config


class Trainer:
    """Owns the mutable cloud/light parameters and runs the schedule."""

    def __init__(self, dataset: TrainDataset, config: TrainConfig,
                 out_dir: Optional[Path] = None, progress: bool = False):
        self.dataset = dataset
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.progress = progress
        self.cloud, self.env = initialize(dataset, config)
        self.center, self.extent = scene_bounds(dataset)
        self.gen = torch.Generator().manual_seed(config.seed + 1)
        self.optimizer = self._make_optimizer()
        self.stats = DensifyStats.zeros(len(self.cloud))
        self.active_sh = 0
        self.log_records: list[dict] = []
        self._log_fh = None
        self._last_checkpoint: Optional[Path] = None

    def _make_optimizer(self) -> AdamOptimizer:
        c = self.config
        params = dict(self.cloud.parameters())
        params["env_raw"] = self.env.raw
        lrs = {
            "positions": c.position_lr_init * self.extent,
            "quaternions": c.rotation_lr,
            "log_scales": c.scale_lr,
            "opacity_logits": c.opacity_lr,
            "sh_coeffs": c.sh_lr,
            "albedo_logits": c.albedo_lr,
            "metallic_logits": c.metallic_lr,
            "roughness_logits": c.roughness_lr,
            "env_raw": c.env_lr,
        }
        return AdamOptimizer(params, lrs, eps={"positions": 1e-15})

    def _raster_settings(self) -> RasterSettings:
        return RasterSettings(
            normal_uses_filter=self.config.normal_uses_filter,
            active_sh_degree=self.active_sh,
        )

    def _render_stage1(self, view):
        out = rasterize(self.cloud, view.camera, background=(0.0, 0.0, 0.0),
                        settings=self._raster_settings())
        return out, out.color, None

    def _render_stage2(self, view):
        env_state = self.env.build()
        if self.config.shading_mode == "forward":
            out = shade_forward(self.cloud, view.camera, env_state,
                                settings=self._raster_settings())
            return out, out.color, env_state
        out = rasterize(self.cloud, view.camera, background=(0.0, 0.0, 0.0),
                        settings=self._raster_settings())
        color = shade_deferred(out.gbuffer, view.camera, env_state, background="black")
        return out, color, env_state

    def run(self) -> TrainResult:
        c = self.config
        total_iters = c.stage1_iters + c.stage2_iters
        self.cloud.requires_grad_(True)
        self.env.raw.requires_grad_(True)
        log_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / "train_log.jsonl"
            self._log_fh = open(log_path, "w")
        order = self._view_order()
        pos_in_epoch = 0
        bar = tqdm(total=total_iters, disable=not self.progress, desc="train")
        report = None
        try:
            for it in range(1, total_iters + 1):
                stage = 1 if it <= c.stage1_iters else 2
                if it == c.stage1_iters + 1:
                    self._enter_stage2()
                if pos_in_epoch >= len(order):
                    order = self._view_order()
                    pos_in_epoch = 0
                view = self.dataset.views[order[pos_in_epoch]]
                pos_in_epoch += 1

                if c.sh_degree_interval > 0 and it % c.sh_degree_interval == 0:
                    self.active_sh = min(self.active_sh + 1, c.sh_degree)

                report = self._iteration(it, stage, view)
                if not math.isfinite(report.total):
                    diag = (f"non-finite loss at iteration {it} "
                            f"(stage {stage}, view {view.name!r})")
                    if self.out_dir is not None:
                        bad_dir = self.out_dir / "diverged"
                        save_checkpoint(bad_dir, self.cloud.detached(), self.env, c, it)
                    raise TrainingDiverged(diag, checkpoint=self._last_checkpoint)

                if self.out_dir is not None and c.checkpoint_interval > 0 and it % c.checkpoint_interval == 0:
                    ck = self.out_dir / f"checkpoint_{it:06d}"
                    save_checkpoint(ck, self.cloud, self.env, c, it)
                    self._last_checkpoint = ck
                bar.update(1)
        finally:
            bar.close()
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        final_dir = None
        if self.out_dir is not None:
            final_dir = self.out_dir / "checkpoint_final"
            save_checkpoint(final_dir, self.cloud, self.env, c, total_iters)
        return TrainResult(
            cloud=self.cloud,
            env=self.env,
            log_path=log_path,
            checkpoint_dir=final_dir,
            final_loss=report.total if report else float("nan"),
            iterations=total_iters,
        )

    def _view_order(self) -> list[int]:
        return torch.randperm(len(self.dataset.views), generator=self.gen).tolist()

    def _enter_stage2(self):
        # warm-start albedo from the fitted SH base color
        with torch.no_grad():
            dc = self.cloud.sh_coeffs[:, 0, :] * 0.28209479177387814 + 0.5
            self.cloud.albedo_logits.copy_(sigmoid_inverse(dc.clamp(0.05, 0.95)))
            self.optimizer.exp_avg["albedo_logits"].zero_()
            self.optimizer.exp_avg_sq["albedo_logits"].zero_()

    def _iteration(self, it: int, stage: int, view):
        c = self.config
        if stage == 1:
            out, color, env_state = self._render_stage1(view)
        else:
            out, color, env_state = self._render_stage2(view)
        gb = out.gbuffer
        rgb_mask = view.mask if c.rgb_loss_region == "mask" else torch.ones_like(view.mask)
        report = total_loss(
            stage,
            color,
            view.image,
            gb.normal,
            gb.depth,
            view.pseudo_normal,
            view.pseudo_depth,
            view.mask,
            view.camera,
            c,
            cube_map=env_state.cube_map if env_state is not None else None,
            albedo_map=gb.albedo if stage == 2 else None,
            metallic_map=gb.metallic if stage == 2 else None,
            roughness_map=gb.roughness if stage == 2 else None,
            depth_valid=gb.depth_valid,
            rgb_mask=rgb_mask,
            enable_normal_consistency=it >= c.normal_consistency_from_iter,
        )

        names = list(self.cloud.parameters().keys())
        tensors = [self.optimizer.params[n] for n in names]
        if stage == 2:
            names.append("env_raw")
            tensors.append(self.env.raw)
        grads = torch.autograd.grad(report.total_tensor, tensors, allow_unused=True)
        grad_map = dict(zip(names, grads))

        # densification statistics from the world-space position gradient
        if stage == 1 or c.stage2_densify:
            gp = grad_map.get("positions")
            if gp is not None:
                sg = screen_space_gradient(gp, out.center_depth, view.camera)
                self.stats.update(sg, out.visible)

        self.optimizer.set_lr(
            "positions",
            exponential_lr(it, c.stage1_iters + c.stage2_iters,
                           c.position_lr_init * self.extent,
                           c.position_lr_final * self.extent),
        )
        self.optimizer.step(grad_map)

        densify_now = (
            (stage == 1 or c.stage2_densify)
            and c.densify_interval > 0
            and c.densify_from_iter <= it <= c.densify_until_iter
            and it % c.densify_interval == 0
        )
        if densify_now:
            self.cloud, outcome = densify_and_prune(
                self.cloud, self.optimizer, self.stats, self.extent,
                grad_threshold=c.densify_grad_threshold,
                percent_dense=c.densify_percent_dense,
                prune_opacity=c.prune_opacity,
                prune_scale_factor=c.prune_scale_factor,
                split_scale_divisor=c.split_scale_divisor,
                max_splats=c.max_splats,
                generator=self.gen,
            )
            self.cloud.requires_grad_(True)
            self.optimizer.rebind({**self.cloud.parameters(), "env_raw": self.env.raw})

        reset_now = (
            c.opacity_reset_interval > 0
            and it % c.opacity_reset_interval == 0
            and (stage == 1 or c.stage2_opacity_reset)
            and it <= c.densify_until_iter
        )
        if reset_now:
            reset_opacity(self.cloud, self.optimizer, c.opacity_reset_ceiling)

        if self._log_fh is not None and (it % c.log_interval == 0 or it == 1):
            rec = {"iteration": it, "splats": len(self.cloud), **report.to_record()}
            self._log_fh.write(json.dumps(rec) + "\n")
        return report


def train(dataset: TrainDataset, config: TrainConfig, out_dir=None, progress=False) -> TrainResult:
    """Run the full two-stage schedule and return the trained scene."""
    return Trainer(dataset, config, out_dir=out_dir, progress=progress).run()
