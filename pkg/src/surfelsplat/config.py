"""Training configuration: a flat dataclass round-tripped through YAML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml


@dataclass
class TrainConfig:
    # schedule
    stage1_iters: int = 30000
    stage2_iters: int = 10000
    seed: int = 0

    # loss weights
    lambda_normal_fm: float = 0.5
    lambda_depth_fm: float = 0.05
    lambda_light: float = 0.002
    lambda_albedo_smooth: float = 0.05
    lambda_metallic_smooth: float = 0.05
    lambda_roughness_smooth: float = 0.01
    ssim_weight: float = 0.2
    ssim_window: int = 11
    lambda_normal_consistency: float = 0.05
    normal_consistency_from_iter: int = 7000
    differentiate_depth_alignment: bool = False
    rgb_loss_region: str = "full"  # "full" (background-composited) or "mask"

    # model
    sh_degree: int = 3
    sh_degree_interval: int = 1000
    init_points: int = 2000
    init_opacity: float = 0.1
    init_albedo: float = 0.5
    init_metallic: float = 0.1
    init_roughness: float = 0.7
    cube_resolution: int = 32
    env_levels: int = 6
    irradiance_res: int = 16
    lut_resolution: int = 64
    lut_samples: int = 1024
    background: str = "black"
    shading_mode: str = "deferred"  # or "forward" (ablation)
    normal_uses_filter: bool = False

    # learning rates
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    rotation_lr: float = 1e-3
    scale_lr: float = 5e-3
    opacity_lr: float = 0.05
    sh_lr: float = 2.5e-3
    sh_rest_divisor: float = 20.0
    albedo_lr: float = 5e-3
    metallic_lr: float = 5e-3
    roughness_lr: float = 5e-3
    env_lr: float = 1e-2

    # adaptive density control (stage 1)
    densify_from_iter: int = 500
    densify_until_iter: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_percent_dense: float = 0.01
    prune_opacity: float = 0.005
    prune_scale_factor: float = 0.1  # world-space cap as a fraction of extent
    split_scale_divisor: float = 1.6
    opacity_reset_interval: int = 3000
    opacity_reset_ceiling: float = 0.01
    stage2_densify: bool = False
    stage2_opacity_reset: bool = False
    max_splats: int = 500_000

    # bookkeeping
    checkpoint_interval: int = 5000
    log_interval: int = 10

    def __post_init__(self):
        if self.stage1_iters < 1 or self.stage2_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        for f in fields(self):
            if f.name.startswith("lambda_") or f.name == "ssim_weight":
                if getattr(self, f.name) < 0:
                    raise ValueError(f"{f.name} must be >= 0")
        if self.rgb_loss_region not in ("full", "mask"):
            raise ValueError(f"rgb_loss_region must be 'full' or 'mask', got {self.rgb_loss_region}")
        if self.shading_mode not in ("deferred", "forward"):
            raise ValueError(f"shading_mode must be 'deferred' or 'forward', got {self.shading_mode}")

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValueError(f"config must be a mapping of keys to values: {path}")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_file(self, path: str | Path):
        Path(path).write_text(yaml.safe_dump(asdict(self), sort_keys=True))

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)
