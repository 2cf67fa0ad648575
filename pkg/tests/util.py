"""Shared builders for test scenes."""

import numpy as np
import torch

from surfelsplat.scene import Camera, SplatCloud, sh_band_count


def frontal_camera(width=8, height=8, focal=20.0, cx=None, cy=None):
    """Camera at the origin looking down +z (identity pose)."""
    return Camera(
        fx=focal,
        fy=focal,
        cx=width / 2.0 if cx is None else cx,
        cy=height / 2.0 if cy is None else cy,
        width=width,
        height=height,
        world_to_camera=np.eye(4),
    )


def random_cloud(
    n,
    seed=0,
    dtype=torch.float64,
    sh_degree=1,
    z_range=(2.0, 4.0),
    xy_extent=0.8,
    scale_range=(-2.5, -0.7),
    requires_grad=False,
):
    """Random splats in front of a frontal camera."""
    g = torch.Generator().manual_seed(seed)

    def u(*shape, lo=0.0, hi=1.0):
        return torch.rand(*shape, generator=g, dtype=dtype) * (hi - lo) + lo

    cloud = SplatCloud(
        positions=torch.stack(
            [
                u(n, lo=-xy_extent, hi=xy_extent),
                u(n, lo=-xy_extent, hi=xy_extent),
                u(n, lo=z_range[0], hi=z_range[1]),
            ],
            dim=-1,
        ),
        quaternions=torch.randn(n, 4, generator=g, dtype=dtype),
        log_scales=u(n, 2, lo=scale_range[0], hi=scale_range[1]),
        opacity_logits=u(n, lo=-1.0, hi=2.5),
        sh_coeffs=u(n, sh_band_count(sh_degree), 3, lo=-0.15, hi=0.15),
        albedo_logits=u(n, 3, lo=-1.5, hi=1.5),
        metallic_logits=u(n, lo=-1.5, hi=1.5),
        roughness_logits=u(n, lo=-1.0, hi=1.0),
    )
    # keep quaternions away from zero norm
    qn = cloud.quaternions.norm(dim=-1, keepdim=True)
    cloud.quaternions = torch.where(qn > 0.3, cloud.quaternions, cloud.quaternions + 1.0)
    if requires_grad:
        cloud.requires_grad_(True)
    return cloud


def single_splat_cloud(
    position=(0.0, 0.0, 3.0),
    quaternion=(1.0, 0.0, 0.0, 0.0),
    log_scale=(-1.0, -1.0),
    opacity=0.99999,
    color_dc=(0.2, -0.1, 0.3),
    dtype=torch.float64,
    sh_degree=0,
    albedo=(0.5, 0.5, 0.5),
    metallic=0.1,
    roughness=0.5,
):
    from surfelsplat.scene import sigmoid_inverse

    def logit(x):
        return sigmoid_inverse(torch.tensor(x, dtype=dtype))

    sh = torch.zeros(1, sh_band_count(sh_degree), 3, dtype=dtype)
    sh[0, 0] = torch.tensor(color_dc, dtype=dtype)
    return SplatCloud(
        positions=torch.tensor([position], dtype=dtype),
        quaternions=torch.tensor([quaternion], dtype=dtype),
        log_scales=torch.tensor([log_scale], dtype=dtype),
        opacity_logits=logit(opacity).reshape(1),
        sh_coeffs=sh,
        albedo_logits=logit(albedo).reshape(1, 3),
        metallic_logits=logit(metallic).reshape(1),
        roughness_logits=logit(roughness).reshape(1),
    )


def cat_clouds(a, b):
    return SplatCloud.concatenate(a, b)
