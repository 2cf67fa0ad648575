"""Training objectives: photometric, geometric pseudo-GT, and regularizers.

Every loss is a pure differentiable map from rendered/reference maps to a
scalar; adjoints w.r.t. any input map come from :func:`loss_adjoints`.
Foreground masks gate the geometric losses; the photometric loss can run over
the full (background-composited) image or the mask only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor

from .scene import Camera


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def ssim_map(img_a: Tensor, img_b: Tensor, window: int = 11, sigma: float = 1.5) -> Tensor:
    """Per-pixel structural similarity over valid windows.

    Inputs (H, W, C) in [0, 1]; output (H - window + 1, W - window + 1, C)
    with the standard stabilization constants for unit dynamic range.
    """
    if img_a.shape != img_b.shape:
        raise ValueError(f"image shapes differ: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    h, w = img_a.shape[0], img_a.shape[1]
    if h < window or w < window:
        raise ValueError(f"images ({h}x{w}) smaller than the SSIM window ({window})")
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    k = gaussian_window(window, sigma, dtype=img_a.dtype)

    def filt(x):
        # separable Gaussian, valid padding; x (H, W, C) -> conv over H, W
        ch = x.shape[-1]
        xx = x.permute(2, 0, 1)[:, None]  # (C, 1, H, W)
        xx = F.conv2d(xx, k.reshape(1, 1, -1, 1))
        xx = F.conv2d(xx, k.reshape(1, 1, 1, -1))
        return xx[:, 0].permute(1, 2, 0)

    a = img_a if img_a.ndim == 3 else img_a[..., None]
    b = img_b if img_b.ndim == 3 else img_b[..., None]
    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = filt(a * a) - mu_aa
    var_b = filt(b * b) - mu_bb
    cov = filt(a * b) - mu_ab
    s = ((2 * mu_ab + c1) * (2 * cov + c2)) / ((mu_aa + mu_bb + c1) * (var_a + var_b + c2))
    return s if img_a.ndim == 3 else s[..., 0]


@dataclass
class LossValue:
    value: Tensor
    # extra scalars carried for the report
    aux: dict = field(default_factory=dict)

    def __float__(self) -> float:
        return float(self.value)


def rgb_loss(
    rendered: Tensor,
    reference: Tensor,
    mask: Tensor,
    ssim_weight: float = 0.2,
    window: int = 11,
) -> LossValue:
    """(1 - w) * L1 + w * (1 - SSIM) over masked pixels."""
    if rendered.shape != reference.shape:
        raise ValueError("rendered/reference shapes differ")
    maskf = mask.to(rendered.dtype)
    count = maskf.sum()
    if float(count) == 0:
        warnings.warn("rgb_loss: empty mask, returning zero loss")
        z = rendered.sum() * 0.0
        return LossValue(z, {"l1": 0.0, "dssim": 0.0})
    l1 = ((rendered - reference).abs().mean(dim=-1) * maskf).sum() / count
    if ssim_weight > 0:
        half = window // 2
        smap = ssim_map(rendered, reference, window=window).mean(dim=-1)
        inner = maskf[half:-half, half:-half]
        inner_count = inner.sum().clamp_min(1.0)
        dssim = 1.0 - (smap * inner).sum() / inner_count
    else:
        dssim = rendered.sum() * 0.0
    total = (1.0 - ssim_weight) * l1 + ssim_weight * dssim
    return LossValue(total, {"l1": float(l1.detach()), "dssim": float(dssim.detach())})


def depth_to_normal_map(depth: Tensor, camera: Camera, valid: Tensor) -> tuple[Tensor, Tensor]:
    """Finite-difference normals of back-projected depth, oriented toward the
    camera. Returns (normals (H, W, 3), valid mask)."""
    pts = camera.back_project(depth)
    dx = pts[:, 1:, :] - pts[:, :-1, :]   # along columns
    dy = pts[1:, :, :] - pts[:-1, :, :]   # along rows
    n = torch.cross(dx[:-1, :, :], dy[:, :-1, :], dim=-1)
    nrm = torch.sqrt((n * n).sum(-1, keepdim=True) + 1e-24)
    n = n / nrm
    h, w = depth.shape
    out = torch.zeros(h, w, 3, dtype=depth.dtype, device=depth.device)
    out[:-1, :-1] = n
    ok = valid & (depth > 0)
    good = ok.clone()
    good[:-1, :-1] &= ok[:-1, 1:] & ok[1:, :-1] & (nrm[..., 0] > 1e-12)
    good[-1, :] = False
    good[:, -1] = False
    # orient toward the camera
    center = torch.as_tensor(camera.center, dtype=depth.dtype, device=depth.device)
    to_cam = center - pts
    flip = (out * to_cam).sum(-1, keepdim=True) < 0
    out = torch.where(flip, -out, out)
    return out, good


def normal_consistency_loss(
    normal_map: Tensor, depth_map: Tensor, camera: Camera, mask: Tensor,
    depth_valid: Optional[Tensor] = None,
) -> LossValue:
    """Mean (1 - n_hat . n_depth) between rendered normals and normals from
    the back-projected depth; degenerate neighborhoods are masked out."""
    valid = mask if depth_valid is None else (mask & depth_valid)
    n_d, good = depth_to_normal_map(depth_map, camera, valid)
    n_hat = normal_map / torch.sqrt((normal_map * normal_map).sum(-1, keepdim=True) + 1e-24)
    has_normal = (normal_map * normal_map).sum(-1) > 1e-12
    good = good & has_normal
    count = good.sum()
    if int(count) == 0:
        return LossValue(normal_map.sum() * 0.0, {"pixels": 0})
    dots = (n_hat * n_d).sum(-1)
    loss = ((1.0 - dots) * good.to(depth_map.dtype)).sum() / count.to(depth_map.dtype)
    return LossValue(loss, {"pixels": int(count)})


def normal_fm_loss(rendered_normal: Tensor, pseudo_normal: Tensor, mask: Tensor) -> LossValue:
    """Per-pixel component-sum L1 plus cosine distance against pseudo-GT
    normals; rendered normals are normalized first, zero-length ones are
    excluded and counted."""
    nsq = (rendered_normal * rendered_normal).sum(-1)
    has_normal = nsq > 1e-12
    valid = mask & has_normal
    excluded = int((mask & ~has_normal).sum())
    count = valid.sum()
    if int(count) == 0:
        return LossValue(rendered_normal.sum() * 0.0, {"excluded": excluded, "pixels": 0})
    n_hat = rendered_normal / torch.sqrt(nsq[..., None] + 1e-24)
    l1 = (n_hat - pseudo_normal).abs().sum(-1)
    cos = 1.0 - (n_hat * pseudo_normal).sum(-1)
    maskf = valid.to(rendered_normal.dtype)
    loss = ((l1 + cos) * maskf).sum() / count.to(rendered_normal.dtype)
    return LossValue(loss, {"excluded": excluded, "pixels": int(count)})


@dataclass
class ScaleShift:
    scale: float
    shift: float
    degenerate: bool


def solve_scale_shift(rendered_depth: Tensor, pseudo_depth: Tensor, mask: Tensor) -> ScaleShift:
    """Closed-form least squares of scale * rendered + shift ~= pseudo."""
    m = mask.to(rendered_depth.dtype)
    n = m.sum()
    if float(n) < 1:
        return ScaleShift(0.0, 0.0, True)
    d = rendered_depth.detach()
    t = pseudo_depth.detach()
    sd = (d * m).sum()
    sdd = (d * d * m).sum()
    st = (t * m).sum()
    sdt = (d * t * m).sum()
    det = n * sdd - sd * sd
    scale_ref = (sdd / n).clamp_min(1e-30)
    if float(det) <= 1e-12 * float(n * n * scale_ref):
        return ScaleShift(0.0, float(st / n), True)
    scale = (n * sdt - sd * st) / det
    shift = (st - scale * sd) / n
    return ScaleShift(float(scale), float(shift), False)


def depth_fm_loss(
    rendered_depth: Tensor, pseudo_depth: Tensor, mask: Tensor,
    differentiate_alignment: bool = False,
) -> LossValue:
    """Scale-invariant depth loss: squared residual after per-image affine
    alignment of the rendered depth.

    The alignment minimizes the same residual, so treating (scale, shift) as
    constants in the adjoint is exact by the envelope theorem; a flag keeps
    the full graph for study.
    """
    fit = solve_scale_shift(rendered_depth, pseudo_depth, mask)
    maskf = mask.to(rendered_depth.dtype)
    count = maskf.sum()
    if float(count) == 0:
        return LossValue(rendered_depth.sum() * 0.0, {"scale": 0.0, "shift": 0.0, "degenerate": True})
    if differentiate_alignment and not fit.degenerate:
        m = maskf
        n = count
        sd = (rendered_depth * m).sum()
        sdd = (rendered_depth * rendered_depth * m).sum()
        st = (pseudo_depth * m).sum()
        sdt = (rendered_depth * pseudo_depth * m).sum()
        det = n * sdd - sd * sd
        scale = (n * sdt - sd * st) / det
        shift = (st - scale * sd) / n
    else:
        scale = rendered_depth.new_tensor(fit.scale)
        shift = rendered_depth.new_tensor(fit.shift)
    res = (scale * rendered_depth + shift - pseudo_depth) ** 2
    loss = (res * maskf).sum() / count
    return LossValue(loss, {"scale": fit.scale, "shift": fit.shift, "degenerate": fit.degenerate})


def light_reg(cube_map: Tensor) -> LossValue:
    """Whiteness prior on the light: squared deviation of each texel from its
    own channel mean, averaged over texels (zero for any gray map)."""
    mean = cube_map.mean(dim=-1, keepdim=True)
    dev = cube_map - mean
    texels = cube_map.numel() // cube_map.shape[-1]
    loss = (dev * dev).sum() / texels
    return LossValue(loss, {})


def _forward_diff_l1(x: Tensor) -> Tensor:
    """Sum over channels of |forward differences|, zero-padded at the far
    edges; works for (H, W) and (H, W, C)."""
    if x.ndim == 2:
        x = x[..., None]
    gx = torch.zeros_like(x[..., 0])
    gy = torch.zeros_like(x[..., 0])
    gx[:, :-1] = (x[:, 1:] - x[:, :-1]).abs().sum(-1)
    gy[:-1, :] = (x[1:] - x[:-1]).abs().sum(-1)
    return gx + gy


def pbr_smoothness(attr_map: Tensor, reference: Tensor, mask: Tensor) -> LossValue:
    """Edge-aware total variation: attribute gradients are free where the
    reference image has edges, penalized in smooth regions."""
    g_attr = _forward_diff_l1(attr_map)
    g_ref = _forward_diff_l1(reference)
    maskf = mask.to(g_attr.dtype)
    count = maskf.sum()
    if float(count) == 0:
        return LossValue(attr_map.sum() * 0.0, {})
    loss = (g_attr * torch.exp(-g_ref) * maskf).sum() / count
    return LossValue(loss, {})


@dataclass
class LossReport:
    total: float
    rgb: float
    normal_consistency: float
    normal_fm: float
    depth_fm: float
    light_reg: float
    pbr_smooth: float
    depth_scale: float
    depth_shift: float
    stage: int
    total_tensor: Optional[Tensor] = None

    def to_record(self) -> dict:
        return {
            "stage": self.stage,
            "total": self.total,
            "rgb": self.rgb,
            "normal_consistency": self.normal_consistency,
            "normal_fm": self.normal_fm,
            "depth_fm": self.depth_fm,
            "light_reg": self.light_reg,
            "pbr_smooth": self.pbr_smooth,
            "depth_scale": self.depth_scale,
            "depth_shift": self.depth_shift,
        }


def total_loss(
    stage: int,
    color: Tensor,
    reference: Tensor,
    normal_map: Tensor,
    depth_map: Tensor,
    pseudo_normal: Tensor,
    pseudo_depth: Tensor,
    mask: Tensor,
    camera: Camera,
    config,
    cube_map: Optional[Tensor] = None,
    albedo_map: Optional[Tensor] = None,
    metallic_map: Optional[Tensor] = None,
    roughness_map: Optional[Tensor] = None,
    depth_valid: Optional[Tensor] = None,
    rgb_mask: Optional[Tensor] = None,
    enable_normal_consistency: bool = True,
) -> LossReport:
    """Weighted combination of every active term for the given stage.

    Stage 1 excludes the light and material regularizers (no PBR pipeline);
    stage 2 requires the cube map and attribute maps.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and cube_map is None:
        raise ValueError("stage 2 requires the environment cube map for its regularizer")

    rgb = rgb_loss(color, reference, rgb_mask if rgb_mask is not None else mask,
                   ssim_weight=config.ssim_weight, window=config.ssim_window)
    if enable_normal_consistency:
        nc = normal_consistency_loss(normal_map, depth_map, camera, mask, depth_valid)
    else:
        nc = LossValue(color.sum() * 0.0, {})
    nfm = normal_fm_loss(normal_map, pseudo_normal, mask)
    dfm = depth_fm_loss(depth_map, pseudo_depth, mask,
                        differentiate_alignment=config.differentiate_depth_alignment)

    total = (
        rgb.value
        + config.lambda_normal_consistency * nc.value
        + config.lambda_normal_fm * nfm.value
        + config.lambda_depth_fm * dfm.value
    )
    lr_val = 0.0
    pbr_val = 0.0
    if stage == 2:
        lr = light_reg(cube_map)
        total = total + config.lambda_light * lr.value
        lr_val = float(lr.value)
        pbr_terms = 0.0
        weighted = color.sum() * 0.0
        for attr, weight in (
            (albedo_map, config.lambda_albedo_smooth),
            (metallic_map, config.lambda_metallic_smooth),
            (roughness_map, config.lambda_roughness_smooth),
        ):
            if attr is None:
                continue
            term = pbr_smoothness(attr, reference, mask)
            weighted = weighted + weight * term.value
            pbr_terms += float(term.value)
        total = total + weighted
        pbr_val = pbr_terms
    return LossReport(
        total=float(total),
        rgb=float(rgb.value),
        normal_consistency=float(nc.value),
        normal_fm=float(nfm.value),
        depth_fm=float(dfm.value),
        light_reg=lr_val,
        pbr_smooth=pbr_val,
        depth_scale=dfm.aux.get("scale", 0.0),
        depth_shift=dfm.aux.get("shift", 0.0),
        stage=stage,
        total_tensor=total,
    )


def loss_adjoints(loss: Tensor, maps: list[Tensor], retain_graph: bool = False) -> list[Tensor]:
    """Adjoints of a scalar loss w.r.t. the given input maps."""
    grads = torch.autograd.grad(loss, maps, retain_graph=retain_graph, allow_unused=True)
    return [torch.zeros_like(m) if g is None else g for m, g in zip(maps, grads)]
