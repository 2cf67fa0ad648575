"""Differentiable tile-based rasterizer for 2D Gaussian surfels.

Geometry path: for every pixel ray the surfel plane is intersected exactly in
its local tangent frame (no projected-ellipse approximation), giving local
coordinates (u, v), a Gaussian weight exp(-(u^2 + v^2) / 2), and the hit's
camera-space depth. The weight is low-pass filtered by taking the max with a
small screen-space Gaussian around the projected center so splats never fall
below a pixel footprint.

Compositing per pixel, over fragments sorted by splat *center* depth (ties
broken by splat index):

    w_i   = opacity_i * filtered_weight_i
    T_i   = prod_{j<i} (1 - w_j)
    color = sum c_i w_i T_i + background * T_final
    alpha = sum w_i T_i
    depth = sum d_i w_i T_i / alpha            (clamped denominator, flagged)

Attribute channels (albedo, metallic, roughness) composite like color. The
normal channel uses opacity-only transmittance (no filter) by default; a
settings switch restores the filtered weights. Fragments with w below
``weight_cutoff`` are culled and accumulation stops once transmittance falls
under ``transmittance_floor``; both rules are part of the compositing
semantics and are mirrored by the brute-force reference in the tests.

Everything runs inside autograd, so the backward pass is the exact adjoint of
the forward math. Tiling is purely an engineering layout; per-tile work is
batched into padded (tiles, pixels, fragments) tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .scene import (
    ActivatedSplats,
    Camera,
    GBuffer,
    GradientSet,
    SceneError,
    SplatCloud,
    SplatSurfel,
    sh_to_color,
    stable_norm,
)


class RasterStateError(RuntimeError):
    """Raised when backward is requested without retained forward state."""


@dataclass(frozen=True)
class RasterSettings:
    near: float = 0.01
    tile_size: int = 16
    weight_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    screen_sigma: float = math.sqrt(2.0) / 2.0
    cull_sigma: float = 3.5
    normal_uses_filter: bool = False
    depth_denom_floor: float = 1e-8
    parallel_eps: float = 1e-12
    max_chunk_elems: int = 2_000_000
    active_sh_degree: Optional[int] = None


DEFAULT_SETTINGS = RasterSettings()


@dataclass
class SplatFragment:
    """A single ray-surfel interaction (scalar reference path)."""

    splat_index: int
    uv: Tensor            # (2,) local tangent coordinates
    depth: Tensor         # camera-space z of the hit
    screen_delta: Tensor  # (2,) pixel offset to the projected center
    weight: Tensor        # filtered Gaussian value


def ray_splat_intersect(
    camera: Camera,
    pixel: tuple[float, float],
    surfel: SplatSurfel,
    near: float = DEFAULT_SETTINGS.near,
    screen_sigma: float = DEFAULT_SETTINGS.screen_sigma,
    splat_index: int = 0,
) -> Optional[SplatFragment]:
    """Intersect one pixel ray with one surfel plane.

    ``pixel`` is continuous image coordinates (integer + 0.5 at centers).
    Returns ``None`` when the ray is parallel to the plane or the hit lies at
    or behind the near plane.
    """
    dtype = surfel.position.dtype
    rot = torch.as_tensor(camera.rotation, dtype=dtype)
    origin = torch.as_tensor(camera.center, dtype=dtype)
    d_cam = torch.tensor(
        [(pixel[0] - camera.cx) / camera.fx, (pixel[1] - camera.cy) / camera.fy, 1.0], dtype=dtype
    )
    d_world = rot.T @ d_cam
    normal = surfel.normal
    denom = d_world @ normal
    if torch.abs(denom) <= DEFAULT_SETTINGS.parallel_eps:
        return None
    tau = ((surfel.position - origin) @ normal) / denom
    if tau <= near:
        return None
    hit = origin + tau * d_world
    offset = hit - surfel.position
    uv = torch.stack([(offset @ surfel.t_u) / surfel.scale[0], (offset @ surfel.t_v) / surfel.scale[1]])
    p_cam = rot @ surfel.position + torch.as_tensor(camera.translation, dtype=dtype)
    mean2d = torch.stack(
        [camera.fx * p_cam[0] / p_cam[2] + camera.cx, camera.fy * p_cam[1] / p_cam[2] + camera.cy]
    )
    delta = torch.tensor([pixel[0], pixel[1]], dtype=dtype) - mean2d
    frag = SplatFragment(splat_index=splat_index, uv=uv, depth=tau, screen_delta=delta, weight=uv.new_zeros(()))
    frag.weight = splat_weight(frag, screen_sigma=screen_sigma)
    return frag


def splat_weight(frag: SplatFragment, screen_sigma: float = DEFAULT_SETTINGS.screen_sigma) -> Tensor:
    """Filtered Gaussian value: max of the tangent-space Gaussian and a
    fixed-width screen-space Gaussian at the projected center."""
    g_obj = torch.exp(-0.5 * (frag.uv * frag.uv).sum())
    d2 = (frag.screen_delta * frag.screen_delta).sum()
    g_scr = torch.exp(-0.5 * d2 / (screen_sigma * screen_sigma))
    return torch.maximum(g_obj, g_scr)


@dataclass
class RenderOutput:
    color: Tensor    # (H, W, 3)
    gbuffer: GBuffer
    visible: Tensor       # (N,) bool, splat contributed at least one pair
    center_depth: Tensor  # (N,) camera-space z of splat centers (detached)
    camera: Camera
    cloud: Optional[SplatCloud] = None

    @property
    def maps(self) -> dict[str, Tensor]:
        g = self.gbuffer
        return {
            "color": self.color,
            "normal": g.normal,
            "depth": g.depth,
            "alpha": g.alpha,
            "albedo": g.albedo,
            "metallic": g.metallic,
            "roughness": g.roughness,
        }


def _exclusive_cumprod(x: Tensor, dim: int) -> Tensor:
    ones = torch.ones_like(x.narrow(dim, 0, 1))
    return torch.cumprod(torch.cat([ones, x.narrow(dim, 0, x.shape[dim] - 1)], dim=dim), dim=dim)


def _empty_output(camera: Camera, background: Tensor, cloud: SplatCloud, n: int) -> RenderOutput:
    h, w = camera.height, camera.width
    dtype = background.dtype
    zeros1 = torch.zeros(h, w, dtype=dtype)
    gb = GBuffer(
        depth=zeros1.clone(),
        normal=torch.zeros(h, w, 3, dtype=dtype),
        albedo=torch.zeros(h, w, 3, dtype=dtype),
        metallic=zeros1.clone(),
        roughness=zeros1.clone(),
        alpha=zeros1.clone(),
        depth_valid=torch.zeros(h, w, dtype=torch.bool),
    )
    color = background.expand(h, w, 3).clone()
    return RenderOutput(
        color=color,
        gbuffer=gb,
        visible=torch.zeros(n, dtype=torch.bool),
        center_depth=torch.zeros(n, dtype=dtype),
        camera=camera,
        cloud=cloud,
    )


def rasterize(
    cloud: SplatCloud,
    camera: Camera,
    background=(0.0, 0.0, 0.0),
    settings: RasterSettings = DEFAULT_SETTINGS,
    splat_colors: Optional[Tensor] = None,
    activated: Optional[ActivatedSplats] = None,
) -> RenderOutput:
    """Render the cloud into color and G-buffer maps (differentiable).

    ``splat_colors`` overrides the per-splat color (used by forward shading);
    otherwise colors come from the spherical harmonics along the view ray to
    each splat center.
    """
    if camera.width <= 0 or camera.height <= 0:
        raise SceneError("camera has zero resolution")
    dtype = cloud.dtype
    bg = torch.as_tensor(background, dtype=dtype)
    if bg.shape != (3,):
        raise SceneError(f"background must be RGB, got shape {tuple(bg.shape)}")
    n = len(cloud)
    if n == 0:
        return _empty_output(camera, bg, cloud, n)

    act = activated if activated is not None else cloud.activate()
    rot = torch.as_tensor(camera.rotation, dtype=dtype)
    tvec = torch.as_tensor(camera.translation, dtype=dtype)
    origin = torch.as_tensor(camera.center, dtype=dtype)
    h, w = camera.height, camera.width
    ts = settings.tile_size

    p_cam = act.position @ rot.T + tvec
    z = p_cam[:, 2]
    in_front = z > settings.near

    # Orient normals toward the camera (pure sign flip, no gradient kink).
    facing = ((origin - act.position) * act.normal).sum(-1, keepdim=True)
    n_or = torch.where(facing >= 0, act.normal, -act.normal)

    if splat_colors is None:
        view = act.position - origin
        view = view / stable_norm(view, dim=-1, keepdim=True)
        colors = sh_to_color(act.sh, view, settings.active_sh_degree)
    else:
        colors = splat_colors

    zs = z.detach()
    mean2d = torch.stack(
        [camera.fx * p_cam[:, 0] / p_cam[:, 2].clamp_min(settings.near) + camera.cx,
         camera.fy * p_cam[:, 1] / p_cam[:, 2].clamp_min(settings.near) + camera.cy],
        dim=-1,
    )

    # Conservative pixel bounds from the axis-aligned box around the surfel's
    # bounding sphere (radius cull_sigma * max scale), plus the filter margin.
    with torch.no_grad():
        r_w = settings.cull_sigma * act.scale.max(dim=-1).values
        margin = 3.5 * settings.screen_sigma + 0.5
        x_lo, x_hi = p_cam[:, 0] - r_w, p_cam[:, 0] + r_w
        y_lo, y_hi = p_cam[:, 1] - r_w, p_cam[:, 1] + r_w
        z_lo = (zs - r_w).clamp_min(settings.near)
        z_hi = zs + r_w

        def _extent(lo, hi, f, c):
            cands = torch.stack([lo / z_lo, lo / z_hi, hi / z_lo, hi / z_hi])
            return f * cands.min(0).values + c - margin, f * cands.max(0).values + c + margin

        u_min, u_max = _extent(x_lo, x_hi, camera.fx, camera.cx)
        v_min, v_max = _extent(y_lo, y_hi, camera.fy, camera.cy)

        overlap = (u_max > 0) & (u_min < w) & (v_max > 0) & (v_min < h)
        alive = in_front.detach() & overlap & (act.opacity.detach() >= settings.weight_cutoff)
        idx_alive = torch.nonzero(alive, as_tuple=False).squeeze(-1)

    if idx_alive.numel() == 0:
        out = _empty_output(camera, bg, cloud, n)
        # Keep the graph alive for backward even with nothing visible.
        out.color = out.color + colors.sum() * 0.0
        return out

    n_tx = (w + ts - 1) // ts
    n_ty = (h + ts - 1) // ts
    with torch.no_grad():
        tx0 = (u_min[idx_alive] / ts).floor().clamp(0, n_tx - 1).long()
        tx1 = (u_max[idx_alive] / ts).floor().clamp(0, n_tx - 1).long()
        ty0 = (v_min[idx_alive] / ts).floor().clamp(0, n_ty - 1).long()
        ty1 = (v_max[idx_alive] / ts).floor().clamp(0, n_ty - 1).long()
        counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
        total = int(counts.sum())
        pair_splat = torch.repeat_interleave(idx_alive, counts)
        offsets = torch.cumsum(counts, 0) - counts
        k = torch.arange(total) - torch.repeat_interleave(offsets, counts)
        wt = torch.repeat_interleave(tx1 - tx0 + 1, counts)
        pair_tx = torch.repeat_interleave(tx0, counts) + k % wt
        pair_ty = torch.repeat_interleave(ty0, counts) + k // wt
        pair_tile = pair_ty * n_tx + pair_tx

        order = np.lexsort(
            (pair_splat.numpy(), zs[pair_splat].to(torch.float64).numpy(), pair_tile.numpy())
        )
        order = torch.from_numpy(order)
        pair_splat = pair_splat[order]
        pair_tile = pair_tile[order]

        tiles_u, tile_counts = torch.unique_consecutive(pair_tile, return_counts=True)
        tile_starts = torch.cumsum(tile_counts, 0) - tile_counts
        # Batch tiles with similar fragment counts to bound padding waste.
        count_order = torch.argsort(tile_counts, descending=True, stable=True)

    visible = torch.zeros(n, dtype=torch.bool)
    visible[pair_splat] = True

    p_px = ts * ts
    # packed per-pixel accumulators: 8 channels + normal(3) + alpha + depth
    # + final transmittance (defaults to 1 on untouched pixels)
    flat = torch.zeros(h * w, 14, dtype=dtype)
    flat[:, 13] = 1.0

    # Per-splat channel matrix shared by all chunks.
    chans = torch.cat(
        [colors, act.albedo, act.metallic[:, None], act.roughness[:, None]], dim=-1
    )

    local = torch.arange(p_px)
    local_xy = torch.stack([(local % ts).to(dtype) + 0.5, (local // ts).to(dtype) + 0.5], dim=-1)

    pos = 0
    n_tiles_total = int(tiles_u.numel())
    while pos < n_tiles_total:
        k_max = int(tile_counts[count_order[pos]])
        budget = max(1, settings.max_chunk_elems // (p_px * max(k_max, 1)))
        chunk = count_order[pos: pos + budget]
        pos += budget
        c = chunk.numel()
        cnt = tile_counts[chunk]
        starts = tile_starts[chunk]
        k_max = int(cnt.max())

        cols = torch.arange(k_max)
        frag_valid = cols[None, :] < cnt[:, None]
        src = (starts[:, None] + cols[None, :]).clamp_max(total - 1)
        sidx = pair_splat[src]  # (C, K) splat ids, pad entries harmless

        tile_ids = tiles_u[chunk]
        ox = (tile_ids % n_tx) * ts
        oy = (tile_ids // n_tx) * ts
        px = ox[:, None].to(dtype) + local_xy[None, :, 0]
        py = oy[:, None].to(dtype) + local_xy[None, :, 1]
        pix_valid = (px < w) & (py < h)

        d_cam = torch.stack(
            [(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, torch.ones_like(px)], dim=-1
        )
        d_world = d_cam @ rot  # (C, P, 3) = R^T applied to rows

        g_pos = act.position[sidx]        # (C, K, 3)
        g_n = act.normal[sidx]
        g_tu = act.t_u[sidx]
        g_tv = act.t_v[sidx]
        g_scale = act.scale[sidx]
        g_op = act.opacity[sidx]
        g_m2d = mean2d[sidx]
        g_zc = z[sidx]

        denom = torch.matmul(d_world, g_n.transpose(1, 2))  # (C, P, K)
        po = g_pos - origin
        po_n = (po * g_n).sum(-1)  # (C, K)
        not_parallel = denom.abs() > settings.parallel_eps
        denom_safe = torch.where(not_parallel, denom, torch.full_like(denom, 1.0))
        tau = po_n[:, None, :] / denom_safe
        hit_ok = not_parallel & (tau > settings.near)

        d_tu = torch.matmul(d_world, g_tu.transpose(1, 2))
        d_tv = torch.matmul(d_world, g_tv.transpose(1, 2))
        po_tu = (po * g_tu).sum(-1)
        po_tv = (po * g_tv).sum(-1)
        u_loc = (tau * d_tu - po_tu[:, None, :]) / g_scale[:, None, :, 0]
        v_loc = (tau * d_tv - po_tv[:, None, :]) / g_scale[:, None, :, 1]
        arg_obj = torch.where(hit_ok, -0.5 * (u_loc * u_loc + v_loc * v_loc),
                              torch.full_like(tau, -torch.inf))

        dx = px[:, :, None] - g_m2d[:, None, :, 0]
        dy = py[:, :, None] - g_m2d[:, None, :, 1]
        inv_two_sigma2 = 0.5 / (settings.screen_sigma * settings.screen_sigma)
        arg_scr = -(dx * dx + dy * dy) * inv_two_sigma2

        # max(exp(a), exp(b)) = exp(max(a, b)): one transcendental per fragment
        g_hat = torch.exp(torch.maximum(arg_obj, arg_scr))
        w_raw = g_op[:, None, :] * g_hat
        keep = (w_raw >= settings.weight_cutoff) & frag_valid[:, None, :] & pix_valid[:, :, None]
        w_eff = w_raw * keep

        trans = _exclusive_cumprod(1.0 - w_eff, dim=2)
        active = trans > settings.transmittance_floor
        contrib = w_eff * trans * active

        alpha_px = contrib.sum(-1)
        t_final = torch.where(active, 1.0 - w_eff, torch.ones_like(w_eff)).prod(-1)

        frag_depth = torch.where(arg_obj >= arg_scr, tau, g_zc[:, None, :])
        depth_px = (contrib * frag_depth).sum(-1)

        ch_px = torch.matmul(contrib, chans[sidx])  # (C, P, 8)

        if settings.normal_uses_filter:
            wn_eff = w_eff
        else:
            wn_eff = g_op[:, None, :] * keep
        trans_n = _exclusive_cumprod(1.0 - wn_eff, dim=2)
        contrib_n = wn_eff * trans_n * (trans_n > settings.transmittance_floor)
        nrm_px = torch.matmul(contrib_n, n_or[sidx])

        packed = torch.cat(
            [ch_px, nrm_px, alpha_px[..., None], depth_px[..., None], t_final[..., None]],
            dim=-1,
        )
        fidx = (py.long() * w + px.long()).clamp(0, h * w - 1)
        sel = pix_valid.reshape(-1)
        fidx = fidx.reshape(-1)[sel]
        flat = flat.index_put((fidx,), packed.reshape(-1, 14)[sel])

    color = flat[:, 0:3] + bg[None, :] * flat[:, 13:14]
    alpha_map = flat[:, 11].reshape(h, w)
    depth_valid = alpha_map > settings.depth_denom_floor
    depth_map = torch.where(
        depth_valid,
        flat[:, 12].reshape(h, w) / alpha_map.clamp_min(settings.depth_denom_floor),
        torch.zeros_like(alpha_map),
    )
    gb = GBuffer(
        depth=depth_map,
        normal=flat[:, 8:11].reshape(h, w, 3),
        albedo=flat[:, 3:6].reshape(h, w, 3),
        metallic=flat[:, 6].reshape(h, w),
        roughness=flat[:, 7].reshape(h, w),
        alpha=alpha_map,
        depth_valid=depth_valid,
    )
    return RenderOutput(
        color=color.reshape(h, w, 3),
        gbuffer=gb,
        visible=visible,
        center_depth=zs,
        camera=camera,
        cloud=cloud,
    )


def rasterize_backward(
    output: RenderOutput,
    adjoints: dict[str, Tensor],
    retain_graph: bool = False,
) -> GradientSet:
    """Chain-rule the adjoint maps back to the raw cloud parameters.

    ``adjoints`` maps output names (color, normal, depth, alpha, albedo,
    metallic, roughness) to tensors of the same shape; omitted maps are
    treated as zero. Gradients accumulate additively across pixels.
    """
    if output.cloud is None:
        raise RasterStateError("render output does not reference its source cloud")
    maps = output.maps
    unknown = set(adjoints) - set(maps)
    if unknown:
        raise ValueError(f"unknown adjoint maps: {sorted(unknown)}")
    outs, grads = [], []
    for name, adj in adjoints.items():
        m = maps[name]
        if adj.shape != m.shape:
            raise ValueError(f"adjoint '{name}' has shape {tuple(adj.shape)}, expected {tuple(m.shape)}")
        if not torch.isfinite(adj).all():
            raise ValueError(f"adjoint '{name}' contains non-finite values")
        outs.append(m)
        grads.append(adj.to(m.dtype))
    params = output.cloud.parameters()
    leaves = [t for t in params.values() if t.requires_grad]
    if not leaves:
        raise RasterStateError("cloud parameters do not require grad; no forward state retained")
    if not outs or all(m.grad_fn is None for m in outs):
        raise RasterStateError("forward state missing: outputs are not attached to an autograd graph")
    computed = torch.autograd.grad(
        outs, leaves, grad_outputs=grads, retain_graph=retain_graph, allow_unused=True
    )
    it = iter(computed)
    result = {}
    for name, t in params.items():
        if t.requires_grad:
            g = next(it)
            result[name] = torch.zeros_like(t) if g is None else g
        else:
            result[name] = torch.zeros_like(t)
    return GradientSet(**result)


def screen_space_gradient(
    position_grad: Tensor, center_depth: Tensor, camera: Camera, ndc_units: bool = True
) -> Tensor:
    """Convert world-space center gradients to screen-space magnitudes, (N,).

    Used as the densification signal: the gradient w.r.t. the projected
    center position, in NDC units when ``ndc_units`` (half-image-per-unit).
    """
    rot = torch.as_tensor(camera.rotation, dtype=position_grad.dtype)
    g_cam = position_grad @ rot.T
    zf = center_depth.clamp_min(1e-6)
    gx = g_cam[:, 0] * zf / camera.fx
    gy = g_cam[:, 1] * zf / camera.fy
    if ndc_units:
        gx = gx * (camera.width / 2.0)
        gy = gy * (camera.height / 2.0)
    return torch.sqrt(gx * gx + gy * gy)
