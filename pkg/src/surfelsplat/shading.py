"""Image-based shading of surfels against a trainable HDR cube map.

The specular environment integral is factored into a prefiltered radiance
lookup times a pre-integrated environment BRDF (scale/bias) term; the diffuse
integral is a cosine convolution baked into an irradiance map. Both
prefilters are linear in the cube map texels, so gradients flow to the light
through fixed quadrature weights. Microfacet model: GGX distribution,
height-correlated Smith visibility, Schlick Fresnel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from .cubemap import face_directions, resample_cubemap, sample_cubemap, texel_solid_angles
from .scene import Camera, GBuffer, ROUGHNESS_FLOOR, SceneError

_weight_cache: dict[tuple, Tensor] = {}


def clear_prefilter_cache():
    _weight_cache.clear()


@dataclass
class ShadingSample:
    """Batched shading inputs; normal and view_dir unit length."""

    position: Tensor   # (..., 3) world
    normal: Tensor     # (..., 3)
    view_dir: Tensor   # (..., 3) toward the camera
    albedo: Tensor     # (..., 3)
    metallic: Tensor   # (...,)
    roughness: Tensor  # (...,) clamped to [ROUGHNESS_FLOOR, 1] at use


def _diffuse_weights(res_in: int, res_out: int, dtype, device) -> Tensor:
    key = ("diff", res_in, res_out, dtype, str(device))
    w = _weight_cache.get(key)
    if w is None:
        din = face_directions(res_in, dtype=dtype, device=device).reshape(-1, 3)
        omega = texel_solid_angles(res_in, dtype=dtype, device=device).reshape(-1).repeat(6)
        dout = face_directions(res_out, dtype=dtype, device=device).reshape(-1, 3)
        cos = (dout @ din.T).clamp_min(0.0)
        w = cos * omega[None, :] / math.pi
        _weight_cache[key] = w
    return w


def prefilter_diffuse(cube: Tensor, res_out: Optional[int] = None) -> Tensor:
    """Cosine-convolved irradiance map, (6, Ro, Ro, C); linear in ``cube``.

    Per output direction n this is (1/pi) * sum_t L_t max(d_t . n, 0) w_t over
    all texels, so a constant map stays constant up to quadrature error.
    """
    res_in = cube.shape[1]
    res_out = res_out or res_in
    w = _diffuse_weights(res_in, res_out, cube.dtype, cube.device)
    out = w @ cube.reshape(-1, cube.shape[-1])
    return out.reshape(6, res_out, res_out, cube.shape[-1])


def _ggx_ndf(cos_h: Tensor, alpha: float | Tensor) -> Tensor:
    a2 = alpha * alpha
    d = cos_h * cos_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * d * d)


def _specular_weights(res_in: int, res_out: int, roughness: float, dtype, device) -> Tensor:
    key = ("spec", res_in, res_out, round(roughness, 6), dtype, str(device))
    w = _weight_cache.get(key)
    if w is None:
        # The GGX kernel varies quickly across a texel, so it is integrated
        # over each input texel footprint with a 2x2 subsample before pooling
        # back to the texel grid (radiance is piecewise constant per texel).
        res2 = 2 * res_in
        din = face_directions(res2, dtype=dtype, device=device).reshape(-1, 3)
        omega = texel_solid_angles(res2, dtype=dtype, device=device).reshape(-1).repeat(6)
        dout = face_directions(res_out, dtype=dtype, device=device).reshape(-1, 3)
        n_out = dout.shape[0]
        alpha = max(roughness * roughness, 1e-4)
        k = torch.empty(n_out, 6 * res_in * res_in, dtype=dtype, device=device)
        step = max(1, 4_000_000 // din.shape[0])
        for s in range(0, n_out, step):
            mu = (dout[s: s + step] @ din.T).clamp(-1.0, 1.0)
            # Kernel over light directions for the n = v = r convention:
            # D(h) with h . n = sqrt((1 + mu) / 2), weighted by n . l = mu.
            cos_h = torch.sqrt(((1.0 + mu) * 0.5).clamp_min(0.0))
            k2 = _ggx_ndf(cos_h, alpha) * mu.clamp_min(0.0) * omega[None, :]
            k[s: s + step] = (
                k2.reshape(-1, 6, res_in, 2, res_in, 2)
                .sum(dim=(3, 5))
                .reshape(-1, 6 * res_in * res_in)
            )
        w = k / k.sum(dim=1, keepdim=True).clamp_min(1e-20)
        _weight_cache[key] = w
    return w


@dataclass
class SpecularMips:
    """Roughness-indexed prefiltered radiance chain."""

    levels: list[Tensor]        # each (6, Rk, Rk, C)
    roughnesses: list[float]    # ascending, [0, 1]

    def lookup(self, dirs: Tensor, roughness: Tensor) -> Tensor:
        """Trilinear lookup: bilinear per level, linear across the roughness
        axis in lobe-width units (alpha = roughness^2), which keeps
        near-mirror queries from over-blending the next, much wider level."""
        n_levels = len(self.levels)
        rho = roughness.clamp(0.0, 1.0)
        alpha = rho * rho
        lo_rho = alpha.detach().sqrt() * (n_levels - 1)
        lo = lo_rho.floor().long().clamp(0, n_levels - 2) if n_levels > 1 else torch.zeros_like(rho).long()
        a_lo = (lo.to(rho.dtype) / (n_levels - 1)) ** 2
        a_hi = ((lo.to(rho.dtype) + 1.0) / (n_levels - 1)) ** 2
        t = ((alpha - a_lo) / (a_hi - a_lo)).clamp(0.0, 1.0)[..., None]
        out = None
        # Gather per-level contributions only where used, keeping autograd intact.
        for k in range(n_levels):
            sel_lo = lo == k
            sel_hi = (lo + 1) == k
            if not bool(sel_lo.any() or sel_hi.any()):
                continue
            vals = sample_cubemap(self.levels[k], dirs)
            contrib = torch.zeros_like(vals)
            if bool(sel_lo.any()):
                contrib = contrib + vals * (1.0 - t) * sel_lo[..., None]
            if bool(sel_hi.any()):
                contrib = contrib + vals * t * sel_hi[..., None]
            out = contrib if out is None else out + contrib
        return out


def prefilter_specular(cube: Tensor, levels: int, base_res: Optional[int] = None) -> SpecularMips:
    """Prefilter ``cube`` into a roughness chain. Level k targets roughness
    k / (levels - 1); level 0 is the (resampled) input itself."""
    if levels < 2:
        raise ValueError("specular prefilter needs at least 2 levels")
    res_in = cube.shape[1]
    base_res = base_res or res_in
    outs = [resample_cubemap(cube, base_res)]
    rhos = [0.0]
    flat = cube.reshape(-1, cube.shape[-1])
    res_floor = min(base_res, 8)
    for k in range(1, levels):
        rho = k / (levels - 1)
        res_k = max(base_res // (2 ** k), res_floor)
        w = _specular_weights(res_in, res_k, rho, cube.dtype, cube.device)
        outs.append((w @ flat).reshape(6, res_k, res_k, cube.shape[-1]))
        rhos.append(rho)
    return SpecularMips(levels=outs, roughnesses=rhos)


def _hammersley(n: int, dtype, device) -> Tensor:
    i = torch.arange(n, dtype=torch.int64, device=device)
    bits = i.clone()
    rev = torch.zeros_like(bits)
    for _ in range(32):
        rev = (rev << 1) | (bits & 1)
        bits >>= 1
    u2 = rev.to(dtype) * 2.3283064365386963e-10
    u1 = i.to(dtype) / n
    return torch.stack([u1, u2], dim=-1)


def _smith_ggx_correlated(n_dot_v: Tensor, n_dot_l: Tensor, alpha: Tensor | float) -> Tensor:
    a2 = alpha * alpha
    lv = n_dot_l * torch.sqrt((n_dot_v * n_dot_v * (1.0 - a2) + a2).clamp_min(1e-16))
    ll = n_dot_v * torch.sqrt((n_dot_l * n_dot_l * (1.0 - a2) + a2).clamp_min(1e-16))
    return 0.5 / (lv + ll).clamp_min(1e-16)


def integrate_env_brdf(n_dot_v: Tensor, roughness: Tensor, samples: int = 1024) -> tuple[Tensor, Tensor]:
    """Pre-integrated environment BRDF (scale A, bias B) by quasi-random GGX
    importance sampling. Broadcasts over the inputs."""
    dtype = n_dot_v.dtype
    device = n_dot_v.device
    n_dot_v = n_dot_v.clamp(1e-4, 1.0)[..., None]
    alpha = (roughness * roughness).clamp_min(1e-8)[..., None]
    xi = _hammersley(samples, dtype, device)
    phi = 2.0 * math.pi * xi[:, 0]
    cos_t = torch.sqrt((1.0 - xi[:, 1]) / (1.0 + (alpha * alpha - 1.0) * xi[:, 1]))
    sin_t = torch.sqrt((1.0 - cos_t * cos_t).clamp_min(0.0))
    hx = torch.cos(phi) * sin_t
    hy = torch.sin(phi) * sin_t
    hz = cos_t
    vx = torch.sqrt((1.0 - n_dot_v * n_dot_v).clamp_min(0.0))
    vz = n_dot_v
    v_dot_h = (vx * hx + vz * hz).clamp_min(0.0)
    lz = 2.0 * v_dot_h * hz - vz  # n . l for l = reflect(-v, h)
    valid = lz > 0
    vis = _smith_ggx_correlated(vz, lz.clamp_min(0.0), alpha)
    # f * n.l / pdf with pdf_l = D * n.h / (4 v.h) reduces to 4 V n.l v.h / n.h
    g_vis = 4.0 * vis * lz.clamp_min(0.0) * v_dot_h / hz.clamp_min(1e-8)
    g_vis = torch.where(valid, g_vis, torch.zeros_like(g_vis))
    fc = (1.0 - v_dot_h) ** 5
    a = ((1.0 - fc) * g_vis).mean(dim=-1)
    b = (fc * g_vis).mean(dim=-1)
    return a, b


@dataclass
class BrdfLut:
    """2D table over (n . v, roughness) holding the split specular scale/bias."""

    table: Tensor  # (res_v, res_r, 2)
    rough_min: float = ROUGHNESS_FLOOR

    @property
    def resolution(self) -> int:
        return self.table.shape[0]

    def lookup(self, n_dot_v: Tensor, roughness: Tensor) -> tuple[Tensor, Tensor]:
        res_v, res_r = self.table.shape[0], self.table.shape[1]
        x = (n_dot_v.clamp(0.0, 1.0) * res_v - 0.5).clamp(0.0, res_v - 1.0)
        rn = (roughness.clamp(self.rough_min, 1.0) - self.rough_min) / (1.0 - self.rough_min)
        y = (rn * res_r - 0.5).clamp(0.0, res_r - 1.0)
        x0 = x.detach().floor().long().clamp(0, res_v - 2)
        y0 = y.detach().floor().long().clamp(0, res_r - 2)
        tx = (x - x0).clamp(0.0, 1.0)[..., None]
        ty = (y - y0).clamp(0.0, 1.0)[..., None]
        c00 = self.table[x0, y0]
        c01 = self.table[x0, y0 + 1]
        c10 = self.table[x0 + 1, y0]
        c11 = self.table[x0 + 1, y0 + 1]
        out = (c00 * (1 - tx) + c10 * tx) * (1 - ty) + (c01 * (1 - tx) + c11 * tx) * ty
        return out[..., 0], out[..., 1]


def compute_brdf_lut(resolution: int = 64, samples: int = 1024, dtype=torch.float64) -> BrdfLut:
    """Tabulate the environment BRDF at cell centers; clamped into the
    energy-conserving region A, B >= 0, A + B <= 1."""
    nv = (torch.arange(resolution, dtype=dtype) + 0.5) / resolution
    rr = ROUGHNESS_FLOOR + (1.0 - ROUGHNESS_FLOOR) * (torch.arange(resolution, dtype=dtype) + 0.5) / resolution
    nv_g, rr_g = torch.meshgrid(nv, rr, indexing="ij")
    a, b = integrate_env_brdf(nv_g.reshape(-1), rr_g.reshape(-1), samples=samples)
    a = a.clamp(0.0, 1.0)
    b = torch.minimum(b.clamp_min(0.0), 1.0 - a)
    table = torch.stack([a, b], dim=-1).reshape(resolution, resolution, 2)
    return BrdfLut(table=table)


_lut_cache: dict[tuple, BrdfLut] = {}


def default_brdf_lut(resolution: int = 64, samples: int = 1024, dtype=torch.float64) -> BrdfLut:
    key = (resolution, samples, dtype)
    lut = _lut_cache.get(key)
    if lut is None:
        lut = compute_brdf_lut(resolution, samples, dtype)
        _lut_cache[key] = lut
    return lut


@dataclass
class EnvironmentLight:
    """HDR cube map light with its derived shading tables."""

    cube_map: Tensor            # (6, R, R, 3), radiance >= 0
    irradiance: Tensor          # (6, Ri, Ri, 3)
    specular: SpecularMips
    brdf_lut: BrdfLut

    @classmethod
    def from_cube_map(
        cls,
        cube: Tensor,
        levels: int = 6,
        irradiance_res: int = 16,
        lut: Optional[BrdfLut] = None,
        lut_resolution: int = 64,
        lut_samples: int = 1024,
    ) -> "EnvironmentLight":
        if lut is None:
            lut = default_brdf_lut(lut_resolution, lut_samples, torch.float64)
        if lut.table.dtype != cube.dtype or lut.table.device != cube.device:
            lut = BrdfLut(lut.table.to(dtype=cube.dtype, device=cube.device), lut.rough_min)
        return cls(
            cube_map=cube,
            irradiance=prefilter_diffuse(cube, min(irradiance_res, cube.shape[1])),
            specular=prefilter_specular(cube, levels),
            brdf_lut=lut,
        )

    @classmethod
    def constant(cls, value, resolution: int = 32, dtype=torch.float32, **kw) -> "EnvironmentLight":
        value = torch.as_tensor(value, dtype=dtype)
        cube = value.expand(6, resolution, resolution, 3).clone()
        return cls.from_cube_map(cube, **kw)

    @property
    def resolution(self) -> int:
        return self.cube_map.shape[1]


class TrainableEnvironment:
    """Softplus-parameterized cube map so radiance stays positive and smooth.

    The derived maps are rebuilt from the raw texels every optimizer step;
    gradients flow only to ``raw``.
    """

    def __init__(self, raw: Tensor, levels: int = 6, irradiance_res: int = 16,
                 lut_resolution: int = 64, lut_samples: int = 1024):
        self.raw = raw
        self.levels = levels
        self.irradiance_res = irradiance_res
        self.lut_resolution = lut_resolution
        self.lut_samples = lut_samples

    @classmethod
    def constant(cls, value: float, resolution: int = 32, dtype=torch.float32, **kw) -> "TrainableEnvironment":
        raw_val = math.log(math.expm1(max(value, 1e-6)))
        raw = torch.full((6, resolution, resolution, 3), raw_val, dtype=dtype)
        return cls(raw, **kw)

    def cube_map(self) -> Tensor:
        return torch.nn.functional.softplus(self.raw)

    def build(self) -> EnvironmentLight:
        return EnvironmentLight.from_cube_map(
            self.cube_map(),
            levels=self.levels,
            irradiance_res=self.irradiance_res,
            lut_resolution=self.lut_resolution,
            lut_samples=self.lut_samples,
        )


def env_backward(outputs: Tensor | list[Tensor], adjoints: Tensor | list[Tensor],
                 env: EnvironmentLight, retain_graph: bool = False) -> Tensor:
    """Chain-rule adjoint color maps back to the cube map texels."""
    outs = outputs if isinstance(outputs, (list, tuple)) else [outputs]
    adjs = adjoints if isinstance(adjoints, (list, tuple)) else [adjoints]
    for o, a in zip(outs, adjs):
        if a.shape != o.shape:
            raise ValueError(f"adjoint shape {tuple(a.shape)} does not match output {tuple(o.shape)}")
    if all(o.grad_fn is None for o in outs):
        raise RuntimeError("forward shading state missing: outputs not attached to a graph")
    (grad,) = torch.autograd.grad(
        outs, [env.cube_map], grad_outputs=list(adjs), retain_graph=retain_graph, allow_unused=True
    )
    return torch.zeros_like(env.cube_map) if grad is None else grad


def reflect(view_dir: Tensor, normal: Tensor) -> Tensor:
    """Mirror the incoming direction -view_dir about ``normal``."""
    return 2.0 * (normal * view_dir).sum(-1, keepdim=True) * normal - view_dir


def shade(sample: ShadingSample, env: EnvironmentLight, split: bool = False):
    """Split-sum radiance for every sample point, (..., 3) >= 0.

    diffuse = (1 - m) * albedo * E(n)        (1/pi folded into E)
    specular = prefiltered(reflect, rho) * (F0 * A + B), F0 = mix(0.04, albedo, m)
    """
    rho = sample.roughness.clamp(ROUGHNESS_FLOOR, 1.0)
    n = sample.normal
    v = sample.view_dir
    irr = sample_cubemap(env.irradiance, n)
    m = sample.metallic[..., None]
    diffuse = (1.0 - m) * sample.albedo * irr
    r = reflect(v, n)
    pre = env.specular.lookup(r, rho)
    n_dot_v = (n * v).sum(-1).clamp(1e-4, 1.0)
    a, b = env.brdf_lut.lookup(n_dot_v, rho)
    f0 = 0.04 * (1.0 - m) + sample.albedo * m
    specular = pre * (f0 * a[..., None] + b[..., None])
    if split:
        return diffuse, specular
    return diffuse + specular


def shade_forward(cloud, camera: Camera, env: EnvironmentLight,
                  background: Tensor | str = "black", settings=None):
    """Per-splat shading composited by alpha blending (ablation path).

    Each surfel is shaded once at its own center with its own normal, then the
    radiances are blended exactly like colors. Exists to compare against the
    single-shading-point deferred path.
    """
    from .rasterizer import DEFAULT_SETTINGS, rasterize
    from .scene import stable_norm

    settings = settings or DEFAULT_SETTINGS
    act = cloud.activate()
    dtype = cloud.dtype
    origin = torch.as_tensor(camera.center, dtype=dtype)
    to_cam = origin - act.position
    view = to_cam / stable_norm(to_cam, dim=-1, keepdim=True)
    facing = (view * act.normal).sum(-1, keepdim=True)
    n_or = torch.where(facing >= 0, act.normal, -act.normal)
    sample = ShadingSample(
        position=act.position,
        normal=n_or,
        view_dir=view,
        albedo=act.albedo,
        metallic=act.metallic,
        roughness=act.roughness.clamp(ROUGHNESS_FLOOR, 1.0),
    )
    radiance = shade(sample, env)
    bg = background
    if isinstance(bg, str):
        if bg == "env":
            raise ValueError("forward shading supports tensor or black backgrounds")
        bg = torch.zeros(3, dtype=dtype)
    return rasterize(cloud, camera, background=bg, settings=settings,
                     splat_colors=radiance, activated=act)


def shade_deferred(
    gbuffer: GBuffer,
    camera: Camera,
    env: EnvironmentLight,
    background: Tensor | str = "black",
) -> Tensor:
    """Shade each covered pixel once from the composited buffers.

    Premultiplied attribute channels are divided by alpha so the shading
    inputs are coverage-independent; the result is re-composited as
    ``shade * alpha + background * (1 - alpha)``. ``background`` is an RGB
    tensor, "black", or "env" (cube lookup along the pixel ray).
    """
    h, w = gbuffer.resolution
    if (camera.height, camera.width) != (h, w):
        raise SceneError(
            f"gbuffer resolution {h}x{w} does not match camera {camera.height}x{camera.width}"
        )
    alpha = gbuffer.alpha
    dtype = alpha.dtype
    device = alpha.device
    safe_alpha = alpha.clamp_min(1e-8)
    nrm = gbuffer.normal
    # sqrt(sumsq + eps) keeps the backward finite on zero-normal background px
    n = nrm / torch.sqrt((nrm * nrm).sum(-1, keepdim=True) + 1e-24)
    pos = gbuffer.world_positions(camera)
    cam_center = torch.as_tensor(camera.center, dtype=dtype, device=device)
    view = cam_center - pos
    view = view / torch.sqrt((view * view).sum(-1, keepdim=True) + 1e-24)
    sample = ShadingSample(
        position=pos,
        normal=n,
        view_dir=view,
        albedo=gbuffer.albedo / safe_alpha[..., None],
        metallic=gbuffer.metallic / safe_alpha,
        roughness=(gbuffer.roughness / safe_alpha).clamp(ROUGHNESS_FLOOR, 1.0),
    )
    radiance = shade(sample, env)
    covered = (alpha > 0.0)[..., None]
    radiance = torch.where(covered, radiance, torch.zeros_like(radiance))
    if isinstance(background, str) and background == "env":
        dirs = camera.pixel_directions(dtype=dtype, device=device)
        bg = sample_cubemap(env.cube_map, dirs / dirs.norm(dim=-1, keepdim=True))
    elif isinstance(background, str):
        if background != "black":
            raise ValueError(f"unknown background mode: {background}")
        bg = torch.zeros(3, dtype=dtype, device=device).expand(h, w, 3)
    else:
        bg = torch.as_tensor(background, dtype=dtype, device=device).expand(h, w, 3)
    return radiance * alpha[..., None] + bg * (1.0 - alpha[..., None])
