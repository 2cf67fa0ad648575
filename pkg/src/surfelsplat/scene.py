"""Core scene types: surfel clouds, cameras, environment lights, G-buffers.

A surfel is an oriented planar Gaussian disk living in a local tangent frame:
center ``x``, orthonormal tangents ``(t_u, t_v)``, per-axis standard deviations
``(s_u, s_v)``. Its normal is ``t_u x t_v``. Raw (unconstrained) parameters are
mapped to valid surfels through smooth activations: quaternion normalization
for the frame, ``exp`` for scales, ``sigmoid`` for opacity and material
channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
import torch
from torch import Tensor

# Real spherical harmonics constants, bands 0..3.
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
_SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

# Shading clamps roughness away from the degenerate mirror lobe.
ROUGHNESS_FLOOR = 0.04

_LOGIT_EPS = 1e-6


class SceneError(ValueError):
    """Raised for invalid scene inputs (non-finite parameters, bad cameras)."""


# torch's vectorized sigmoid/sqrt kernels round differently in the SIMD body
# and the scalar tail, so identical inputs can yield different bits depending
# on their position in a tensor. exp and log are position-stable, so the
# activations are built from those to keep renders bit-identical under splat
# permutation.


def stable_sigmoid(x: Tensor) -> Tensor:
    e = torch.exp(-x.abs())
    return torch.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def stable_sqrt(x: Tensor) -> Tensor:
    return torch.exp(0.5 * torch.log(x))


def stable_norm(x: Tensor, dim: int = -1, keepdim: bool = False, eps: float = 1e-24) -> Tensor:
    return stable_sqrt((x * x).sum(dim=dim, keepdim=keepdim) + eps)


def sigmoid_inverse(x: Tensor | float) -> Tensor:
    x = torch.as_tensor(x)
    x = x.clamp(_LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return torch.log(x) - torch.log1p(-x)


def quaternion_to_frame(q: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Rows of unit quaternions (..., 4) wxyz -> (t_u, t_v, n), each (..., 3).

    The tangents are the first two columns of the rotation matrix, the normal
    the third; the identity quaternion maps to the world axes.
    """
    q = q / stable_norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    t_u = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], dim=-1)
    t_v = torch.stack([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], dim=-1)
    n = torch.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return t_u, t_v, n


def frame_to_quaternion(t_u: Tensor, t_v: Tensor) -> Tensor:
    """Orthonormal tangents -> unit quaternion wxyz with w >= 0 (canonical sign)."""
    n = torch.cross(t_u, t_v, dim=-1)
    m = torch.stack([t_u, t_v, n], dim=-1)  # columns
    m = m.reshape(-1, 3, 3)
    out = torch.empty(m.shape[0], 4, dtype=m.dtype, device=m.device)
    for i in range(m.shape[0]):
        r = m[i]
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = torch.sqrt(tr + 1.0) * 2
            out[i] = torch.stack([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = torch.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            out[i] = torch.stack([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
        elif r[1, 1] > r[2, 2]:
            s = torch.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            out[i] = torch.stack([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
        else:
            s = torch.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            out[i] = torch.stack([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    sign = torch.where(out[:, :1] < 0, -torch.ones_like(out[:, :1]), torch.ones_like(out[:, :1]))
    out = out * sign
    out = out / out.norm(dim=-1, keepdim=True)
    return out.reshape(t_u.shape[:-1] + (4,))


def sh_band_count(degree: int) -> int:
    return (degree + 1) ** 2


def eval_sh(coeffs: Tensor, dirs: Tensor) -> Tensor:
    """Evaluate SH colors. coeffs (N, K, 3), dirs (N, 3) unit -> (N, 3).

    Returns the raw basis expansion; callers add the 0.5 offset and clamp.
    """
    n_coeffs = coeffs.shape[-2]
    result = _SH_C0 * coeffs[..., 0, :]
    if n_coeffs > 1:
        x, y, z = dirs[..., 0:1], dirs[..., 1:2], dirs[..., 2:3]
        result = result - _SH_C1 * y * coeffs[..., 1, :] + _SH_C1 * z * coeffs[..., 2, :] - _SH_C1 * x * coeffs[..., 3, :]
    if n_coeffs > 4:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        result = (
            result
            + _SH_C2[0] * xy * coeffs[..., 4, :]
            + _SH_C2[1] * yz * coeffs[..., 5, :]
            + _SH_C2[2] * (2.0 * zz - xx - yy) * coeffs[..., 6, :]
            + _SH_C2[3] * xz * coeffs[..., 7, :]
            + _SH_C2[4] * (xx - yy) * coeffs[..., 8, :]
        )
    if n_coeffs > 9:
        result = (
            result
            + _SH_C3[0] * y * (3 * xx - yy) * coeffs[..., 9, :]
            + _SH_C3[1] * xy * z * coeffs[..., 10, :]
            + _SH_C3[2] * y * (4 * zz - xx - yy) * coeffs[..., 11, :]
            + _SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * coeffs[..., 12, :]
            + _SH_C3[4] * x * (4 * zz - xx - yy) * coeffs[..., 13, :]
            + _SH_C3[5] * z * (xx - yy) * coeffs[..., 14, :]
            + _SH_C3[6] * x * (xx - 3 * yy) * coeffs[..., 15, :]
        )
    return result


def sh_to_color(coeffs: Tensor, dirs: Tensor, active_degree: Optional[int] = None) -> Tensor:
    """SH coefficients to clamped RGB along view directions."""
    if active_degree is not None:
        k = sh_band_count(active_degree)
        coeffs = coeffs[..., :k, :]
    return (eval_sh(coeffs, dirs) + 0.5).clamp_min(0.0)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera, OpenCV axes: x right, y down, z forward.

    ``world_to_camera`` is rigid; pixel (row i, col j) has its center at
    continuous coordinates (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (4, 4)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if self.width <= 0 or self.height <= 0:
            raise SceneError(f"camera resolution must be positive, got {self.width}x{self.height}")
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise SceneError(f"world_to_camera must be 4x4, got {w2c.shape}")
        r = w2c[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5) or np.linalg.det(r) < 0:
            raise SceneError("camera rotation is not a proper rotation (orthonormal, det +1)")
        object.__setattr__(self, "world_to_camera", w2c)

    @classmethod
    def from_camera_to_world(cls, fx, fy, cx, cy, width, height, camera_to_world) -> "Camera":
        c2w = np.asarray(camera_to_world, dtype=np.float64)
        return cls(fx, fy, cx, cy, width, height, np.linalg.inv(c2w))

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def pixel_directions(self, dtype=torch.float32, device="cpu") -> Tensor:
        """World-space ray directions through every pixel center, (H, W, 3).

        Directions are scaled so the camera-space z component is 1, making the
        ray parameter equal to camera-space depth.
        """
        jj = torch.arange(self.width, dtype=dtype, device=device) + 0.5
        ii = torch.arange(self.height, dtype=dtype, device=device) + 0.5
        vy, vx = torch.meshgrid(ii, jj, indexing="ij")
        d_cam = torch.stack([(vx - self.cx) / self.fx, (vy - self.cy) / self.fy, torch.ones_like(vx)], dim=-1)
        rot = torch.as_tensor(self.rotation, dtype=dtype, device=device)
        return d_cam @ rot  # R^T applied to rows

    def back_project(self, depth: Tensor) -> Tensor:
        """Depth map (H, W) of camera-space z -> world points (H, W, 3)."""
        dirs = self.pixel_directions(dtype=depth.dtype, device=depth.device)
        center = torch.as_tensor(self.center, dtype=depth.dtype, device=depth.device)
        return center + depth[..., None] * dirs

    def scaled(self, factor: float) -> "Camera":
        return Camera(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)), self.world_to_camera,
        )


def look_at_camera(eye, target, up, fx, fy, cx, cy, width, height) -> Camera:
    """Build a camera at ``eye`` looking toward ``target`` (z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:
        up = np.array([0.0, 0.0, 1.0]) if abs(forward[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        nrm = np.linalg.norm(right)
    right = right / nrm
    down = np.cross(forward, right)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([right, down, forward], axis=0)
    w2c[:3, 3] = -w2c[:3, :3] @ eye
    return Camera(fx, fy, cx, cy, width, height, w2c)


@dataclass(frozen=True)
class RawSplatParams:
    """Unconstrained parameters of a single surfel (pre-activation)."""

    position: Tensor        # (3,)
    quaternion: Tensor      # (4,) wxyz, any nonzero magnitude
    log_scale: Tensor       # (2,)
    opacity_logit: Tensor   # ()
    sh: Tensor              # (K, 3)
    albedo_logit: Tensor    # (3,)
    metallic_logit: Tensor  # ()
    roughness_logit: Tensor  # ()


@dataclass(frozen=True)
class SplatSurfel:
    """A single activated surfel; all constrained fields in valid ranges."""

    position: Tensor
    t_u: Tensor
    t_v: Tensor
    scale: Tensor
    opacity: Tensor
    sh: Tensor
    albedo: Tensor
    metallic: Tensor
    roughness: Tensor

    @property
    def normal(self) -> Tensor:
        return splat_normal(self)


def splat_normal(s: SplatSurfel) -> Tensor:
    """Surfel plane normal: cross product of the tangent axes."""
    return torch.cross(s.t_u, s.t_v, dim=-1)


def activate(raw: RawSplatParams) -> SplatSurfel:
    """Map unconstrained parameters to a valid surfel. Total and smooth."""
    for f in fields(raw):
        t = getattr(raw, f.name)
        if not torch.isfinite(torch.as_tensor(t)).all():
            raise SceneError(f"non-finite raw splat parameter: {f.name}")
    t_u, t_v, _ = quaternion_to_frame(raw.quaternion)
    return SplatSurfel(
        position=raw.position,
        t_u=t_u,
        t_v=t_v,
        scale=torch.exp(raw.log_scale),
        opacity=stable_sigmoid(raw.opacity_logit),
        sh=raw.sh,
        albedo=stable_sigmoid(raw.albedo_logit),
        metallic=stable_sigmoid(raw.metallic_logit),
        roughness=stable_sigmoid(raw.roughness_logit),
    )


def deactivate(s: SplatSurfel) -> RawSplatParams:
    """Inverse of :func:`activate` (canonical w >= 0 quaternion)."""
    return RawSplatParams(
        position=s.position,
        quaternion=frame_to_quaternion(s.t_u, s.t_v),
        log_scale=torch.log(s.scale),
        opacity_logit=sigmoid_inverse(s.opacity),
        sh=s.sh,
        albedo_logit=sigmoid_inverse(s.albedo),
        metallic_logit=sigmoid_inverse(s.metallic),
        roughness_logit=sigmoid_inverse(s.roughness),
    )


@dataclass
class ActivatedSplats:
    """Batched activated surfels (all tensors share the leading N)."""

    position: Tensor   # (N, 3)
    t_u: Tensor        # (N, 3)
    t_v: Tensor        # (N, 3)
    normal: Tensor     # (N, 3)
    scale: Tensor      # (N, 2)
    opacity: Tensor    # (N,)
    sh: Tensor         # (N, K, 3)
    albedo: Tensor     # (N, 3)
    metallic: Tensor   # (N,)
    roughness: Tensor  # (N,)

    def __len__(self) -> int:
        return self.position.shape[0]


PARAM_NAMES = (
    "positions",
    "quaternions",
    "log_scales",
    "opacity_logits",
    "sh_coeffs",
    "albedo_logits",
    "metallic_logits",
    "roughness_logits",
)


@dataclass
class SplatCloud:
    """The trainable cloud: batched raw parameters as flat torch tensors."""

    positions: Tensor         # (N, 3)
    quaternions: Tensor       # (N, 4)
    log_scales: Tensor        # (N, 2)
    opacity_logits: Tensor    # (N,)
    sh_coeffs: Tensor         # (N, K, 3)
    albedo_logits: Tensor     # (N, 3)
    metallic_logits: Tensor   # (N,)
    roughness_logits: Tensor  # (N,)

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (n, 3),
            "quaternions": (n, 4),
            "log_scales": (n, 2),
            "opacity_logits": (n,),
            "albedo_logits": (n, 3),
            "metallic_logits": (n,),
            "roughness_logits": (n,),
        }
        for name, shape in shapes.items():
            t = getattr(self, name)
            if tuple(t.shape) != shape:
                raise SceneError(f"{name} has shape {tuple(t.shape)}, expected {shape}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise SceneError(f"sh_coeffs must be (N, K, 3), got {tuple(self.sh_coeffs.shape)}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh_coeffs.shape[1]))) - 1

    @property
    def dtype(self) -> torch.dtype:
        return self.positions.dtype

    def parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def requires_grad_(self, flag: bool = True) -> "SplatCloud":
        for t in self.parameters().values():
            t.requires_grad_(flag)
        return self

    def detached(self) -> "SplatCloud":
        return SplatCloud(**{k: v.detach().clone() for k, v in self.parameters().items()})

    def to(self, dtype: torch.dtype) -> "SplatCloud":
        return SplatCloud(**{k: v.detach().to(dtype) for k, v in self.parameters().items()})

    def validate_finite(self):
        for name, t in self.parameters().items():
            if not torch.isfinite(t).all():
                raise SceneError(f"non-finite values in {name}")

    def activate(self) -> ActivatedSplats:
        self.validate_finite()
        t_u, t_v, normal = quaternion_to_frame(self.quaternions)
        return ActivatedSplats(
            position=self.positions,
            t_u=t_u,
            t_v=t_v,
            normal=normal,
            scale=torch.exp(self.log_scales),
            opacity=stable_sigmoid(self.opacity_logits),
            sh=self.sh_coeffs,
            albedo=stable_sigmoid(self.albedo_logits),
            metallic=stable_sigmoid(self.metallic_logits),
            roughness=stable_sigmoid(self.roughness_logits),
        )

    def select(self, index: Tensor) -> "SplatCloud":
        return SplatCloud(**{k: v.detach()[index].clone() for k, v in self.parameters().items()})

    @staticmethod
    def concatenate(a: "SplatCloud", b: "SplatCloud") -> "SplatCloud":
        return SplatCloud(**{
            k: torch.cat([av.detach(), getattr(b, k).detach()], dim=0)
            for k, av in a.parameters().items()
        })


@dataclass
class GBuffer:
    """Per-pixel composited geometry and material buffers.

    Attribute channels are stored premultiplied by alpha; ``alpha = 0`` pixels
    hold background sentinels (zeros). ``depth_valid`` flags pixels where the
    normalized-depth denominator was above its floor.
    """

    depth: Tensor      # (H, W)
    normal: Tensor     # (H, W, 3), alpha-weighted sum of unit normals
    albedo: Tensor     # (H, W, 3)
    metallic: Tensor   # (H, W)
    roughness: Tensor  # (H, W)
    alpha: Tensor      # (H, W)
    depth_valid: Tensor  # (H, W) bool

    @property
    def resolution(self) -> tuple[int, int]:
        return self.depth.shape[0], self.depth.shape[1]

    def world_positions(self, camera: Camera) -> Tensor:
        """Back-projected shading positions from the depth channel."""
        return camera.back_project(self.depth)


@dataclass
class TrainView:
    """One posed training view with foundation-model pseudo ground truth."""

    image: Tensor          # (H, W, 3) in [0, 1]
    mask: Tensor           # (H, W) bool
    pseudo_normal: Tensor  # (H, W, 3) world frame, unit on mask
    pseudo_depth: Tensor   # (H, W) positive on mask, affine-ambiguous
    camera: Camera
    name: str = ""


@dataclass
class TrainDataset:
    views: list[TrainView]
    scene_scale: float = 1.0
    background: str = "black"
    points: Optional[np.ndarray] = None  # (M, 3) optional seeding points
    point_colors: Optional[np.ndarray] = None  # (M, 3) in [0, 1]

    def __len__(self) -> int:
        return len(self.views)


@dataclass
class GradientSet:
    """Gradients of a scalar loss w.r.t. raw cloud parameters (and env texels)."""

    positions: Tensor
    quaternions: Tensor
    log_scales: Tensor
    opacity_logits: Tensor
    sh_coeffs: Tensor
    albedo_logits: Tensor
    metallic_logits: Tensor
    roughness_logits: Tensor
    env_raw: Optional[Tensor] = None

    def splat_items(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}
