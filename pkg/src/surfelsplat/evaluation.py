"""Evaluation: mesh extraction via TSDF fusion, Chamfer distance, image metrics,
and relighting under novel environments."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .losses import ssim_map
from .rasterizer import RasterSettings, rasterize
from .scene import Camera, SplatCloud
from .shading import EnvironmentLight, shade_deferred


class EvaluationError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float32
    triangles: np.ndarray  # (F, 3) int32

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float32)
        f = np.asarray(self.triangles, dtype=np.int32)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise EvaluationError("triangle indices out of range")
        self.vertices = v
        self.triangles = f

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def drop_degenerate(self, eps: float = 0.0) -> "TriangleMesh":
        areas = self.triangle_areas()
        return TriangleMesh(self.vertices, self.triangles[areas > eps])


@dataclass
class TsdfVolume:
    """Truncated signed-distance grid with per-voxel fusion weights."""

    tsdf: np.ndarray     # (X, Y, Z) in [-1, 1]
    weights: np.ndarray  # (X, Y, Z) >= 0
    origin: np.ndarray   # (3,)
    voxel_size: float
    truncation: float

    @classmethod
    def empty(cls, origin, shape, voxel_size: float, truncation: float) -> "TsdfVolume":
        return cls(
            tsdf=np.ones(shape, dtype=np.float32),
            weights=np.zeros(shape, dtype=np.float32),
            origin=np.asarray(origin, dtype=np.float64),
            voxel_size=float(voxel_size),
            truncation=float(truncation),
        )

    def voxel_centers(self) -> torch.Tensor:
        xs = [torch.arange(n, dtype=torch.float64) for n in self.tsdf.shape]
        gx, gy, gz = torch.meshgrid(*xs, indexing="ij")
        pts = torch.stack([gx, gy, gz], dim=-1) + 0.5
        return torch.as_tensor(self.origin) + pts * self.voxel_size

    def integrate(self, depth: Tensor, alpha: Tensor, camera: Camera, alpha_threshold: float = 0.5):
        """Weighted TSDF averaging of one rendered depth map."""
        pts = self.voxel_centers().reshape(-1, 3)
        rot = torch.as_tensor(camera.rotation, dtype=torch.float64)
        tv = torch.as_tensor(camera.translation, dtype=torch.float64)
        cam_pts = pts @ rot.T + tv
        z = cam_pts[:, 2]
        u = camera.fx * cam_pts[:, 0] / z.clamp_min(1e-9) + camera.cx
        v = camera.fy * cam_pts[:, 1] / z.clamp_min(1e-9) + camera.cy
        ui = u.floor().long()
        vi = v.floor().long()
        h, w = depth.shape
        valid = (z > 1e-6) & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        ui = ui.clamp(0, w - 1)
        vi = vi.clamp(0, h - 1)
        d = depth.to(torch.float64).reshape(-1)[vi * w + ui]
        a = alpha.to(torch.float64).reshape(-1)[vi * w + ui]
        valid &= (a > alpha_threshold) & (d > 0)
        sdf = d - z
        valid &= sdf > -self.truncation
        tsdf_new = (sdf / self.truncation).clamp(-1.0, 1.0)
        idx = valid.numpy()
        flat_tsdf = self.tsdf.reshape(-1)
        flat_w = self.weights.reshape(-1)
        tn = tsdf_new.numpy()[idx].astype(np.float32)
        w_old = flat_w[idx]
        flat_tsdf[idx] = (flat_tsdf[idx] * w_old + tn) / (w_old + 1.0)
        flat_w[idx] = w_old + 1.0


def extract_mesh(
    cloud: SplatCloud,
    cameras: list[Camera],
    voxel_size: Optional[float] = None,
    truncation_voxels: float = 4.0,
    settings: RasterSettings = RasterSettings(),
    alpha_threshold: float = 0.5,
    grid_padding: float = 0.05,
) -> TriangleMesh:
    """Fuse rendered depth maps into a TSDF and run marching cubes."""
    if len(cameras) == 0:
        raise EvaluationError("mesh extraction needs at least one camera")
    with torch.no_grad():
        pos = cloud.positions.detach()
        lo = pos.min(dim=0).values.numpy().astype(np.float64)
        hi = pos.max(dim=0).values.numpy().astype(np.float64)
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise EvaluationError("degenerate cloud bounds")
    pad = grid_padding * extent
    lo = lo - pad
    hi = hi + pad
    if voxel_size is None:
        voxel_size = float(np.max(hi - lo)) / 256.0
    shape = tuple(int(math.ceil(s / voxel_size)) for s in (hi - lo))
    vol = TsdfVolume.empty(lo, shape, voxel_size, truncation_voxels * voxel_size)
    any_depth = False
    with torch.no_grad():
        for cam in cameras:
            out = rasterize(cloud, cam, settings=settings)
            d = out.gbuffer.depth
            a = out.gbuffer.alpha
            if bool((a > alpha_threshold).any()):
                any_depth = True
            vol.integrate(d, a, cam, alpha_threshold)
    if not any_depth or not (vol.weights > 0).any():
        raise EvaluationError("TSDF fusion saw no valid depth")

    from skimage.measure import marching_cubes

    mask = vol.weights > 0
    try:
        verts, faces, _, _ = marching_cubes(vol.tsdf, level=0.0, mask=mask)
    except (ValueError, RuntimeError) as e:
        raise EvaluationError(f"marching cubes found no surface: {e}")
    world = vol.origin[None, :] + (verts + 0.5) * vol.voxel_size
    return TriangleMesh(world.astype(np.float32), faces.astype(np.int32)).drop_degenerate()


def sample_mesh_surface(mesh: TriangleMesh, count: int, seed: int = 0) -> np.ndarray:
    """Uniform-area point samples on the mesh surface."""
    if len(mesh.triangles) == 0:
        raise EvaluationError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise EvaluationError("mesh has zero surface area")
    rng = np.random.RandomState(seed)
    choice = rng.choice(len(areas), size=count, p=areas / total)
    a = mesh.vertices[mesh.triangles[choice, 0]]
    b = mesh.vertices[mesh.triangles[choice, 1]]
    c = mesh.vertices[mesh.triangles[choice, 2]]
    r1 = np.sqrt(rng.rand(count, 1))
    r2 = rng.rand(count, 1)
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c


def chamfer_l1(mesh_a: TriangleMesh, mesh_b: TriangleMesh, sample_count: int = 100_000,
               seed: int = 0) -> float:
    """Symmetric mean nearest-neighbor distance between surface samples."""
    if len(mesh_a.triangles) == 0 or len(mesh_b.triangles) == 0:
        raise EvaluationError("chamfer distance needs non-empty meshes")
    pa = sample_mesh_surface(mesh_a, sample_count, seed)
    pb = sample_mesh_surface(mesh_b, sample_count, seed + 1)
    return chamfer_points(pa, pb)


def chamfer_points(pa: np.ndarray, pb: np.ndarray) -> float:
    from scipy.spatial import cKDTree

    da, _ = cKDTree(pb).query(pa, k=1)
    db, _ = cKDTree(pa).query(pb, k=1)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def psnr(image_a: Tensor, image_b: Tensor, mask: Optional[Tensor] = None,
         ceiling: float = 100.0) -> float:
    """10 log10(1 / MSE) over masked pixels, capped for identical images."""
    if image_a.shape != image_b.shape:
        raise EvaluationError("image shapes differ")
    if mask is None:
        mask = torch.ones(image_a.shape[:2], dtype=torch.bool)
    if int(mask.sum()) == 0:
        raise EvaluationError("psnr: empty mask")
    diff = (image_a.to(torch.float64) - image_b.to(torch.float64)) ** 2
    if diff.ndim == 3:
        diff = diff.mean(dim=-1)
    mse = float(diff[mask].mean())
    if mse <= 10 ** (-ceiling / 10.0):
        return ceiling
    return 10.0 * math.log10(1.0 / mse)


def ssim(image_a: Tensor, image_b: Tensor, window: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over valid windows (unit dynamic range)."""
    try:
        smap = ssim_map(image_a.to(torch.float64), image_b.to(torch.float64), window, sigma)
    except ValueError as e:
        raise EvaluationError(str(e))
    return float(smap.mean())


def relight(
    cloud: SplatCloud,
    env: EnvironmentLight,
    cameras: list[Camera],
    settings: RasterSettings = RasterSettings(),
    background="black",
) -> list[Tensor]:
    """Re-render fixed geometry/materials under a new light (deferred path)."""
    images = []
    with torch.no_grad():
        for cam in cameras:
            out = rasterize(cloud, cam, settings=settings)
            images.append(shade_deferred(out.gbuffer, cam, env, background=background))
    return images
