"""Analytic toy scenes: a glossy sphere under a known HDR environment.

Ground-truth images come from exact ray-sphere intersection shaded by the
same split-sum model the system trains against, so the target is realizable;
pseudo depth/normal maps are exact analytic geometry written in the dataset's
storage conventions. Used by tests, the acceptance suite, and ``make-toy``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .cubemap import face_directions
from .dataio import (
    camera_to_json,
    save_image,
    save_mask,
    world_normals_to_stored,
    write_manifest,
)
from .scene import Camera, TrainDataset, TrainView, look_at_camera
from .shading import EnvironmentLight, ShadingSample, shade


@dataclass
class ToyMaterial:
    albedo: tuple[float, float, float] = (0.72, 0.45, 0.30)
    metallic: float = 0.3
    roughness: float = 0.25


def blob_env_values(dirs: Tensor) -> Tensor:
    """Analytic HDR environment: dim gray base plus two colored blobs."""
    d = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    c1 = torch.tensor([0.35, 0.80, 0.49], dtype=d.dtype)
    c1 = c1 / c1.norm()
    c2 = torch.tensor([-0.70, 0.25, -0.67], dtype=d.dtype)
    c2 = c2 / c2.norm()
    a1 = (d @ c1).clamp(-1, 1)
    a2 = (d @ c2).clamp(-1, 1)
    base = torch.full(d.shape[:-1] + (3,), 0.12, dtype=d.dtype)
    warm = torch.tensor([1.9, 1.4, 0.7], dtype=d.dtype)
    cool = torch.tensor([0.4, 0.7, 1.3], dtype=d.dtype)
    blob1 = torch.exp((a1 - 1.0) * 14.0)[..., None] * warm
    blob2 = torch.exp((a2 - 1.0) * 8.0)[..., None] * cool
    return base + blob1 + blob2


def toy_env_cube(resolution: int = 32, dtype=torch.float32) -> Tensor:
    return blob_env_values(face_directions(resolution, dtype=dtype))


def orbit_cameras(
    n_views: int,
    resolution: int = 128,
    distance: float = 3.0,
    center=(0.0, 0.0, 0.0),
    fov_deg: float = 40.0,
    elevations=(-25.0, 20.0),
) -> list[Camera]:
    """Cameras on interleaved elevation rings, all looking at the center."""
    focal = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2.0)
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(n_views):
        az = 2.0 * math.pi * i / n_views
        el = math.radians(elevations[i % len(elevations)])
        eye = center + distance * np.array(
            [math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)]
        )
        cams.append(
            look_at_camera(
                eye=eye, target=center, up=(0.0, 1.0, 0.0),
                fx=focal, fy=focal, cx=resolution / 2.0, cy=resolution / 2.0,
                width=resolution, height=resolution,
            )
        )
    return cams


def ray_sphere_depth(camera: Camera, center, radius: float, dtype=torch.float64):
    """Per-pixel camera-space depth of the first sphere hit (0 where missed)."""
    dirs = camera.pixel_directions(dtype=dtype)
    origin = torch.as_tensor(camera.center, dtype=dtype)
    c = torch.as_tensor(center, dtype=dtype)
    oc = origin - c
    a = (dirs * dirs).sum(-1)
    b = 2.0 * (dirs * oc).sum(-1)
    cc = (oc * oc).sum() - radius * radius
    disc = b * b - 4.0 * a * cc
    hit = disc > 0
    sqrt_disc = torch.sqrt(disc.clamp_min(0.0))
    t = (-b - sqrt_disc) / (2.0 * a)
    hit = hit & (t > 0)
    return torch.where(hit, t, torch.zeros_like(t)), hit, dirs, origin


def render_sphere_view(
    camera: Camera,
    env: EnvironmentLight,
    center=(0.0, 0.0, 0.0),
    radius: float = 1.0,
    material: ToyMaterial = ToyMaterial(),
    dtype=torch.float64,
):
    """Analytic ground-truth render; returns image, mask, depth, world normals."""
    depth, hit, dirs, origin = ray_sphere_depth(camera, center, radius, dtype)
    pts = origin + depth[..., None] * dirs
    c = torch.as_tensor(center, dtype=dtype)
    normal = (pts - c) / radius
    view = origin - pts
    view = view / view.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    h, w = depth.shape
    alb = torch.tensor(material.albedo, dtype=dtype).expand(h, w, 3)
    sample = ShadingSample(
        position=pts,
        normal=torch.where(hit[..., None], normal, torch.zeros_like(normal)),
        view_dir=view,
        albedo=alb,
        metallic=torch.full((h, w), material.metallic, dtype=dtype),
        roughness=torch.full((h, w), material.roughness, dtype=dtype),
    )
    radiance = shade(sample, env)
    image = torch.where(hit[..., None], radiance, torch.zeros_like(radiance))
    return {
        "image": image.clamp(0.0, 1.0),
        "radiance": image,
        "mask": hit,
        "depth": depth,
        "normal": torch.where(hit[..., None], normal, torch.zeros_like(normal)),
    }


@dataclass
class ToyScene:
    dataset: TrainDataset
    env_cube: Tensor
    center: tuple[float, float, float]
    radius: float
    material: ToyMaterial
    cameras: list[Camera] = field(default_factory=list)


def make_toy_scene(
    n_views: int = 16,
    resolution: int = 128,
    radius: float = 1.0,
    center=(0.0, 0.0, 0.0),
    material: ToyMaterial = ToyMaterial(),
    env_resolution: int = 32,
    lut_samples: int = 1024,
    dtype=torch.float32,
) -> ToyScene:
    """Build the in-memory toy dataset with exact pseudo ground truth."""
    cube = toy_env_cube(env_resolution, dtype=torch.float64)
    env = EnvironmentLight.from_cube_map(cube, lut_samples=lut_samples)
    cameras = orbit_cameras(n_views, resolution=resolution, distance=3.0 * radius, center=center)
    views = []
    for i, cam in enumerate(cameras):
        r = render_sphere_view(cam, env, center=center, radius=radius, material=material)
        # store through the dataset conventions (camera-frame, re-derived)
        stored = world_normals_to_stored(r["normal"].numpy(), cam)
        from .dataio import stored_normals_to_world

        world = stored_normals_to_world(
            stored / np.clip(np.linalg.norm(stored, axis=-1, keepdims=True), 1e-9, None), cam
        )
        views.append(
            TrainView(
                image=r["image"].to(dtype),
                mask=r["mask"],
                pseudo_normal=torch.from_numpy(world).to(dtype),
                pseudo_depth=r["depth"].to(dtype),
                camera=cam,
                name=f"view_{i:03d}",
            )
        )
    dataset = TrainDataset(views=views, scene_scale=1.5 * radius, background="black")
    return ToyScene(
        dataset=dataset,
        env_cube=cube.to(dtype),
        center=tuple(float(x) for x in np.asarray(center)),
        radius=radius,
        material=material,
        cameras=cameras,
    )


def write_toy_scene(
    out_dir: str | Path,
    n_views: int = 16,
    resolution: int = 128,
    radius: float = 1.0,
    material: ToyMaterial = ToyMaterial(),
    env_resolution: int = 32,
) -> Path:
    """Write the toy scene as a dataset directory; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("images", "masks", "depth", "normal"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cube = toy_env_cube(env_resolution, dtype=torch.float64)
    env = EnvironmentLight.from_cube_map(cube)
    cameras = orbit_cameras(n_views, resolution=resolution, distance=3.0 * radius)
    records = []
    for i, cam in enumerate(cameras):
        r = render_sphere_view(cam, env, radius=radius, material=material)
        name = f"view_{i:03d}"
        save_image(out / "images" / f"{name}.png", r["image"].numpy())
        save_mask(out / "masks" / f"{name}.png", r["mask"].numpy())
        np.save(out / "depth" / f"{name}.npy", r["depth"].numpy().astype(np.float32))
        stored = world_normals_to_stored(r["normal"].numpy().astype(np.float32), cam)
        np.save(out / "normal" / f"{name}.npy", stored)
        records.append(
            {
                "name": name,
                "image": f"images/{name}.png",
                "mask": f"masks/{name}.png",
                "depth": f"depth/{name}.npy",
                "normal": f"normal/{name}.npy",
                "camera": camera_to_json(cam),
            }
        )
    manifest = out / "manifest.json"
    write_manifest(manifest, records, scene_scale=1.5 * radius)
    np.save(out / "env_cube_gt.npy", cube.numpy().astype(np.float32))
    from .cubemap import cube_to_equirect, write_equirect_hdr

    write_equirect_hdr(out / "env_gt.hdr", cube_to_equirect(cube, 2 * env_resolution, 4 * env_resolution))
    return manifest


def sphere_mesh(center=(0.0, 0.0, 0.0), radius: float = 1.0, rings: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """UV-sphere triangulation for ground-truth comparisons."""
    center = np.asarray(center, dtype=np.float64)
    verts = []
    for i in range(rings + 1):
        theta = math.pi * i / rings
        for j in range(2 * rings):
            phi = 2.0 * math.pi * j / (2 * rings)
            verts.append(
                center
                + radius
                * np.array(
                    [math.sin(theta) * math.cos(phi), math.cos(theta), math.sin(theta) * math.sin(phi)]
                )
            )
    verts = np.asarray(verts)
    faces = []
    cols = 2 * rings
    for i in range(rings):
        for j in range(cols):
            a = i * cols + j
            b = i * cols + (j + 1) % cols
            c = (i + 1) * cols + j
            d = (i + 1) * cols + (j + 1) % cols
            if i > 0:
                faces.append([a, b, c])
            if i < rings - 1:
                faces.append([b, d, c])
    return verts.astype(np.float32), np.asarray(faces, dtype=np.int32)
