"""Dataset manifests, image codecs, and validation.

A manifest is a JSON document with a per-view list:

    {
      "scene_scale": 1.0,
      "background": "black",
      "points": "init_points.ply",            # optional splat seeding
      "views": [
        {
          "name": "view_000",
          "image": "images/view_000.png",     # LDR RGB in [0, 1]
          "mask": "masks/view_000.png",       # binary foreground
          "depth": "depth/view_000.npy",      # float (H, W), or 16-bit PNG
          "normal": "normal/view_000.npy",    # float (H, W, 3) or 8-bit RGB
          "depth_scale": 1.0,                 # only for 16-bit depth
          "camera": {
            "width": 128, "height": 128,
            "fx": 140.0, "fy": 140.0, "cx": 64.0, "cy": 64.0,
            "camera_to_world": [[...], [...], [...], [...]]
          }
        }
      ]
    }

Cameras use OpenCV axes (x right, y down, z forward). Stored normal maps are
in the camera frame with x right, y up, z toward the camera; loading converts
them to world space. 8-bit normal images decode via v = 2 p / 255 - 1 and are
renormalized; 16-bit depth scales by ``depth_scale``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .scene import Camera, SceneError, TrainDataset, TrainView


class DatasetError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("dataset validation failed:\n" + "\n".join(f"  - {e}" for e in errors))
        self.errors = errors


def load_image(path: Path) -> np.ndarray:
    """LDR image file -> float32 RGB (H, W, 3) in [0, 1]."""
    if path.suffix.lower() == ".npy":
        arr = np.load(path).astype(np.float32)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        return arr[..., :3]
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(path: Path, image: np.ndarray):
    """float RGB in [0, 1] -> 8-bit image file (or raw .npy)."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        np.save(path, image.astype(np.float32))
        return
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_mask(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        return np.load(path).astype(bool)
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 127


def save_mask(path: Path, mask: np.ndarray):
    path = Path(path)
    if path.suffix.lower() == ".npy":
        np.save(path, mask.astype(bool))
        return
    Image.fromarray((mask.astype(np.uint8)) * 255).save(path)


def load_depth(path: Path, depth_scale: float = 1.0) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        return np.load(path).astype(np.float32)
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) * depth_scale
    raise DatasetError([f"depth must be .npy float or 16-bit image: {path}"])


def load_normal_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (camera-frame unit normals (H, W, 3), raw norms pre-renormalization)."""
    if path.suffix.lower() == ".npy":
        arr = np.load(path).astype(np.float32)
    else:
        with Image.open(path) as img:
            raw = np.asarray(img.convert("RGB"), dtype=np.float32)
        arr = 2.0 * raw / 255.0 - 1.0
    norms = np.linalg.norm(arr, axis=-1)
    unit = arr / np.clip(norms[..., None], 1e-9, None)
    return unit, norms


# Stored normal maps: x right, y up, z toward camera. Our camera frame:
# x right, y down, z forward. Conversion flips y and z.
_STORED_TO_CAMERA = np.diag([1.0, -1.0, -1.0]).astype(np.float32)


def stored_normals_to_world(stored: np.ndarray, camera: Camera) -> np.ndarray:
    cam_frame = stored @ _STORED_TO_CAMERA.T
    return cam_frame @ camera.rotation.astype(stored.dtype)  # rows: R^T n


def world_normals_to_stored(world: np.ndarray, camera: Camera) -> np.ndarray:
    cam_frame = world @ camera.rotation.T.astype(world.dtype)
    return cam_frame @ _STORED_TO_CAMERA.T


def camera_from_json(d: dict) -> Camera:
    required = {"width", "height", "fx", "fy", "cx", "cy"}
    missing = required - set(d)
    if missing:
        raise SceneError(f"camera record missing keys: {sorted(missing)}")
    if "camera_to_world" in d:
        return Camera.from_camera_to_world(
            d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
            np.asarray(d["camera_to_world"], dtype=np.float64),
        )
    if "world_to_camera" in d:
        return Camera(
            d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
            np.asarray(d["world_to_camera"], dtype=np.float64),
        )
    raise SceneError("camera record needs camera_to_world or world_to_camera")


def camera_to_json(cam: Camera) -> dict:
    return {
        "width": cam.width,
        "height": cam.height,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "world_to_camera": cam.world_to_camera.tolist(),
    }


def _load_view(root: Path, record: dict, index: int, dtype) -> TrainView:
    name = record.get("name", f"view_{index:03d}")

    def resolve(key):
        if key not in record:
            raise SceneError(f"view {name}: missing '{key}' entry")
        p = root / record[key]
        if not p.exists():
            raise SceneError(f"view {name}: missing file {p}")
        return p

    camera = camera_from_json(record.get("camera", {}))
    h, w = camera.height, camera.width
    image = load_image(resolve("image"))
    if image.shape[:2] != (h, w):
        raise SceneError(f"view {name}: image is {image.shape[1]}x{image.shape[0]}, camera says {w}x{h}")
    mask = load_mask(resolve("mask"))
    if mask.shape != (h, w):
        raise SceneError(f"view {name}: mask resolution mismatch")
    depth = load_depth(resolve("depth"), float(record.get("depth_scale", 1.0)))
    if depth.shape != (h, w):
        raise SceneError(f"view {name}: depth resolution mismatch")
    stored, raw_norms = load_normal_file(resolve("normal"))
    if stored.shape != (h, w, 3):
        raise SceneError(f"view {name}: normal resolution mismatch")
    masked = mask & np.isfinite(raw_norms)
    if masked.any():
        # loose bound on the stored magnitudes: catches wrong encodings while
        # allowing 8-bit quantization; vectors are renormalized on decode
        dev = np.abs(raw_norms[masked] - 1.0)
        if float(dev.max()) > 0.05:
            raise SceneError(f"view {name}: stored normals are not unit length (max dev {dev.max():.3f})")
        bad_depth = ~np.isfinite(depth[mask]) | (depth[mask] <= 0)
        if bad_depth.any():
            raise SceneError(f"view {name}: pseudo depth must be finite and positive on masked pixels")
    world_normals = stored_normals_to_world(stored, camera)
    return TrainView(
        image=torch.from_numpy(np.ascontiguousarray(image)).to(dtype),
        mask=torch.from_numpy(np.ascontiguousarray(mask)),
        pseudo_normal=torch.from_numpy(np.ascontiguousarray(world_normals)).to(dtype),
        pseudo_depth=torch.from_numpy(np.ascontiguousarray(depth)).to(dtype),
        camera=camera,
        name=name,
    )


def load_dataset(manifest_path: str | Path, dtype=torch.float32, workers: int = 8) -> TrainDataset:
    """Load and validate every view; errors are collected per view and raised
    together as a :class:`DatasetError` naming the offenders."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError([f"cannot read manifest {manifest_path}: {e}"])
    root = manifest_path.parent
    records = manifest.get("views", [])
    if not records:
        raise DatasetError(["manifest has no views"])

    views: list[Optional[TrainView]] = [None] * len(records)
    errors: list[str] = []

    def work(i):
        return i, _load_view(root, records[i], i, dtype)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for fut in [pool.submit(work, i) for i in range(len(records))]:
            try:
                i, view = fut.result()
                views[i] = view
            except (SceneError, DatasetError, OSError, ValueError) as e:
                errors.append(str(e))
    if errors:
        raise DatasetError(sorted(errors))

    points = None
    colors = None
    if "points" in manifest:
        ppath = root / manifest["points"]
        if not ppath.exists():
            raise DatasetError([f"points file missing: {ppath}"])
        pts = np.load(ppath) if ppath.suffix == ".npy" else None
        if pts is None:
            from .plyio import load_mesh

            pts, _ = load_mesh(ppath)
        points = np.asarray(pts, dtype=np.float32)

    return TrainDataset(
        views=[v for v in views if v is not None],
        scene_scale=float(manifest.get("scene_scale", 1.0)),
        background=manifest.get("background", "black"),
        points=points,
        point_colors=colors,
    )


def write_manifest(path: str | Path, views: list[dict], scene_scale: float = 1.0,
                   background: str = "black", points: Optional[str] = None):
    doc = {"scene_scale": scene_scale, "background": background, "views": views}
    if points is not None:
        doc["points"] = points
    Path(path).write_text(json.dumps(doc, indent=2))
