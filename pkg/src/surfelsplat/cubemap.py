"""Cube map utilities: directions, solid angles, sampling, equirect I/O.

Maps are tensors of shape (6, R, R, C). Faces are ordered +X, -X, +Y, -Y,
+Z, -Z. For a face texel at row i, col j let ``a = 2 (j + 0.5) / R - 1`` and
``b = 2 (i + 0.5) / R - 1``; the (unnormalized) direction per face is

    +X: ( 1, -b, -a)   -X: (-1, -b,  a)
    +Y: ( a,  1,  b)   -Y: ( a, -1, -b)
    +Z: ( a, -b,  1)   -Z: (-a, -b, -1)

Equirectangular images use +Y up: row v in [0, 1] maps to polar angle
``theta = pi v`` from +Y, column u to azimuth ``phi = 2 pi u - pi`` with
direction (sin theta sin phi, cos theta, -sin theta cos phi).
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import Tensor


def _face_axes(dtype, device):
    # forward, a-axis, b-axis per face (direction = forward + a * ax + b * bx)
    table = [
        ((1, 0, 0), (0, 0, -1), (0, -1, 0)),
        ((-1, 0, 0), (0, 0, 1), (0, -1, 0)),
        ((0, 1, 0), (1, 0, 0), (0, 0, 1)),
        ((0, -1, 0), (1, 0, 0), (0, 0, -1)),
        ((0, 0, 1), (1, 0, 0), (0, -1, 0)),
        ((0, 0, -1), (-1, 0, 0), (0, -1, 0)),
    ]
    t = torch.tensor(table, dtype=dtype, device=device)
    return t[:, 0], t[:, 1], t[:, 2]


def face_directions(res: int, dtype=torch.float64, device="cpu") -> Tensor:
    """Unit direction of every texel center, shape (6, R, R, 3)."""
    step = torch.arange(res, dtype=dtype, device=device)
    a = 2.0 * (step + 0.5) / res - 1.0
    bb, aa = torch.meshgrid(a, a, indexing="ij")  # bb over rows, aa over cols
    fwd, ax, bx = _face_axes(dtype, device)
    dirs = (
        fwd[:, None, None, :]
        + aa[None, :, :, None] * ax[:, None, None, :]
        + bb[None, :, :, None] * bx[:, None, None, :]
    )
    return dirs / dirs.norm(dim=-1, keepdim=True)


def texel_solid_angles(res: int, dtype=torch.float64, device="cpu") -> Tensor:
    """Exact solid angle of each texel on one face, shape (R, R); identical
    across faces. Sums to 4*pi/6 per face."""
    edges = 2.0 * torch.arange(res + 1, dtype=dtype, device=device) / res - 1.0

    def gamma(a, b):
        return torch.atan2(a * b, torch.sqrt(a * a + b * b + 1.0))

    a0, a1 = edges[:-1], edges[1:]
    ga = gamma(a1[None, :], a1[:, None]) - gamma(a0[None, :], a1[:, None])
    gb = gamma(a1[None, :], a0[:, None]) - gamma(a0[None, :], a0[:, None])
    return ga - gb  # rows: b interval, cols: a interval


def direction_to_face_uv(dirs: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Directions (..., 3) -> (face index, a, b) with a, b in [-1, 1]."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    ax, ay, az = x.abs(), y.abs(), z.abs()
    is_x = (ax >= ay) & (ax >= az)
    is_y = (ay > ax) & (ay >= az)
    face = torch.where(
        is_x,
        torch.where(x >= 0, 0, 1),
        torch.where(is_y, torch.where(y >= 0, 2, 3), torch.where(z >= 0, 4, 5)),
    )
    major = torch.where(is_x, ax, torch.where(is_y, ay, az)).clamp_min(1e-20)
    xn, yn, zn = x / major, y / major, z / major
    a = torch.where(
        is_x,
        torch.where(x >= 0, -zn, zn),
        torch.where(is_y, xn, torch.where(z >= 0, xn, -xn)),
    )
    b = torch.where(
        is_x,
        -yn,
        torch.where(is_y, torch.where(y >= 0, zn, -zn), -yn),
    )
    return face, a, b


def sample_cubemap(cube: Tensor, dirs: Tensor) -> Tensor:
    """Bilinear cube map lookup, differentiable in both map and directions.

    cube (6, R, R, C), dirs (..., 3) -> (..., C). Texels are clamped at face
    edges (no cross-face blend).
    """
    res = cube.shape[1]
    face, a, b = direction_to_face_uv(dirs)
    xf = ((a + 1.0) * 0.5 * res - 0.5).clamp(0.0, res - 1.0)
    yf = ((b + 1.0) * 0.5 * res - 0.5).clamp(0.0, res - 1.0)
    x0 = xf.detach().floor().long().clamp(0, res - 2) if res > 1 else torch.zeros_like(xf).long()
    y0 = yf.detach().floor().long().clamp(0, res - 2) if res > 1 else torch.zeros_like(yf).long()
    tx = (xf - x0).clamp(0.0, 1.0)
    ty = (yf - y0).clamp(0.0, 1.0)
    if res == 1:
        return cube[face, 0, 0]
    flat = cube.reshape(6 * res * res, -1)
    base = face * res * res

    def tx_at(yy, xx):
        return flat[base + yy * res + xx]

    c00 = tx_at(y0, x0)
    c01 = tx_at(y0, x0 + 1)
    c10 = tx_at(y0 + 1, x0)
    c11 = tx_at(y0 + 1, x0 + 1)
    wx = tx[..., None]
    wy = ty[..., None]
    return (c00 * (1 - wx) + c01 * wx) * (1 - wy) + (c10 * (1 - wx) + c11 * wx) * wy


def resample_cubemap(cube: Tensor, res: int) -> Tensor:
    """Resample to a new face resolution by bilinear direction lookup."""
    if cube.shape[1] == res:
        return cube
    dirs = face_directions(res, dtype=cube.dtype, device=cube.device)
    return sample_cubemap(cube, dirs)


def equirect_directions(height: int, width: int, dtype=torch.float64, device="cpu") -> Tensor:
    v = (torch.arange(height, dtype=dtype, device=device) + 0.5) / height
    u = (torch.arange(width, dtype=dtype, device=device) + 0.5) / width
    theta = math.pi * v
    phi = 2.0 * math.pi * u - math.pi
    st, ct = torch.sin(theta), torch.cos(theta)
    sp, cp = torch.sin(phi), torch.cos(phi)
    return torch.stack(
        [st[:, None] * sp[None, :], ct[:, None].expand(height, width), -st[:, None] * cp[None, :]],
        dim=-1,
    )


def cube_to_equirect(cube: Tensor, height: int, width: int) -> Tensor:
    dirs = equirect_directions(height, width, dtype=cube.dtype, device=cube.device)
    return sample_cubemap(cube, dirs)


def sample_equirect(img: Tensor, dirs: Tensor) -> Tensor:
    """Bilinear equirect lookup with azimuthal wrap. img (H, W, C)."""
    h, w = img.shape[0], img.shape[1]
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    theta = torch.acos(y.clamp(-1.0, 1.0))
    phi = torch.atan2(x, -z)
    u = (phi + math.pi) / (2.0 * math.pi)
    v = theta / math.pi
    xf = u * w - 0.5
    yf = (v * h - 0.5).clamp(0.0, h - 1.0)
    x0 = torch.floor(xf)
    y0 = yf.floor().long().clamp(0, max(h - 2, 0))
    tx = xf - x0
    ty = yf - y0
    x0i = torch.remainder(x0.long(), w)
    x1i = torch.remainder(x0.long() + 1, w)
    if h == 1:
        c00 = img[0, x0i]
        c01 = img[0, x1i]
        return c00 * (1 - tx[..., None]) + c01 * tx[..., None]
    c00 = img[y0, x0i]
    c01 = img[y0, x1i]
    c10 = img[y0 + 1, x0i]
    c11 = img[y0 + 1, x1i]
    wx = tx[..., None]
    wy = ty[..., None]
    return (c00 * (1 - wx) + c01 * wx) * (1 - wy) + (c10 * (1 - wx) + c11 * wx) * wy


def equirect_to_cube(img: Tensor, res: int) -> Tensor:
    dirs = face_directions(res, dtype=img.dtype, device=img.device)
    return sample_equirect(img, dirs)


def write_equirect_hdr(path: str | Path, image: np.ndarray | Tensor):
    """Write a float RGB equirect image; .hdr (Radiance), .exr, or .npy."""
    if isinstance(image, Tensor):
        image = image.detach().cpu().numpy()
    image = np.ascontiguousarray(image.astype(np.float32))
    path = Path(path)
    if path.suffix.lower() == ".npy":
        np.save(path, image)
        return
    import cv2

    ok = cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
    if not ok:
        raise IOError(f"failed to write environment map: {path}")


def read_equirect_hdr(path: str | Path) -> np.ndarray:
    """Read a float RGB equirect image written by :func:`write_equirect_hdr`."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        arr = np.load(path)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise IOError(f"environment map must be HxWx3, got {arr.shape}: {path}")
        return arr.astype(np.float32)
    import cv2

    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise IOError(f"failed to read environment map: {path}")
    if arr.ndim != 3 or arr.shape[2] < 3:
        raise IOError(f"environment map must have 3 channels: {path}")
    arr = cv2.cvtColor(arr[:, :, :3], cv2.COLOR_BGR2RGB)
    return arr.astype(np.float32)
