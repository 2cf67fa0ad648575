"""PLY reading/writing for splat checkpoints and triangle meshes.

Splat clouds are stored as one point record per surfel with named float32
properties (little-endian), so checkpoints round-trip raw parameters
bit-exactly. Meshes support both binary and ASCII variants.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .scene import SplatCloud, sh_band_count


class PlyError(IOError):
    pass


def _cloud_property_names(sh_bands: int) -> list[str]:
    names = [
        "x", "y", "z",
        "qw", "qx", "qy", "qz",
        "log_scale_u", "log_scale_v",
        "opacity_logit",
    ]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (sh_bands - 1))]
    names += ["albedo_logit_r", "albedo_logit_g", "albedo_logit_b",
              "metallic_logit", "roughness_logit"]
    return names


def save_splats(path: str | Path, cloud: SplatCloud):
    n = len(cloud)
    bands = cloud.sh_coeffs.shape[1]
    names = _cloud_property_names(bands)
    sh = cloud.sh_coeffs.detach().cpu().numpy().astype("<f4")
    dc = sh[:, 0, :]                       # (N, 3)
    rest = sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)  # channel-major like the dc layout
    cols = [
        cloud.positions.detach().cpu().numpy().astype("<f4"),
        cloud.quaternions.detach().cpu().numpy().astype("<f4"),
        cloud.log_scales.detach().cpu().numpy().astype("<f4"),
        cloud.opacity_logits.detach().cpu().numpy().astype("<f4")[:, None],
        dc,
        rest,
        cloud.albedo_logits.detach().cpu().numpy().astype("<f4"),
        cloud.metallic_logits.detach().cpu().numpy().astype("<f4")[:, None],
        cloud.roughness_logits.detach().cpu().numpy().astype("<f4")[:, None],
    ]
    data = np.concatenate(cols, axis=1)
    assert data.shape[1] == len(names)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_header(fh) -> tuple[dict, int]:
    line = fh.readline().decode("ascii").strip()
    if line != "ply":
        raise PlyError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(type, prop), ...])
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("unexpected end of header")
        line = line.decode("ascii").strip()
        if line.startswith("comment") or not line:
            continue
        if line.startswith("format"):
            fmt = line.split()[1]
        elif line.startswith("element"):
            _, name, count = line.split()
            elements.append((name, int(count), []))
        elif line.startswith("property"):
            parts = line.split()
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append(("scalar", parts[1], parts[2]))
        elif line == "end_header":
            break
    return {"format": fmt, "elements": elements}, 0


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "short": "<i2", "ushort": "<u2", "char": "i1", "uchar": "u1",
    "int8": "i1", "uint8": "u1",
}


def load_splats(path: str | Path) -> SplatCloud:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
        if header["format"] != "binary_little_endian":
            raise PlyError(f"splat checkpoints are binary little-endian, got {header['format']}")
        elems = [e for e in header["elements"] if e[0] == "vertex"]
        if not elems:
            raise PlyError("no vertex element")
        name, count, props = elems[0]
        if any(p[0] != "scalar" for p in props):
            raise PlyError("unexpected list property in splat records")
        dtype = np.dtype([(p[2], _PLY_TYPES[p[1]]) for p in props])
        raw = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype, count=count)
    fields = {p[2] for p in props}
    rest_n = len([f for f in fields if f.startswith("f_rest_")])
    bands = 1 + rest_n // 3
    need = set(_cloud_property_names(bands))
    missing = need - fields
    if missing:
        raise PlyError(f"missing splat properties: {sorted(missing)}")

    def col(*names):
        return np.stack([raw[nm].astype(np.float32) for nm in names], axis=1)

    sh = np.zeros((count, bands, 3), dtype=np.float32)
    sh[:, 0, :] = col("f_dc_0", "f_dc_1", "f_dc_2")
    if bands > 1:
        rest = col(*[f"f_rest_{i}" for i in range(3 * (bands - 1))])
        sh[:, 1:, :] = rest.reshape(count, 3, bands - 1).transpose(0, 2, 1)
    return SplatCloud(
        positions=torch.from_numpy(col("x", "y", "z")),
        quaternions=torch.from_numpy(col("qw", "qx", "qy", "qz")),
        log_scales=torch.from_numpy(col("log_scale_u", "log_scale_v")),
        opacity_logits=torch.from_numpy(raw["opacity_logit"].astype(np.float32).copy()),
        sh_coeffs=torch.from_numpy(sh),
        albedo_logits=torch.from_numpy(col("albedo_logit_r", "albedo_logit_g", "albedo_logit_b")),
        metallic_logits=torch.from_numpy(raw["metallic_logit"].astype(np.float32).copy()),
        roughness_logits=torch.from_numpy(raw["roughness_logit"].astype(np.float32).copy()),
    )


def save_mesh(path: str | Path, vertices: np.ndarray, faces: np.ndarray, binary: bool = True):
    vertices = np.asarray(vertices, dtype=np.float32)
    faces = np.asarray(faces, dtype=np.int32)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(vertices)}",
        "property float x", "property float y", "property float z",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(vertices, dtype="<f4").tobytes())
            face_rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            face_rec["n"] = 3
            face_rec["idx"] = faces
            fh.write(face_rec.tobytes())
        else:
            lines = ["%.9g %.9g %.9g" % tuple(v) for v in vertices]
            lines += ["3 %d %d %d" % tuple(f) for f in faces]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def load_mesh(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
        elems = {e[0]: e for e in header["elements"]}
        if "vertex" not in elems or "face" not in elems:
            raise PlyError("mesh must contain vertex and face elements")
        _, n_vert, vprops = elems["vertex"]
        _, n_face, fprops = elems["face"]
        if header["format"] == "ascii":
            text = fh.read().decode("ascii").split("\n")
            rows = [ln.split() for ln in text if ln.strip()]
            vrows = rows[:n_vert]
            frows = rows[n_vert:n_vert + n_face]
            names = [p[2] for p in vprops]
            verts = np.array([[float(x) for x in r[:len(names)]] for r in vrows], dtype=np.float32)
            xyz = verts[:, [names.index("x"), names.index("y"), names.index("z")]]
            faces = np.array([[int(x) for x in r[1:4]] for r in frows], dtype=np.int32)
            return xyz, faces
        if header["format"] != "binary_little_endian":
            raise PlyError(f"unsupported PLY format: {header['format']}")
        vdtype = np.dtype([(p[2], _PLY_TYPES[p[1]]) for p in vprops if p[0] == "scalar"])
        raw = np.frombuffer(fh.read(n_vert * vdtype.itemsize), dtype=vdtype, count=n_vert)
        xyz = np.stack([raw["x"], raw["y"], raw["z"]], axis=1).astype(np.float32)
        if len(fprops) != 1 or fprops[0][0] != "list":
            raise PlyError("face element must be a single index list")
        count_t = _PLY_TYPES[fprops[0][2]]
        idx_t = _PLY_TYPES[fprops[0][3]]
        fdtype = np.dtype([("n", count_t), ("idx", idx_t, (3,))])
        fraw = np.frombuffer(fh.read(n_face * fdtype.itemsize), dtype=fdtype, count=n_face)
        if not np.all(fraw["n"] == 3):
            raise PlyError("only triangle meshes are supported")
        return xyz, fraw["idx"].astype(np.int32)
