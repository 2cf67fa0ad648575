"""Independent reference implementations used to cross-check the fast paths.

Everything here is written naively in numpy float64: per-pixel loops, no
tiling, no vectorized compositing. Constants (cutoffs, filter sigma) mirror
the rasterizer's documented semantics.
"""

import math

import numpy as np

WEIGHT_CUTOFF = 1.0 / 255.0
TRANS_FLOOR = 1e-4
SCREEN_SIGMA = math.sqrt(2.0) / 2.0
NEAR = 0.01
PARALLEL_EPS = 1e-12


def quat_to_frame_np(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    t_u = np.array([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)])
    t_v = np.array([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)])
    n = np.cross(t_u, t_v)
    return t_u, t_v, n


def composite_pixel(camera, pixel_xy, splats, background, normal_uses_filter=False):
    """Composite one pixel against every splat, exactly per the stated rules.

    ``splats`` is a list of dicts with keys position, t_u, t_v, scale,
    opacity, color, albedo, metallic, roughness (numpy, activated values).
    Returns dict of color, alpha, depth, normal, albedo, metallic, roughness.
    """
    rot = camera.rotation
    tvec = camera.translation
    origin = camera.center
    d_cam = np.array(
        [(pixel_xy[0] - camera.cx) / camera.fx, (pixel_xy[1] - camera.cy) / camera.fy, 1.0]
    )
    d_world = rot.T @ d_cam

    frags = []
    for i, s in enumerate(splats):
        p_cam = rot @ s["position"] + tvec
        zc = p_cam[2]
        if zc <= NEAR:
            continue
        n = np.cross(s["t_u"], s["t_v"])
        denom = d_world @ n
        g_obj = 0.0
        tau = None
        if abs(denom) > PARALLEL_EPS:
            t = ((s["position"] - origin) @ n) / denom
            if t > NEAR:
                hit = origin + t * d_world
                off = hit - s["position"]
                u = (off @ s["t_u"]) / s["scale"][0]
                v = (off @ s["t_v"]) / s["scale"][1]
                g_obj = math.exp(-0.5 * (u * u + v * v))
                tau = t
        mean2d = np.array(
            [camera.fx * p_cam[0] / zc + camera.cx, camera.fy * p_cam[1] / zc + camera.cy]
        )
        d2 = (pixel_xy[0] - mean2d[0]) ** 2 + (pixel_xy[1] - mean2d[1]) ** 2
        g_scr = math.exp(-0.5 * d2 / (SCREEN_SIGMA * SCREEN_SIGMA))
        g_hat = max(g_obj, g_scr)
        w = s["opacity"] * g_hat
        if w < WEIGHT_CUTOFF:
            continue
        depth = tau if (tau is not None and g_obj >= g_scr) else zc
        # normals oriented toward the camera
        if (origin - s["position"]) @ n < 0:
            n = -n
        frags.append((zc, i, w, s["opacity"], depth, n, s))

    frags.sort(key=lambda f: (f[0], f[1]))

    color = np.zeros(3)
    albedo = np.zeros(3)
    normal = np.zeros(3)
    metallic = 0.0
    roughness = 0.0
    depth_sum = 0.0
    alpha = 0.0
    trans = 1.0
    for zc, i, w, op, depth, n, s in frags:
        if trans <= TRANS_FLOOR:
            break
        cw = w * trans
        color += s["color"] * cw
        albedo += s["albedo"] * cw
        metallic += s["metallic"] * cw
        roughness += s["roughness"] * cw
        depth_sum += depth * cw
        alpha += cw
        trans *= 1.0 - w

    trans_n = 1.0
    for zc, i, w, op, depth, n, s in frags:
        wn = w if normal_uses_filter else op
        if trans_n <= TRANS_FLOOR:
            break
        normal += n * wn * trans_n
        trans_n *= 1.0 - wn

    out_depth = depth_sum / max(alpha, 1e-8) if alpha > 1e-8 else 0.0
    return {
        "color": color + np.asarray(background) * trans,
        "alpha": alpha,
        "depth": out_depth,
        "normal": normal,
        "albedo": albedo,
        "metallic": metallic,
        "roughness": roughness,
    }


def composite_image(camera, splats, background, normal_uses_filter=False):
    h, w = camera.height, camera.width
    maps = {
        "color": np.zeros((h, w, 3)),
        "normal": np.zeros((h, w, 3)),
        "albedo": np.zeros((h, w, 3)),
        "alpha": np.zeros((h, w)),
        "depth": np.zeros((h, w)),
        "metallic": np.zeros((h, w)),
        "roughness": np.zeros((h, w)),
    }
    for i in range(h):
        for j in range(w):
            px = composite_pixel(camera, (j + 0.5, i + 0.5), splats, background, normal_uses_filter)
            for key in maps:
                maps[key][i, j] = px[key]
    return maps


def activated_to_dicts(act, colors):
    """Torch ActivatedSplats batch -> list of numpy splat dicts."""
    out = []
    for i in range(len(act)):
        out.append(
            {
                "position": act.position[i].detach().numpy().astype(np.float64),
                "t_u": act.t_u[i].detach().numpy().astype(np.float64),
                "t_v": act.t_v[i].detach().numpy().astype(np.float64),
                "scale": act.scale[i].detach().numpy().astype(np.float64),
                "opacity": float(act.opacity[i]),
                "color": colors[i].detach().numpy().astype(np.float64),
                "albedo": act.albedo[i].detach().numpy().astype(np.float64),
                "metallic": float(act.metallic[i]),
                "roughness": float(act.roughness[i]),
            }
        )
    return out


def solve_plane_intersection(camera, pixel_xy, position, t_u, t_v, scale):
    """Closed-form check of the tangent-frame hit by solving the 3x3 linear
    system  origin + tau d = position + a t_u + b t_v  directly."""
    d_cam = np.array(
        [(pixel_xy[0] - camera.cx) / camera.fx, (pixel_xy[1] - camera.cy) / camera.fy, 1.0]
    )
    d_world = camera.rotation.T @ d_cam
    a_mat = np.stack([d_world, -t_u, -t_v], axis=1)
    rhs = position - camera.center
    tau, a, b = np.linalg.solve(a_mat, rhs)
    return tau, a / scale[0], b / scale[1]
