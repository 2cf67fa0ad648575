import math

import numpy as np
import pytest
import torch

from surfelsplat.scene import (
    Camera,
    RawSplatParams,
    SceneError,
    SplatSurfel,
    activate,
    deactivate,
    frame_to_quaternion,
    look_at_camera,
    quaternion_to_frame,
    splat_normal,
)

from util import random_cloud


def make_raw(
    quaternion=(1.0, 0.0, 0.0, 0.0),
    opacity_logit=0.0,
    log_scale=(0.0, 0.0),
    dtype=torch.float64,
):
    return RawSplatParams(
        position=torch.zeros(3, dtype=dtype),
        quaternion=torch.tensor(quaternion, dtype=dtype),
        log_scale=torch.tensor(log_scale, dtype=dtype),
        opacity_logit=torch.tensor(opacity_logit, dtype=dtype),
        sh=torch.zeros(1, 3, dtype=dtype),
        albedo_logit=torch.tensor([0.3, -0.2, 1.0], dtype=dtype),
        metallic_logit=torch.tensor(-1.0, dtype=dtype),
        roughness_logit=torch.tensor(0.5, dtype=dtype),
    )


def test_activate_sigmoid_midpoint():
    s = activate(make_raw(opacity_logit=0.0))
    assert torch.allclose(s.opacity, torch.tensor(0.5, dtype=torch.float64))


def test_activate_exp_identity():
    s = activate(make_raw(log_scale=(0.0, 0.0)))
    assert torch.allclose(s.scale, torch.ones(2, dtype=torch.float64))


def test_activate_identity_quaternion_gives_world_axes():
    s = activate(make_raw())
    assert torch.allclose(s.t_u, torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64), atol=1e-12)
    assert torch.allclose(s.t_v, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), atol=1e-12)
    assert torch.allclose(s.normal, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64), atol=1e-12)


def test_activate_rejects_non_finite():
    raw = make_raw()
    bad = RawSplatParams(
        position=torch.tensor([0.0, float("nan"), 0.0], dtype=torch.float64),
        quaternion=raw.quaternion,
        log_scale=raw.log_scale,
        opacity_logit=raw.opacity_logit,
        sh=raw.sh,
        albedo_logit=raw.albedo_logit,
        metallic_logit=raw.metallic_logit,
        roughness_logit=raw.roughness_logit,
    )
    with pytest.raises(SceneError, match="position"):
        activate(bad)


def test_activation_ranges_hold_for_random_raw():
    g = torch.Generator().manual_seed(7)
    for _ in range(50):
        q = torch.randn(4, generator=g, dtype=torch.float64)
        if q.norm() < 0.1:
            q = q + 1.0
        raw = make_raw(quaternion=tuple(q.tolist()))
        raw = RawSplatParams(
            position=torch.randn(3, generator=g, dtype=torch.float64) * 10,
            quaternion=q,
            log_scale=torch.randn(2, generator=g, dtype=torch.float64) * 3,
            opacity_logit=torch.randn((), generator=g, dtype=torch.float64) * 5,
            sh=raw.sh,
            albedo_logit=torch.randn(3, generator=g, dtype=torch.float64) * 5,
            metallic_logit=torch.randn((), generator=g, dtype=torch.float64) * 5,
            roughness_logit=torch.randn((), generator=g, dtype=torch.float64) * 5,
        )
        s = activate(raw)
        assert torch.dot(s.t_u, s.t_v).abs() < 1e-6
        assert abs(s.t_u.norm() - 1) < 1e-6 and abs(s.t_v.norm() - 1) < 1e-6
        assert (s.scale > 0).all()
        for val in (s.opacity, s.metallic, s.roughness):
            assert 0.0 < float(val) < 1.0
        assert ((s.albedo > 0) & (s.albedo < 1)).all()
        assert abs(s.normal.norm() - 1) < 1e-6


def test_activate_deactivate_roundtrip():
    g = torch.Generator().manual_seed(3)
    for _ in range(30):
        q = torch.randn(4, generator=g, dtype=torch.float64)
        q = q / q.norm()
        if q[0] < 0:
            q = -q
        raw = RawSplatParams(
            position=torch.randn(3, generator=g, dtype=torch.float64),
            quaternion=q,
            log_scale=torch.randn(2, generator=g, dtype=torch.float64),
            opacity_logit=torch.randn((), generator=g, dtype=torch.float64).clamp(-6, 6),
            sh=torch.randn(4, 3, generator=g, dtype=torch.float64),
            albedo_logit=torch.randn(3, generator=g, dtype=torch.float64).clamp(-6, 6),
            metallic_logit=torch.randn((), generator=g, dtype=torch.float64).clamp(-6, 6),
            roughness_logit=torch.randn((), generator=g, dtype=torch.float64).clamp(-6, 6),
        )
        back = deactivate(activate(raw))
        assert torch.allclose(back.position, raw.position)
        assert torch.allclose(back.quaternion, raw.quaternion, atol=1e-6)
        assert torch.allclose(back.log_scale, raw.log_scale, atol=1e-6)
        assert torch.allclose(back.opacity_logit, raw.opacity_logit, atol=1e-6)
        assert torch.allclose(back.albedo_logit, raw.albedo_logit, atol=1e-6)
        assert torch.allclose(back.metallic_logit, raw.metallic_logit, atol=1e-6)
        assert torch.allclose(back.roughness_logit, raw.roughness_logit, atol=1e-6)


def _surfel(t_u, t_v):
    d = torch.float64
    return SplatSurfel(
        position=torch.zeros(3, dtype=d),
        t_u=torch.tensor(t_u, dtype=d),
        t_v=torch.tensor(t_v, dtype=d),
        scale=torch.ones(2, dtype=d),
        opacity=torch.tensor(0.5, dtype=d),
        sh=torch.zeros(1, 3, dtype=d),
        albedo=torch.full((3,), 0.5, dtype=d),
        metallic=torch.tensor(0.0, dtype=d),
        roughness=torch.tensor(0.5, dtype=d),
    )


def test_splat_normal_canonical_frame():
    n = splat_normal(_surfel((1, 0, 0), (0, 1, 0)))
    assert torch.allclose(n, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))


def test_splat_normal_swapped_handedness():
    n = splat_normal(_surfel((0, 1, 0), (1, 0, 0)))
    assert torch.allclose(n, torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64))


def test_splat_normal_cross_product():
    n = splat_normal(_surfel((1, 0, 0), (0, 0, 1)))
    assert torch.allclose(n, torch.tensor([0.0, -1.0, 0.0], dtype=torch.float64))


def test_splat_normal_scale_invariance():
    g = torch.Generator().manual_seed(5)
    q = torch.randn(4, generator=g, dtype=torch.float64)
    t_u, t_v, n = quaternion_to_frame(q)
    s = _surfel(tuple(t_u.tolist()), tuple(t_v.tolist()))
    n1 = splat_normal(s)
    # scale lives outside the frame; rescaling leaves the normal untouched
    s2 = SplatSurfel(**{**s.__dict__, "scale": torch.tensor([3.7, 0.01], dtype=torch.float64)})
    assert torch.equal(n1, splat_normal(s2))


def test_splat_normal_rotation_equivariance():
    g = torch.Generator().manual_seed(11)
    for _ in range(20):
        q = torch.randn(4, generator=g, dtype=torch.float64)
        t_u, t_v, _ = quaternion_to_frame(q)
        qr = torch.randn(4, generator=g, dtype=torch.float64)
        ru, rv, rn = quaternion_to_frame(qr)
        rot = torch.stack([ru, rv, rn], dim=-1)  # columns: proper rotation
        n = torch.cross(t_u, t_v, dim=-1)
        n_rot = torch.cross(rot @ t_u, rot @ t_v, dim=-1)
        assert torch.allclose(n_rot, rot @ n, atol=1e-12)


def test_frame_to_quaternion_roundtrip():
    g = torch.Generator().manual_seed(13)
    q = torch.randn(40, 4, generator=g, dtype=torch.float64)
    q = q / q.norm(dim=-1, keepdim=True)
    q[q[:, 0] < 0] *= -1
    t_u, t_v, _ = quaternion_to_frame(q)
    back = frame_to_quaternion(t_u, t_v)
    assert torch.allclose(back, q, atol=1e-9)


def test_camera_rejects_bad_rotation():
    m = np.eye(4)
    m[0, 0] = 2.0
    with pytest.raises(SceneError):
        Camera(fx=10, fy=10, cx=4, cy=4, width=8, height=8, world_to_camera=m)
    with pytest.raises(SceneError):
        Camera(fx=-1, fy=10, cx=4, cy=4, width=8, height=8, world_to_camera=np.eye(4))


def test_camera_back_project_inverts_projection():
    cam = look_at_camera(
        eye=(1.0, 2.0, -3.0), target=(0, 0, 0), up=(0, 1, 0),
        fx=30, fy=28, cx=8, cy=7.5, width=16, height=15,
    )
    depth = torch.full((15, 16), 2.5, dtype=torch.float64)
    pts = cam.back_project(depth)
    rot = torch.as_tensor(cam.rotation)
    t = torch.as_tensor(cam.translation)
    cam_pts = pts @ rot.T + t
    assert torch.allclose(cam_pts[..., 2], depth, atol=1e-12)
    u = 30 * cam_pts[..., 0] / cam_pts[..., 2] + 8
    jj = torch.arange(16, dtype=torch.float64) + 0.5
    assert torch.allclose(u, jj.expand(15, 16), atol=1e-9)


def test_cloud_activate_matches_single(seed=17):
    cloud = random_cloud(6, seed=seed)
    act = cloud.activate()
    for i in range(6):
        raw = RawSplatParams(
            position=cloud.positions[i],
            quaternion=cloud.quaternions[i],
            log_scale=cloud.log_scales[i],
            opacity_logit=cloud.opacity_logits[i],
            sh=cloud.sh_coeffs[i],
            albedo_logit=cloud.albedo_logits[i],
            metallic_logit=cloud.metallic_logits[i],
            roughness_logit=cloud.roughness_logits[i],
        )
        s = activate(raw)
        assert torch.allclose(act.t_u[i], s.t_u)
        assert torch.allclose(act.opacity[i], s.opacity)
        assert torch.allclose(act.normal[i], s.normal)
