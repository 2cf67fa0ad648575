import math

import numpy as np
import pytest
import torch

from surfelsplat.config import TrainConfig
from surfelsplat.losses import (
    depth_fm_loss,
    light_reg,
    loss_adjoints,
    normal_consistency_loss,
    normal_fm_loss,
    pbr_smoothness,
    rgb_loss,
    solve_scale_shift,
    ssim_map,
    total_loss,
)

from util import frontal_camera

D = torch.float64


def rand(*shape, seed=0, lo=0.0, hi=1.0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=D) * (hi - lo) + lo


def full_mask(h, w):
    return torch.ones(h, w, dtype=torch.bool)


def naive_ssim(img_a, img_b, window=11, sigma=1.5):
    """Scalar re-implementation: python loops over valid windows."""
    a = img_a.numpy()
    b = img_b.numpy()
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w, c = a.shape
    x = np.arange(window) - (window - 1) / 2
    g1 = np.exp(-(x * x) / (2 * sigma * sigma))
    g1 /= g1.sum()
    kern = np.outer(g1, g1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    out = np.zeros((h - window + 1, w - window + 1, c))
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            for ch in range(c):
                pa = a[i:i + window, j:j + window, ch]
                pb = b[i:i + window, j:j + window, ch]
                mu_a = (kern * pa).sum()
                mu_b = (kern * pb).sum()
                va = (kern * pa * pa).sum() - mu_a ** 2
                vb = (kern * pb * pb).sum() - mu_b ** 2
                cov = (kern * pa * pb).sum() - mu_a * mu_b
                out[i, j, ch] = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
                    (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
                )
    return out


class TestRgbLoss:
    def test_identical_zero(self):
        img = rand(8, 8, 3, seed=1)
        out = rgb_loss(img, img.clone(), full_mask(8, 8), ssim_weight=0.0)
        assert float(out.value) == 0.0

    def test_constant_offset_pure_l1(self):
        a = torch.full((8, 8, 3), 0.6, dtype=D)
        b = torch.full((8, 8, 3), 0.5, dtype=D)
        out = rgb_loss(a, b, full_mask(8, 8), ssim_weight=0.0)
        assert abs(float(out.value) - 0.1) < 1e-12

    def test_empty_mask_zero_with_warning(self):
        img = rand(8, 8, 3, seed=2)
        with pytest.warns(UserWarning):
            out = rgb_loss(img, img * 0.5, torch.zeros(8, 8, dtype=torch.bool))
        assert float(out.value) == 0.0

    def test_matches_naive_ssim_oracle(self):
        a = rand(16, 16, 3, seed=3)
        b = rand(16, 16, 3, seed=4)
        smap = ssim_map(a, b)
        ref = naive_ssim(a, b)
        np.testing.assert_allclose(smap.numpy(), ref, atol=1e-10)
        # and the combined loss with lambda = 0.2
        out = rgb_loss(a, b, full_mask(16, 16), ssim_weight=0.2)
        l1 = float((a - b).abs().mean())
        expected = 0.8 * l1 + 0.2 * (1 - ref.mean())
        assert abs(float(out.value) - expected) < 1e-10

    def test_masked_mean_counts_only_masked(self):
        a = torch.zeros(8, 8, 3, dtype=D)
        b = torch.zeros(8, 8, 3, dtype=D)
        b[0, 0] = 1.0
        mask = torch.zeros(8, 8, dtype=torch.bool)
        mask[0, 0] = True
        out = rgb_loss(a, b, mask, ssim_weight=0.0)
        assert abs(float(out.value) - 1.0) < 1e-12


class TestNormalConsistency:
    def test_frontoparallel_plane_agrees(self):
        cam = frontal_camera(width=12, height=12, focal=16.0)
        depth = torch.full((12, 12), 2.0, dtype=D)
        normal = torch.zeros(12, 12, 3, dtype=D)
        normal[..., 2] = -1.0  # toward the camera
        out = normal_consistency_loss(normal, depth, cam, full_mask(12, 12))
        assert float(out.value) < 1e-3

    def test_oblique_plane_agrees(self):
        # plane z = 2 + 0.3 x: depth from ray intersection, analytic normal
        cam = frontal_camera(width=16, height=16, focal=20.0)
        dirs = cam.pixel_directions(dtype=D)
        # solve z = 2 + 0.3 * x with (x, y, z) = depth * dir
        depth = 2.0 / (dirs[..., 2] - 0.3 * dirs[..., 0])
        n = torch.tensor([0.3, 0.0, -1.0], dtype=D)
        n = n / n.norm()
        normal = n.expand(16, 16, 3).clone()
        out = normal_consistency_loss(normal, depth, cam, full_mask(16, 16))
        assert float(out.value) < 1e-6

    def test_orthogonal_normals_give_one(self):
        cam = frontal_camera(width=8, height=8, focal=16.0)
        depth = torch.full((8, 8), 2.0, dtype=D)
        normal = torch.zeros(8, 8, 3, dtype=D)
        normal[..., 0] = 1.0  # orthogonal to the depth normal (0, 0, -1)
        out = normal_consistency_loss(normal, depth, cam, full_mask(8, 8))
        assert abs(float(out.value) - 1.0) < 1e-9

    def test_masking_excludes_pixels(self):
        cam = frontal_camera(width=8, height=8, focal=16.0)
        depth = torch.full((8, 8), 2.0, dtype=D)
        normal = torch.zeros(8, 8, 3, dtype=D)
        normal[..., 2] = -1.0
        normal[2, 2] = torch.tensor([1.0, 0.0, 0.0], dtype=D)  # wrong normal
        mask = full_mask(8, 8)
        mask[2, 2] = False
        out = normal_consistency_loss(normal, depth, cam, mask)
        assert float(out.value) < 1e-9


class TestNormalFm:
    def test_identical_zero(self):
        n = torch.zeros(4, 4, 3, dtype=D)
        n[..., 2] = 1.0
        out = normal_fm_loss(n, n.clone(), full_mask(4, 4))
        assert float(out.value) == 0.0

    def test_antipodal_is_four(self):
        n = torch.zeros(1, 1, 3, dtype=D)
        n[..., 2] = 1.0
        p = -n.clone()
        out = normal_fm_loss(n, p, full_mask(1, 1))
        assert abs(float(out.value) - 4.0) < 1e-9

    def test_orthogonal_is_three(self):
        n = torch.zeros(1, 1, 3, dtype=D)
        n[0, 0, 0] = 1.0
        p = torch.zeros(1, 1, 3, dtype=D)
        p[0, 0, 1] = 1.0
        out = normal_fm_loss(n, p, full_mask(1, 1))
        assert abs(float(out.value) - 3.0) < 1e-9

    def test_zero_length_excluded_and_counted(self):
        n = torch.zeros(2, 1, 3, dtype=D)
        n[0, 0, 2] = 1.0  # valid
        p = torch.zeros(2, 1, 3, dtype=D)
        p[..., 2] = 1.0
        out = normal_fm_loss(n, p, full_mask(2, 1))
        assert out.aux["excluded"] == 1
        assert out.aux["pixels"] == 1
        assert float(out.value) == 0.0

    def test_positive_unless_equal(self):
        g = torch.Generator().manual_seed(9)
        n = torch.randn(6, 6, 3, generator=g, dtype=D)
        n = n / n.norm(dim=-1, keepdim=True)
        p = n.clone()
        p[3, 3] = torch.tensor([0.0, 0.0, 1.0], dtype=D)
        if torch.allclose(p[3, 3], n[3, 3]):
            p[3, 3] = torch.tensor([0.0, 1.0, 0.0], dtype=D)
        out = normal_fm_loss(n, p, full_mask(6, 6))
        assert float(out.value) > 0


class TestScaleShift:
    def test_identity_fit(self):
        d = rand(8, 8, seed=5, lo=1.0, hi=3.0)
        fit = solve_scale_shift(d, d.clone(), full_mask(8, 8))
        assert abs(fit.scale - 1.0) < 1e-9 and abs(fit.shift) < 1e-9

    def test_exact_affine_fit(self):
        d = rand(8, 8, seed=6, lo=1.0, hi=3.0)
        fit = solve_scale_shift(d, 3.0 * d + 2.0, full_mask(8, 8))
        assert abs(fit.scale - 3.0) < 1e-9 and abs(fit.shift - 2.0) < 1e-9
        assert not fit.degenerate

    def test_noisy_fit_matches_normal_equations_oracle(self):
        d = rand(10, 10, seed=7, lo=0.5, hi=2.5)
        t = 1.7 * d - 0.4 + rand(10, 10, seed=8, lo=-0.05, hi=0.05)
        mask = rand(10, 10, seed=9) > 0.3
        fit = solve_scale_shift(d, t, mask)
        dm = d[mask].numpy()
        tm = t[mask].numpy()
        a = np.array([[np.sum(dm * dm), dm.sum()], [dm.sum(), dm.size]])
        rhs = np.array([np.sum(dm * tm), tm.sum()])
        scale, shift = np.linalg.solve(a, rhs)
        assert abs(fit.scale - scale) < 1e-9
        assert abs(fit.shift - shift) < 1e-9

    def test_degenerate_constant_depth(self):
        d = torch.ones(2, 1, dtype=D)
        t = torch.tensor([[0.0], [2.0]], dtype=D)
        fit = solve_scale_shift(d, t, full_mask(2, 1))
        assert fit.degenerate
        assert fit.scale == 0.0
        assert abs(fit.shift - 1.0) < 1e-12


class TestDepthFm:
    def test_exact_affine_relation_zero(self):
        d = rand(8, 8, seed=10, lo=1.0, hi=2.0)
        out = depth_fm_loss(d, 2.5 * d + 0.7, full_mask(8, 8))
        assert float(out.value) < 1e-12

    def test_degenerate_branch(self):
        d = torch.ones(2, 1, dtype=D)
        t = torch.tensor([[0.0], [2.0]], dtype=D)
        out = depth_fm_loss(d, t, full_mask(2, 1))
        assert out.aux["degenerate"]
        assert abs(float(out.value) - 1.0) < 1e-12

    def test_matches_least_squares_residual_oracle(self):
        d = rand(9, 9, seed=11, lo=0.5, hi=2.0)
        t = rand(9, 9, seed=12, lo=1.0, hi=4.0)
        mask = rand(9, 9, seed=13) > 0.25
        out = depth_fm_loss(d, t, mask)
        dm = d[mask].numpy()
        tm = t[mask].numpy()
        a = np.array([[np.sum(dm * dm), dm.sum()], [dm.sum(), dm.size]])
        rhs = np.array([np.sum(dm * tm), tm.sum()])
        scale, shift = np.linalg.solve(a, rhs)
        ref = np.mean((scale * dm + shift - tm) ** 2)
        assert abs(float(out.value) - ref) < 1e-10

    def test_scale_shift_invariance(self):
        d = rand(8, 8, seed=14, lo=0.5, hi=2.0)
        t = rand(8, 8, seed=15, lo=1.0, hi=3.0)
        mask = full_mask(8, 8)
        base = float(depth_fm_loss(d, t, mask).value)
        for alpha, beta in ((2.0, 0.0), (0.5, 1.0), (-1.5, 0.3)):
            v = float(depth_fm_loss(alpha * d + beta, t, mask).value)
            assert abs(v - base) < 1e-8


class TestLightReg:
    def test_gray_map_zero(self):
        cube = torch.full((6, 4, 4, 3), 0.5, dtype=D)  # exactly representable
        assert float(light_reg(cube).value) == 0.0
        assert float(light_reg(torch.full((6, 4, 4, 3), 0.37, dtype=D)).value) < 1e-20
        g = torch.Generator().manual_seed(16)
        vals = torch.rand(6, 4, 4, 1, generator=g, dtype=D)
        assert float(light_reg(vals.expand(6, 4, 4, 3)).value) < 1e-15

    def test_single_saturated_texel(self):
        cube = torch.full((6, 2, 2, 3), 0.5, dtype=D)
        cube[0, 0, 0] = torch.tensor([1.0, 0.0, 0.0], dtype=D)
        texels = 6 * 2 * 2
        expected = (2.0 / 3.0) / texels
        assert abs(float(light_reg(cube).value) - expected) < 1e-12

    def test_matches_naive_loop(self):
        g = torch.Generator().manual_seed(17)
        cube = torch.rand(6, 3, 3, 3, generator=g, dtype=D)
        ref = 0.0
        arr = cube.numpy()
        for f in range(6):
            for i in range(3):
                for j in range(3):
                    m = arr[f, i, j].mean()
                    ref += np.sum((arr[f, i, j] - m) ** 2)
        ref /= 6 * 3 * 3
        assert abs(float(light_reg(cube).value) - ref) < 1e-12

    def test_channel_permutation_invariance(self):
        g = torch.Generator().manual_seed(18)
        cube = torch.rand(6, 3, 3, 3, generator=g, dtype=D)
        base = float(light_reg(cube).value)
        for perm in ((2, 0, 1), (1, 0, 2), (2, 1, 0)):
            assert abs(float(light_reg(cube[..., list(perm)]).value) - base) < 1e-12


class TestPbrSmoothness:
    def test_constant_attribute_zero(self):
        x = torch.full((6, 6), 0.5, dtype=D)
        ref = rand(6, 6, 3, seed=19)
        assert float(pbr_smoothness(x, ref, full_mask(6, 6)).value) == 0.0

    def test_unit_step_flat_reference(self):
        x = torch.zeros(4, 6, dtype=D)
        x[:, 3:] = 1.0
        ref = torch.full((4, 6, 3), 0.5, dtype=D)
        out = pbr_smoothness(x, ref, full_mask(4, 6))
        # each row contributes one unit edge at column 2 -> 4 edges over 24 px
        assert abs(float(out.value) - 4.0 / 24.0) < 1e-12

    def test_edge_aligned_step_costs_less(self):
        x = torch.zeros(4, 6, dtype=D)
        x[:, 3:] = 1.0
        flat = torch.full((4, 6, 3), 0.5, dtype=D)
        edged = flat.clone()
        edged[:, 3:, :] = 0.9  # strong reference edge at the same column
        cost_flat = float(pbr_smoothness(x, flat, full_mask(4, 6)).value)
        cost_edge = float(pbr_smoothness(x, edged, full_mask(4, 6)).value)
        g = 3 * 0.4
        assert cost_edge < cost_flat
        assert abs(cost_edge - math.exp(-g) * cost_flat) < 1e-9


class TestTotalLoss:
    def _maps(self, h=16, w=16):
        cam = frontal_camera(width=w, height=h, focal=20.0)
        color = rand(h, w, 3, seed=20)
        ref = rand(h, w, 3, seed=21)
        normal = torch.zeros(h, w, 3, dtype=D)
        normal[..., 2] = -1.0
        depth = torch.full((h, w), 2.0, dtype=D)
        pn = normal.clone()
        pd = depth * 1.1 + 0.2
        return cam, color, ref, normal, depth, pn, pd

    def test_all_zero_components(self):
        cam, color, ref, normal, depth, pn, pd = self._maps()
        cfg = TrainConfig(ssim_weight=0.0)
        rep = total_loss(1, color, color.clone(), normal, depth, pn, pd,
                         full_mask(16, 16), cam, cfg)
        assert rep.rgb == 0.0
        assert rep.normal_fm == 0.0
        assert rep.depth_fm < 1e-12
        assert rep.total < 1e-9

    def test_stage1_paper_weights(self):
        # engineered components: L_n = 1 (orthogonal), L_d = 1 (degenerate
        # two-value case), L_GS = 0 -> total = 0.55 with default weights
        cam = frontal_camera(width=2, height=1, focal=8.0)
        color = torch.zeros(1, 2, 3, dtype=D)
        normal = torch.zeros(1, 2, 3, dtype=D)
        normal[..., 0] = 1.0
        pseudo_normal = torch.zeros(1, 2, 3, dtype=D)
        pseudo_normal[..., 1] = 1.0  # orthogonal: L1 2 + cos 1 = 3... use antipodal mix
        depth = torch.ones(1, 2, dtype=D)
        pseudo_depth = torch.tensor([[0.0, 2.0]], dtype=D)
        cfg = TrainConfig(ssim_weight=0.0, lambda_normal_consistency=0.0)
        # normal orthogonal gives L_n = 3; rescale the weight check instead:
        rep = total_loss(1, color, color.clone(), normal, depth, pseudo_normal,
                         pseudo_depth, full_mask(1, 2), cam, cfg,
                         enable_normal_consistency=False)
        expected = cfg.lambda_normal_fm * 3.0 + cfg.lambda_depth_fm * 1.0
        assert abs(rep.total - expected) < 1e-9
        assert abs(expected - (0.5 * 3.0 + 0.05)) < 1e-12

    def test_stage1_unit_terms_sum_to_055(self):
        # same construction but normalize terms to 1 via custom weights
        cam = frontal_camera(width=2, height=1, focal=8.0)
        color = torch.zeros(1, 2, 3, dtype=D)
        normal = torch.zeros(1, 2, 3, dtype=D)
        normal[..., 0] = 1.0
        pseudo = torch.zeros(1, 2, 3, dtype=D)
        pseudo[..., 1] = 1.0
        depth = torch.ones(1, 2, dtype=D)
        pseudo_depth = torch.tensor([[0.0, 2.0]], dtype=D)
        cfg = TrainConfig(ssim_weight=0.0, lambda_normal_fm=0.5 / 3.0)
        rep = total_loss(1, color, color.clone(), normal, depth, pseudo,
                         pseudo_depth, full_mask(1, 2), cam, cfg,
                         enable_normal_consistency=False)
        # L_n contributes 0.5, L_d contributes 0.05
        assert abs(rep.total - 0.55) < 1e-9

    def test_stage2_weighted_sum_matches_hand_computation(self):
        cam, color, ref, normal, depth, pn, pd = self._maps()
        cfg = TrainConfig(ssim_weight=0.2)
        cube = rand(6, 4, 4, 3, seed=22)
        albedo = rand(16, 16, 3, seed=23)
        metallic = rand(16, 16, seed=24)
        rough = rand(16, 16, seed=25)
        mask = full_mask(16, 16)
        rep = total_loss(2, color, ref, normal, depth, pn, pd, mask, cam, cfg,
                         cube_map=cube, albedo_map=albedo, metallic_map=metallic,
                         roughness_map=rough)
        hand = (
            float(rgb_loss(color, ref, mask, 0.2).value)
            + cfg.lambda_normal_consistency * float(normal_consistency_loss(normal, depth, cam, mask).value)
            + cfg.lambda_normal_fm * float(normal_fm_loss(normal, pn, mask).value)
            + cfg.lambda_depth_fm * float(depth_fm_loss(depth, pd, mask).value)
            + cfg.lambda_light * float(light_reg(cube).value)
            + cfg.lambda_albedo_smooth * float(pbr_smoothness(albedo, ref, mask).value)
            + cfg.lambda_metallic_smooth * float(pbr_smoothness(metallic, ref, mask).value)
            + cfg.lambda_roughness_smooth * float(pbr_smoothness(rough, ref, mask).value)
        )
        assert abs(rep.total - hand) < 1e-9

    def test_stage_gating_rejects_missing_cube(self):
        cam, color, ref, normal, depth, pn, pd = self._maps()
        cfg = TrainConfig()
        with pytest.raises(ValueError):
            total_loss(2, color, ref, normal, depth, pn, pd, full_mask(16, 16), cam, cfg)

    def test_linear_in_weights(self):
        cam, color, ref, normal, depth, pn, pd = self._maps()
        mask = full_mask(16, 16)
        lo = TrainConfig(ssim_weight=0.0, lambda_normal_fm=0.1)
        hi = TrainConfig(ssim_weight=0.0, lambda_normal_fm=0.2)
        zero = TrainConfig(ssim_weight=0.0, lambda_normal_fm=0.0)
        r_lo = total_loss(1, color, ref, normal, depth, pn, pd, mask, cam, lo)
        r_hi = total_loss(1, color, ref, normal, depth, pn, pd, mask, cam, hi)
        r_z = total_loss(1, color, ref, normal, depth, pn, pd, mask, cam, zero)
        assert abs((r_hi.total - r_z.total) - 2 * (r_lo.total - r_z.total)) < 1e-9


class TestAdjoints:
    def _fd(self, fn, x, h=1e-4, samples=12, seed=0, rtol=1e-3):
        x = x.clone().requires_grad_(True)
        (g,) = loss_adjoints(fn(x), [x])
        flat = x.detach().reshape(-1)
        gflat = g.reshape(-1)
        rng = np.random.RandomState(seed)
        idxs = rng.choice(flat.numel(), size=min(samples, flat.numel()), replace=False)
        with torch.no_grad():
            for i in idxs:
                orig = float(flat[i])
                flat[i] = orig + h
                fp = float(fn(x.detach()))
                flat[i] = orig - h
                fm = float(fn(x.detach()))
                flat[i] = orig
                fd = (fp - fm) / (2 * h)
                ag = float(gflat[i])
                assert abs(fd - ag) / max(abs(fd), abs(ag), 1e-6) < rtol, (i, fd, ag)

    def test_rgb_adjoint(self):
        ref = rand(8, 8, 3, seed=26)
        mask = full_mask(8, 8)
        self._fd(lambda x: rgb_loss(x, ref, mask, ssim_weight=0.2, window=5).value,
                 rand(8, 8, 3, seed=27))

    def test_normal_fm_adjoint(self):
        pn = rand(8, 8, 3, seed=28, lo=-1.0, hi=1.0)
        pn = pn / pn.norm(dim=-1, keepdim=True)
        mask = full_mask(8, 8)
        self._fd(lambda x: normal_fm_loss(x, pn, mask).value,
                 rand(8, 8, 3, seed=29, lo=0.2, hi=1.0))

    def test_depth_fm_adjoint_detached_alignment(self):
        pd = rand(8, 8, seed=30, lo=1.0, hi=3.0)
        mask = rand(8, 8, seed=31) > 0.2
        self._fd(lambda x: depth_fm_loss(x, pd, mask).value,
                 rand(8, 8, seed=32, lo=0.5, hi=2.0))

    def test_light_reg_adjoint(self):
        self._fd(lambda x: light_reg(x).value, rand(6, 3, 3, 3, seed=33))

    def test_pbr_smoothness_adjoint(self):
        ref = rand(8, 8, 3, seed=34)
        mask = full_mask(8, 8)
        self._fd(lambda x: pbr_smoothness(x, ref, mask).value,
                 rand(8, 8, seed=35))

    def test_normal_consistency_adjoint(self):
        cam = frontal_camera(width=8, height=8, focal=16.0)
        mask = full_mask(8, 8)
        base_depth = rand(8, 8, seed=36, lo=1.8, hi=2.2)
        normal = rand(8, 8, 3, seed=37, lo=-1.0, hi=1.0)

        def loss_depth(x):
            return normal_consistency_loss(normal, x, cam, mask).value

        def loss_normal(x):
            return normal_consistency_loss(x, base_depth, cam, mask).value

        self._fd(loss_depth, base_depth, h=1e-5)
        self._fd(loss_normal, normal)
