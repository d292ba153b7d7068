import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsmaps.avatar import GaussianAvatar
from gsmaps.mesh import build_shell_stack
from gsmaps.optimize import (DuplicatePointError, FitConfig, OptimizerState, compute_s_ref, fit, initial_textures,
                             loss_and_grad, nearest_neighbors, optimizer_step, photometric_loss, scaling_reg,
                             write_trace_csv)
from gsmaps.render import RenderOutput, look_at, render
from gsmaps.shellmap import SCALE, ShellTextureStack, sample_gaussians, stack_mask
from gsmaps.template import sphere_rig


def image(color, alpha):
    color, alpha = np.asarray(color, dtype=np.float64), np.asarray(alpha, dtype=np.float64)
    return RenderOutput(color, alpha, 1.0 - alpha, np.zeros(alpha.shape, dtype=np.int32))


def grid_points(d, n=6, origin=(0.3, -1.2, 2.0)):
    i, j, k = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    return np.asarray(origin) + d * np.stack([i, j, k], -1).reshape(-1, 3)


@pytest.fixture(scope="module")
def tiny():
    """Two-shell sphere with 10 Gaussians, 8x8 textures, and two random target views."""
    rig = sphere_rig(0)
    stack = build_shell_stack(rig, 2, 0.1)
    anchors = sample_gaussians(stack, 10, 4)
    s_ref = compute_s_ref(anchors.positions(stack.vertex_array(), stack.faces))
    tex = initial_textures(stack, 8, 8, s_ref, rig)
    rng = np.random.default_rng(0)
    tex.data += rng.normal(scale=0.3, size=tex.data.shape) * tex.mask[..., None]
    cams = [look_at([0, 0, 3], [0, 0, 0], fov_deg=40, width=24, height=24),
            look_at([3, 0.5, 0], [0, 0, 0], fov_deg=40, width=24, height=24)]
    targets = [(rng.uniform(size=(24, 24, 3)), rng.uniform(size=(24, 24))) for _ in cams]
    return rig, stack, anchors, tex, s_ref, cams, targets


class TestNearestNeighbors:
    def test_two_points(self):
        pts = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        assert compute_s_ref(pts) == pytest.approx(math.log(2.0), abs=1e-15)

    @pytest.mark.parametrize("d", [0.05, 0.37, 2.0])
    def test_regular_grid(self, d):
        assert abs(compute_s_ref(grid_points(d)) - math.log(d)) <= 1e-6

    @pytest.mark.parametrize("n", [2, 7, 200, 500])
    def test_grid_equals_brute_force(self, n):
        pts = np.random.default_rng(n).normal(size=(n, 3))
        gd, gi = nearest_neighbors(pts)
        bd, bi = nearest_neighbors(pts, "brute")
        assert np.array_equal(gd, bd)
        assert np.array_equal(gi, bi)

    def test_clustered_points_equal_brute_force(self):
        rng = np.random.default_rng(1)
        pts = np.concatenate([rng.normal(scale=1e-3, size=(200, 3)), rng.normal(scale=10, size=(50, 3))])
        assert np.array_equal(nearest_neighbors(pts)[0], nearest_neighbors(pts, "brute")[0])

    def test_ties_go_to_lower_index(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
        assert nearest_neighbors(pts)[1].tolist() == [1, 0, 0]

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 300))
    def test_permutation_invariant(self, seed, n):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-1, 1, (n, 3))
        assert compute_s_ref(pts) == compute_s_ref(pts[rng.permutation(n)])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), shift=st.lists(st.integers(-2**20, 2**20), min_size=3, max_size=3))
    def test_translation_invariant(self, seed, shift):
        # dyadic coordinates and shifts make every translated point exact
        pts = np.random.default_rng(seed).integers(-2**10, 2**10, (300, 3)) / 2**10
        pts = np.unique(pts, axis=0)
        assert compute_s_ref(pts) == compute_s_ref(pts + np.asarray(shift) / 2**6)

    def test_duplicate_names_pair(self):
        pts = np.random.default_rng(3).normal(size=(20, 3))
        pts[13] = pts[4]
        with pytest.raises(DuplicatePointError, match="points 4 and 13"):
            compute_s_ref(pts)

    def test_single_point_rejected(self):
        with pytest.raises(ValueError, match="two points"):
            compute_s_ref(np.zeros((1, 3)))


class TestScalingReg:
    def test_at_reference_is_zero(self):
        mask = np.ones((2, 4, 4), bool)
        loss, grad = scaling_reg(np.full((2, 4, 4, 3), -2.5), mask, -2.5)
        assert loss == 0.0 and not grad.any()

    def test_one_texel_off_by_one(self):
        mask = np.zeros((1, 3, 3), bool)
        mask[0, 1, 2] = True
        raw = np.zeros((1, 3, 3, 3))
        raw[0, 1, 2] = 1.0
        loss, grad = scaling_reg(raw + 5.0, mask, 5.0)
        assert loss == pytest.approx(1.0)
        np.testing.assert_allclose(grad[0, 1, 2], 2.0 / 3.0)
        grad[0, 1, 2] = 0
        assert not grad.any()

    def test_empty_mask(self):
        loss, grad = scaling_reg(np.ones((1, 2, 2, 3)), np.zeros((1, 2, 2), bool), 0.0)
        assert loss == 0.0 and not grad.any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            scaling_reg(np.ones((1, 2, 2, 3)), np.ones((1, 3, 2), bool), 0.0)

    def test_transpose(self):
        rng = np.random.default_rng(0)
        mask = rng.uniform(size=(2, 5, 5)) < 0.6
        raw = rng.normal(size=(2, 5, 5, 3))
        d = rng.normal(size=raw.shape)
        _, grad = scaling_reg(raw, mask, -1.0)
        h = 1e-6
        fd = (scaling_reg(raw + h * d, mask, -1.0)[0] - scaling_reg(raw - h * d, mask, -1.0)[0]) / (2 * h)
        assert abs(fd - np.sum(grad * d)) <= 1e-6


class TestPhotometricLoss:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(0)
        c, a = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4))
        loss, dc, da = photometric_loss(image(c, a), c, a)
        assert loss == 0.0 and not dc.any() and not da.any()

    def test_color_only(self):
        loss, _, _ = photometric_loss(image(np.full((1, 1, 3), 0.5), [[1.0]]), np.zeros((1, 1, 3)), [[0.0]], 0.0)
        assert loss == pytest.approx(0.25)

    def test_alpha_only(self):
        alpha = np.zeros((2, 2))
        alpha[0, 1] = 1.0
        loss, _, _ = photometric_loss(image(np.zeros((2, 2, 3)), alpha), np.zeros((2, 2, 3)), np.zeros((2, 2)), 1.0)
        assert loss == pytest.approx(0.25)

    def test_adjoints(self):
        rng = np.random.default_rng(1)
        c, a = rng.uniform(size=(3, 5, 3)), rng.uniform(size=(3, 5))
        tc, ta = rng.uniform(size=(3, 5, 3)), rng.uniform(size=(3, 5))
        _, dc, da = photometric_loss(image(c, a), tc, ta, 0.7)
        vc, va = rng.normal(size=c.shape), rng.normal(size=a.shape)
        h = 1e-6
        f = lambda s: photometric_loss(image(c + s * vc, a + s * va), tc, ta, 0.7)[0]
        assert abs((f(h) - f(-h)) / (2 * h) - np.sum(dc * vc) - np.sum(da * va)) <= 1e-8

    def test_size_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            photometric_loss(image(np.zeros((2, 2, 3)), np.zeros((2, 2))), np.zeros((3, 2, 3)), np.zeros((3, 2)))


class TestOptimizerStep:
    def test_zero_gradient(self):
        p = np.arange(6.0).reshape(2, 3)
        new, st_ = optimizer_step(p, np.zeros_like(p), OptimizerState.zeros_like(p))
        assert np.array_equal(new, p) and st_.step == 1

    def test_first_step_moves_by_lr(self):
        p = np.array([3.0])
        new, _ = optimizer_step(p, np.array([1.0]), OptimizerState.zeros_like(p), lr=0.002)
        np.testing.assert_allclose(new, 3.0 - 0.002, rtol=1e-7)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        p, g = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        s = OptimizerState(rng.normal(size=(4, 4)), rng.uniform(size=(4, 4)), 7)
        a, b = optimizer_step(p, g, s), optimizer_step(p, g, s)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].v, b[1].v)

    def test_non_finite_gradient_names_texel(self):
        p = np.zeros((2, 3, 3, 11))
        g = np.zeros_like(p)
        g[1, 2, 0, 5] = np.nan
        with pytest.raises(FloatingPointError, match=r"\(1, 2, 0, 5\)"):
            optimizer_step(p, g, OptimizerState.zeros_like(p))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            optimizer_step(np.zeros(3), np.zeros(4), OptimizerState.zeros_like(np.zeros(3)))


class TestFitConfig:
    def test_defaults(self):
        c = FitConfig()
        assert c.lr == 0.002 and c.lambda_s == 0.1 and c.betas == (0.9, 0.999)

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(betas=(0.9, 1.0)), dict(iterations=-1),
                                    dict(cameras=[None], targets=[])])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FitConfig(**kw)


class TestFit:
    def test_zero_iterations_returns_initialized_stack(self, tiny):
        rig, stack, anchors, _, s_ref, cams, targets = tiny
        res = fit(rig, stack, anchors, FitConfig(cams, targets, iterations=0), texture_size=(8, 8), s_ref=s_ref)
        init = initial_textures(stack, 8, 8, s_ref, rig)
        assert np.array_equal(res.textures.data, init.data)
        assert np.array_equal(res.textures.mask, init.mask)
        assert res.trace == []

    def test_initialization(self, tiny):
        rig, stack, _, _, s_ref, _, _ = tiny
        tex = initial_textures(stack, 8, 8, s_ref, rig)
        m = tex.mask
        np.testing.assert_array_equal(tex.data[m][:, SCALE], s_ref)
        np.testing.assert_array_equal(tex.data[m][:, :4], 0.0)
        np.testing.assert_array_equal(tex.data[m][:, 7:], [[1, 0, 0, 0]] * int(m.sum()))

    def test_reproducible_and_thread_independent(self, tiny):
        rig, stack, anchors, tex, s_ref, cams, targets = tiny
        runs = [fit(rig, stack, anchors, FitConfig(cams, targets, iterations=5, lr=0.01, threads=t),
                    textures=tex, s_ref=s_ref) for t in (1, 1, 4)]
        for r in runs[1:]:
            assert np.array_equal(r.textures.data, runs[0].textures.data)
            assert r.trace == runs[0].trace

    def test_loss_decreases(self, tiny):
        rig, stack, anchors, tex, s_ref, cams, targets = tiny
        res = fit(rig, stack, anchors, FitConfig(cams, targets, iterations=30, lr=0.02), textures=tex, s_ref=s_ref)
        assert res.trace[-1][3] < res.trace[0][3]

    def test_minibatch_uses_seed(self, tiny):
        rig, stack, anchors, tex, s_ref, cams, targets = tiny
        run = lambda seed: fit(rig, stack, anchors, FitConfig(cams, targets, iterations=4, batch_size=1, seed=seed),
                               textures=tex, s_ref=s_ref).trace
        assert run(3) == run(3)

    def test_callback_schedule(self, tiny):
        rig, stack, anchors, tex, s_ref, cams, targets = tiny
        seen = []
        fit(rig, stack, anchors, FitConfig(cams, targets, iterations=7, log_interval=3), textures=tex, s_ref=s_ref,
            callback=lambda it, t, row: seen.append(it))
        assert seen == [3, 6, 7]

    def test_callback_can_stop_early(self, tiny):
        rig, stack, anchors, tex, s_ref, cams, targets = tiny
        res = fit(rig, stack, anchors, FitConfig(cams, targets, iterations=9, log_interval=2), textures=tex,
                  s_ref=s_ref, callback=lambda it, t, row: np.float64(it) >= 4)
        assert len(res.trace) == 4

    def test_end_to_end_gradient(self, tiny):
        rig, stack, anchors, tex, s_ref, cams, targets = tiny
        avatar = GaussianAvatar(rig, stack, anchors, tex, s_ref)
        config = FitConfig(cams, targets, iterations=1, background=(0.2, 0.4, 0.6))
        views = range(len(cams))
        data = tex.data
        *_, grad = loss_and_grad(avatar, data, config, views)
        h = 1e-4
        ok = total = 0
        for idx in zip(*np.nonzero(np.abs(grad) > 1e-6)):
            vals = []
            for sgn in (1, -1):
                d = data.copy()
                d[idx] += sgn * h
                vals.append(loss_and_grad(avatar, d, config, views)[2])
            fd = (vals[0] - vals[1]) / (2 * h)
            total += 1
            ok += abs(fd - grad[idx]) <= 1e-3 * max(abs(fd), abs(grad[idx]))
        assert total > 50
        assert ok / total >= 0.95

    def test_trace_csv(self, tmp_path):
        write_trace_csv([(0, 1.5, 0.25, 1.525), (1, 1.0, 0.125, 1.0125)], tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["iteration", "photometric", "scaling_reg", "total"]
        assert [float(x) for x in rows[2]] == [1, 1.0, 0.125, 1.0125]

    def test_texture_shell_count_mismatch(self, tiny):
        rig, stack, anchors, tex, s_ref, _, _ = tiny
        one = ShellTextureStack(tex.data[:1].copy(), tex.mask[:1].copy())
        with pytest.raises(ValueError, match="shells"):
            GaussianAvatar(rig, stack, anchors, one, s_ref)

    def test_mask_matches_stack(self, tiny):
        rig, stack, _, tex, _, _, _ = tiny
        assert np.array_equal(stack_mask(rig, 2, 8, 8), tex.mask)
