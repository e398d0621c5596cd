import math

import numpy as np
import pytest

from fdcheck import max_fd_error
from oracles import margin_oracle
from voxelgeo.camera import CameraIntrinsics, CameraPose, CameraView
from voxelgeo.errors import KindError, ShapeError, StateError
from voxelgeo.shaping import (ShapingNet, ShapingNetConfig, SurfaceVolume, apply_shaping,
                              apply_shaping_backward, focal_loss, focal_loss_with_logits,
                              ray_margin_voxels, surface_labels, surface_loss, traverse_grid)
from voxelgeo.synthetic import generate_synthetic_scene
from voxelgeo.volume import VoxelGridSpec

LINE = VoxelGridSpec((0.0, -1.5, -1.5), 1.0, (16, 3, 3))


def axis_view(depth_value):
    """1x1 camera at x=-1 looking down +x through the middle row of LINE."""
    pose = CameraPose.look_at((-1.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    intr = CameraIntrinsics(1.0, 1.0, 0.5, 0.5, 1, 1)
    return CameraView(intr, pose, np.zeros((1, 1, 1)), depth=np.full((1, 1), depth_value))


class TestTraversal:
    def test_axis_ray(self):
        vox, t_in, t_out = traverse_grid((-1.0, 0.0, 0.0), (1.0, 0.0, 0.0), LINE)
        np.testing.assert_array_equal(vox[:, 0], np.arange(16))
        assert np.all(vox[:, 1:] == 1)
        np.testing.assert_allclose(t_in, np.arange(16) + 1.0)
        np.testing.assert_allclose(t_out, np.arange(16) + 2.0)

    def test_miss(self):
        vox, _, _ = traverse_grid((-1.0, 5.0, 0.0), (1.0, 0.0, 0.0), LINE)
        assert len(vox) == 0

    def test_t_max(self):
        vox, _, _ = traverse_grid((-1.0, 0.0, 0.0), (1.0, 0.0, 0.0), LINE, t_max=4.5)
        assert len(vox) == 4

    def test_face_connected(self):
        spec = VoxelGridSpec((0, 0, 0), 0.3, (10, 10, 10))
        vox, t_in, t_out = traverse_grid((-0.2, 0.4, 0.1), (0.8, 0.35, 0.5), spec)
        assert np.all(np.abs(np.diff(vox, axis=0)).sum(axis=1) == 1)
        np.testing.assert_allclose(t_in[1:], t_out[:-1])


class TestSurfaceLabels:
    def test_empty(self):
        labels = surface_labels(np.zeros((0, 3)), [], LINE)
        assert labels.kind == "label" and not labels.values.any()

    def test_single_point_no_margin(self):
        spec = VoxelGridSpec((0, 0, 0), 0.5, (4, 4, 4))
        labels = surface_labels([spec.center_of((1, 2, 3))], [], spec, margin=0)
        expect = np.zeros((4, 4, 4))
        expect[1, 2, 3] = 1
        np.testing.assert_array_equal(labels.values, expect)

    def test_ray_margin_along_x(self):
        # hit at x = 8.5, inside voxel 8; eps=4 marks voxels 4..12 on that row only
        labels = surface_labels([(8.5, 0.0, 0.0)], [axis_view(9.5)], LINE, margin=4)
        expect = np.zeros(LINE.extents)
        expect[4:13, 1, 1] = 1
        np.testing.assert_array_equal(labels.values, expect)

    def test_margin_clipped_at_grid_edge(self):
        labels = surface_labels([], [axis_view(3.5)], LINE, margin=4)  # hit voxel 2
        assert labels.values[:, 1, 1].tolist() == [1.0] * 7 + [0.0] * 9

    @pytest.mark.parametrize("sides,lo,hi", [("front", 4, 8), ("back", 8, 12)])
    def test_one_sided(self, sides, lo, hi):
        labels = surface_labels([], [axis_view(9.5)], LINE, margin=4, sides=sides)
        np.testing.assert_array_equal(np.nonzero(labels.values[:, 1, 1])[0],
                                      np.arange(lo, hi + 1))

    def test_invalid_depth_ignored(self):
        labels = surface_labels([], [axis_view(0.0)], LINE, margin=4)
        assert not labels.values.any()

    def test_isotropic_mode(self):
        spec = VoxelGridSpec((0, 0, 0), 1.0, (9, 9, 9))
        labels = surface_labels([spec.center_of((4, 4, 4))], [], spec, margin=2, mode="isotropic")
        assert labels.values.sum() == 33  # lattice points in a radius-2 ball
        assert labels.values[4, 4, 6] == 1 and labels.values[4, 6, 6] == 0

    @pytest.mark.parametrize("seed", range(20))
    def test_dda_fixture(self, seed):
        rng = np.random.default_rng(seed)
        spec = VoxelGridSpec((0, 0, 0), float(rng.uniform(0.1, 0.4)), (12, 12, 12))
        origin = np.asarray(spec.origin) - rng.uniform(0.2, 1.0, 3)
        target = np.asarray(spec.origin) + spec.size_m * rng.uniform(0.3, 0.7, 3)
        d = target - origin
        hit = float(np.linalg.norm(d))
        d /= hit
        got = [tuple(v) for v in ray_margin_voxels(origin, d, hit, spec, 4)]
        assert got == margin_oracle(origin, d, hit, spec, 4)

    def test_monotone_in_margin(self):
        scene = generate_synthetic_scene(seed=3, num_views=2)
        views = scene.views
        prev = None
        for eps in (0, 1, 2, 4):
            cur = surface_labels(scene.points, views, scene.spec, eps, pixel_step=3).values > 0
            if prev is not None:
                assert np.all(cur >= prev)
            prev = cur


class TestShapingNet:
    def config(self, **kw):
        return ShapingNetConfig(in_channels=4, base_channels=4, **kw)

    def test_zero_weights_half(self):
        net = ShapingNet(self.config(), rng=0)
        for t in net.parameters():
            t.data[...] = 0.0
        s = net.forward(np.random.default_rng(0).normal(size=(4, 8, 8, 4)))
        np.testing.assert_array_equal(s, 0.5)

    def test_shape_contract(self):
        net = ShapingNet(self.config(), rng=1)
        s = net.forward(np.random.default_rng(1).normal(size=(4, 8, 12, 4)))
        assert s.shape == (8, 12, 4)
        assert np.all((s > 0) & (s < 1))

    def test_indivisible_extents(self):
        with pytest.raises(ShapeError):
            ShapingNet(self.config(), rng=0).forward(np.zeros((4, 6, 8, 4)))

    def test_backward_before_forward(self):
        with pytest.raises(StateError):
            ShapingNet(self.config(), rng=0).backward_logits(np.zeros((4, 4, 4)))

    @pytest.mark.parametrize("residual", [True, False])
    def test_focal_loss_gradient(self, residual):
        rng = np.random.default_rng(2)
        net = ShapingNet(self.config(residual=residual), rng=rng)
        x = rng.normal(size=(4, 8, 8, 4))
        y = (rng.uniform(size=(8, 8, 4)) < 0.3).astype(float)

        def loss():
            return focal_loss_with_logits(net.forward_logits(x), y)[0]

        net.zero_grad()
        _, g = focal_loss_with_logits(net.forward_logits(x), y)
        gx = net.backward_logits(g)
        params = net.parameters()
        err = max_fd_error(loss, [t.data for t in params] + [x],
                           [t.grad for t in params] + [gx], count=100, rng=3)
        assert err < 1e-4

    def test_deterministic(self):
        x = np.random.default_rng(4).normal(size=(4, 8, 8, 4))
        a = ShapingNet(self.config(), rng=5).forward(x)
        b = ShapingNet(self.config(), rng=5).forward(x)
        assert a.tobytes() == b.tobytes()


class TestApplyShaping:
    def test_ones_identity(self):
        v = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
        np.testing.assert_array_equal(apply_shaping(v, np.ones((2, 2, 2))), v)

    def test_zeros(self):
        v = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
        assert not apply_shaping(v, np.zeros((2, 2, 2))).any()

    def test_single_voxel_half(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(3, 2, 2, 2))
        s = rng.uniform(size=(2, 2, 2))
        s[1, 0, 1] = 0.5
        out = apply_shaping(v, s)
        np.testing.assert_array_equal(out[:, 1, 0, 1], v[:, 1, 0, 1] / 2)
        np.testing.assert_array_equal(out, v * s)

    def test_spec_mismatch(self):
        with pytest.raises(ShapeError):
            apply_shaping(np.zeros((1, 2, 2, 2)), np.zeros((2, 2, 3)))

    def test_backward(self):
        rng = np.random.default_rng(2)
        v, g = rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(3, 2, 2, 2))
        np.testing.assert_allclose(apply_shaping_backward(g, v), (g * v).sum(axis=0))


class TestFocalLoss:
    def test_confident_positive(self):
        assert focal_loss(np.array([1 - 1e-12]), np.array([1.0])) < 1e-20

    def test_half_positive(self):
        assert focal_loss(np.array([0.5]), np.array([1.0])) == pytest.approx(
            0.25 * 0.25 * math.log(2), abs=1e-15)
        assert 0.25 * 0.25 * math.log(2) == pytest.approx(0.043321, abs=1e-6)

    def test_degenerates_to_bce(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.01, 0.99, 50)
        y = (rng.uniform(size=50) < 0.5).astype(float)
        bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert focal_loss(p, y, gamma=0.0, alpha=0.5) == pytest.approx(0.5 * bce, rel=1e-14)

    def test_logit_form_agrees(self):
        rng = np.random.default_rng(1)
        z = rng.normal(0, 3, 40)
        y = (rng.uniform(size=40) < 0.4).astype(float)
        p = 1 / (1 + np.exp(-z))
        assert focal_loss_with_logits(z, y)[0] == pytest.approx(focal_loss(p, y), rel=1e-12)

    def test_extreme_logits_finite(self):
        loss, g = focal_loss_with_logits(np.array([-800.0, 800.0]), np.array([1.0, 0.0]))
        assert np.isfinite(loss) and np.all(np.isfinite(g))

    def test_logit_gradient(self):
        rng = np.random.default_rng(2)
        z = rng.normal(0, 2, 30)
        y = (rng.uniform(size=30) < 0.5).astype(float)
        _, g = focal_loss_with_logits(z, y)
        assert max_fd_error(lambda: focal_loss_with_logits(z, y)[0], [z], [g], 30) < 1e-4

    def test_surface_loss_kinds_and_grad(self):
        spec = VoxelGridSpec((0, 0, 0), 1.0, (2, 2, 2))
        rng = np.random.default_rng(3)
        p = rng.uniform(0.05, 0.95, (2, 2, 2))
        lab = SurfaceVolume(spec, (rng.uniform(size=(2, 2, 2)) < 0.5).astype(float), "label")
        pred = SurfaceVolume(spec, p, "predicted")
        loss, g = surface_loss(pred, lab)
        assert loss == pytest.approx(focal_loss(p, lab.values))
        assert max_fd_error(lambda: surface_loss(pred, lab)[0], [p], [g], 8) < 1e-4
        with pytest.raises(KindError):
            surface_loss(pred, pred)
        with pytest.raises(KindError):
            SurfaceVolume(spec, p, "guess")
