import numpy as np
import pytest

from layerview.backbone import UNetConfig, init_weights
from layerview.psv import build_psv, make_schedule
from layerview.scenes_io import FamilySpec, generate_scene_family
from layerview.tensor import ShapeError, Tensor
from layerview.training import (Lion, LossConfig, TrainConfig,
                                TrainingDivergedError, loss, psnr,
                                sample_patch, ssim, train_toy, write_metrics_csv)

from util import check_gradient, weighted_sum


class StubRng:
    """Scripted integer stream standing in for a Generator in patch tests."""

    def __init__(self, values):
        self.values = list(values)

    def integers(self, low, high):
        v = self.values.pop(0)
        assert low <= v < high, f"scripted value {v} outside [{low}, {high})"
        return v


class TestSsim:
    def test_identical_images(self):
        rng = np.random.default_rng(0)
        x = rng.random((3, 16, 16)).astype(np.float32)
        assert float(ssim(x, x).data) == pytest.approx(1.0, abs=1e-6)

    def test_inverted_checkerboard_negative(self):
        yy, xx = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        board = ((yy + xx) % 2).astype(np.float32)
        img = np.stack([board] * 3)
        assert float(ssim(img, 1.0 - img).data) < 0.0

    def test_constant_images_closed_form(self):
        a, d = 0.5, 0.1
        x = np.full((1, 16, 16), a, dtype=np.float64)
        y = np.full((1, 16, 16), a + d, dtype=np.float64)
        c1 = 0.01 ** 2
        want = (2 * a * (a + d) + c1) / (a * a + (a + d) ** 2 + c1)
        assert float(ssim(x, y).data) == pytest.approx(want, rel=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        x = rng.random((3, 20, 20))
        y = rng.random((3, 20, 20))
        assert float(ssim(x, y).data) == pytest.approx(float(ssim(y, x).data), abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((3, 16, 16)), np.zeros((3, 16, 17)))

    def test_window_must_fit(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        y = Tensor(rng.random((1, 14, 14)))
        check_gradient(lambda x: ssim(x, y), rng.random((1, 14, 14)), tol=1e-4)


class TestLoss:
    def test_zero_at_equality(self):
        rng = np.random.default_rng(3)
        x = rng.random((3, 16, 16)).astype(np.float32)
        assert float(loss(x, x).data) == pytest.approx(0.0, abs=1e-6)

    def test_l1_term_exact_for_constant_offset(self):
        rng = np.random.default_rng(4)
        y = rng.random((3, 16, 16)).astype(np.float64)
        cfg = LossConfig(use_ssim=False)
        value = float(loss(y, y + 0.1, cfg).data)
        assert value == pytest.approx(0.1, rel=1e-12)

    def test_matches_sum_of_terms(self):
        rng = np.random.default_rng(5)
        y = rng.random((3, 16, 16))
        yh = rng.random((3, 16, 16))
        total = float(loss(y, yh).data)
        l1 = float(np.mean(np.abs(y - yh)))
        ds = 1.0 - float(ssim(y, yh).data)
        assert total == pytest.approx(l1 + ds, rel=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            y = rng.random((3, 16, 16))
            yh = rng.random((3, 16, 16))
            assert float(loss(y, yh).data) >= 0.0

    def test_needs_one_term(self):
        with pytest.raises(ValueError):
            LossConfig(use_l1=False, use_ssim=False)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        y = Tensor(rng.random((1, 14, 14)))
        check_gradient(lambda x: loss(y, x), rng.random((1, 14, 14)) * 0.8 + 0.1,
                       tol=1e-4)


class TestPsnr:
    def test_identical_capped(self):
        x = np.random.default_rng(8).random((3, 8, 8))
        assert psnr(x, x) == 99.0

    def test_formula(self):
        a = np.zeros((1, 10, 10))
        b = np.full((1, 10, 10), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_random_pair_matches_direct_formula(self):
        rng = np.random.default_rng(9)
        a, b = rng.random((3, 6, 6)), rng.random((3, 6, 6))
        want = 10 * np.log10(1.0 / np.mean((a - b) ** 2))
        assert psnr(a, b) == pytest.approx(want, rel=1e-12)


class TestLion:
    def test_positive_gradient_moves_by_lr(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.array([0.5, 3.0])
        opt = Lion([p], lr=0.01)
        opt.step()
        np.testing.assert_allclose(p.data, [0.99, 1.99], atol=1e-12)

    def test_zero_gradient_zero_momentum_no_change(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([0.0])
        Lion([p], lr=0.01).step()
        np.testing.assert_array_equal(p.data, [1.0])

    def test_two_step_hand_trace(self):
        lr, b1, b2 = 0.1, 0.99, 0.90
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Lion([p], lr=lr, beta1=b1, beta2=b2)
        p.grad = np.array([1.0])
        opt.step()
        # sign(0.99*0 + 0.01*1) = +1 ; m = 0.9*0 + 0.1*1
        np.testing.assert_allclose(p.data, [-0.1], atol=1e-12)
        np.testing.assert_allclose(opt.momentum[0], [0.1], atol=1e-12)
        p.grad = np.array([-1.0])
        opt.step()
        # sign(0.99*0.1 - 0.01) = +1 ; m = 0.9*0.1 - 0.1
        np.testing.assert_allclose(p.data, [-0.2], atol=1e-12)
        np.testing.assert_allclose(opt.momentum[0], [-0.01], atol=1e-12)

    def test_update_magnitude_exactly_lr(self):
        rng = np.random.default_rng(10)
        p = Tensor(rng.standard_normal(100), requires_grad=True)
        before = p.data.copy()
        p.grad = rng.standard_normal(100)
        Lion([p], lr=0.003).step()
        moved = np.abs(p.data - before)
        assert set(np.round(np.unique(moved), 10)) <= {0.0, 0.003}

    def test_nan_gradient_rejected(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(TrainingDivergedError):
            Lion([p]).step()

    def test_skips_params_without_grad(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        Lion([p], lr=0.5).step()
        np.testing.assert_array_equal(p.data, [1.0])


class TestSamplePatch:
    def _bundle(self, size=32, views=2, targets=2, seed=0):
        spec = FamilySpec(width=size, height=size, num_views=views, num_targets=targets)
        return next(generate_scene_family(seed, spec))

    def test_full_image_identity(self):
        bundle = self._bundle(size=32)
        out = sample_patch(bundle, 32, StubRng([0, 0, 1]))
        img, cam = out.sources[0]
        np.testing.assert_array_equal(img, bundle.sources[0][0])
        assert cam.cx == bundle.sources[0][1].cx
        assert len(out.targets) == 1
        np.testing.assert_array_equal(out.targets[0][1], bundle.targets[1][1])

    def test_offset_shifts_principal_point(self):
        bundle = self._bundle(size=32)
        out = sample_patch(bundle, 24, StubRng([8, 0, 0]))
        for (img, cam), (_, orig) in zip(out.sources, bundle.sources):
            assert cam.cx == orig.cx - 8
            assert cam.cy == orig.cy
            assert img.shape == (3, 24, 24)
        assert out.targets[0][0].cx == bundle.targets[0][0].cx - 8

    def test_patch_constraints(self):
        bundle = self._bundle(size=32)
        with pytest.raises(ValueError):
            sample_patch(bundle, 20, StubRng([0, 0, 0]))  # not a multiple of 8
        with pytest.raises(ValueError):
            sample_patch(bundle, 40, StubRng([0, 0, 0]))  # larger than the view

    def test_cropped_volume_matches_cropped_full_volume(self):
        bundle = self._bundle(size=64, views=3, seed=2)
        sched = make_schedule(bundle.near, bundle.far, 6)
        target_cam = bundle.targets[0][0]
        full = build_psv(bundle.view_images(), bundle.view_cameras(), target_cam, sched)
        du, dv, patch = 16, 8, 32
        cropped = sample_patch(bundle, patch, StubRng([du, dv, 0]))
        tc = cropped.targets[0][0]
        vol = build_psv(cropped.view_images(), cropped.view_cameras(), tc, sched)
        m = 4  # stay clear of crop-boundary sampling
        got = vol.data[:, :, :, m:patch - m, m:patch - m]
        want = full.data[:, :, :, dv + m:dv + patch - m, du + m:du + patch - m]
        both_valid = (vol.valid[:, :, :, m:patch - m, m:patch - m]
                      & full.valid[:, :, :, dv + m:dv + patch - m, du + m:du + patch - m])
        diff = np.abs(got - want) * both_valid
        assert diff.max() < 1e-5


class TestTrainToy:
    def _config(self, **kw):
        net = UNetConfig(planes=4, groups=2, supersample=1, views=2)
        defaults = dict(net=net, iters=4, patch=32, eval_interval=2, seed=5)
        defaults.update(kw)
        return TrainConfig(**defaults)

    def _gen(self, seed=5):
        return generate_scene_family(seed, FamilySpec(width=32, height=32, num_views=2,
                                                      num_targets=2))

    def test_zero_iterations_returns_initial_weights(self):
        cfg = self._config(iters=0)
        weights, rows = train_toy(cfg, self._gen())
        reference = init_weights(cfg.net, seed=cfg.seed, dtype=np.float32)
        for name in reference.tensors:
            np.testing.assert_array_equal(weights[name].data, reference[name].data)
        assert rows == []

    def test_fixed_seed_reproducible(self):
        cfg = self._config()
        _, rows_a = train_toy(cfg, self._gen())
        _, rows_b = train_toy(cfg, self._gen())
        assert rows_a == rows_b

    def test_f64_weights_bit_identical(self):
        cfg = self._config(iters=3, dtype="f64")
        w_a, _ = train_toy(cfg, self._gen())
        w_b, _ = train_toy(cfg, self._gen())
        for name in w_a.tensors:
            np.testing.assert_array_equal(w_a[name].data, w_b[name].data)
            assert w_a[name].dtype == np.float64

    def test_training_reduces_loss(self):
        cfg = self._config(iters=30, eval_interval=29, lr=5e-4)
        _, rows = train_toy(cfg, self._gen())
        assert rows[-1]["loss"] < rows[0]["loss"]

    def test_lr_decay_applied_in_tail(self):
        cfg = self._config(iters=5)
        seen = []

        class SpyLion(Lion):
            def step(self, lr=None):
                seen.append(lr)
                super().step(lr=lr)

        import layerview.training as tr
        orig = tr.Lion
        tr.Lion = SpyLion
        try:
            train_toy(cfg, self._gen())
        finally:
            tr.Lion = orig
        assert seen[:4] == [cfg.lr] * 4
        assert seen[4] == pytest.approx(cfg.lr / 10)

    def test_metrics_csv(self, tmp_path):
        cfg = self._config()
        _, rows = train_toy(cfg, self._gen())
        write_metrics_csv(tmp_path / "log.csv", rows)
        text = (tmp_path / "log.csv").read_text().splitlines()
        assert text[0] == "iter,loss,l1,ssim,psnr"
        assert len(text) == len(rows) + 1

    def test_nan_loss_aborts_with_diagnostic(self):
        cfg = self._config(iters=3)

        def poisoned():
            gen = self._gen()
            while True:
                bundle = next(gen)
                for i, (t_cam, t_img) in enumerate(bundle.targets):
                    bad = t_img.copy()
                    bad[0, 0, 0] = np.nan
                    bundle.targets[i] = (t_cam, bad)
                yield bundle

        with pytest.raises(TrainingDivergedError, match="iteration 0"):
            train_toy(cfg, poisoned())
