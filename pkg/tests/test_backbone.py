import numpy as np
import pytest

from layerview import tensor as T
from layerview.backbone import (UNetConfig, WeightFormatError, WeightStore,
                                expected_shapes, flops_model, init_weights,
                                layer_table, load_weights, param_count,
                                run_groups, save_weights, unet_forward)
from layerview.tensor import ShapeError, Tensor

from util import rel_error


TINY = UNetConfig(planes=8, groups=4, supersample=1, views=2)


# ---------------------------------------------------------------------------
# straight-line reference forward pass (shift-and-add convs, loop upsampling)


def ref_conv(x, w, b, stride=1):
    c_out, c_in, k, _ = w.shape
    h, wd = x.shape[1:]
    p = (k - 1) // 2
    xp = np.zeros((c_in, h + 2 * p, wd + 2 * p), dtype=np.float64)
    xp[:, p:p + h, p:p + wd] = x
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    out = np.zeros((c_out, ho, wo), dtype=np.float64)
    for co in range(c_out):
        acc = np.zeros((h + 2 * p - k + 1, wd + 2 * p - k + 1), dtype=np.float64)
        for ci in range(c_in):
            for ki in range(k):
                for kj in range(k):
                    acc += w[co, ci, ki, kj] * xp[ci, ki:ki + acc.shape[0], kj:kj + acc.shape[1]]
        out[co] = acc[::stride, ::stride] + b[co]
    return out


def ref_up2_bilinear(x):
    c, h, w = x.shape
    out = np.zeros((c, 2 * h, 2 * w), dtype=np.float64)
    for i in range(2 * h):
        sy = (i + 0.5) / 2 - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y0c, y1c = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
        for j in range(2 * w):
            sx = (j + 0.5) / 2 - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x0c, x1c = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            a = x[:, y0c, x0c] + fx * (x[:, y0c, x1c] - x[:, y0c, x0c])
            bb = x[:, y1c, x0c] + fx * (x[:, y1c, x1c] - x[:, y1c, x0c])
            out[:, i, j] = a + fy * (bb - a)
    return out


def ref_unet(cfg, weights, x):
    def wb(name):
        return weights[f"{name}.weight"].data.astype(np.float64), \
               weights[f"{name}.bias"].data.astype(np.float64)

    r = lambda a: np.maximum(a, 0.0)
    a1 = r(ref_conv(x, *wb("conv1")))
    a2 = r(ref_conv(a1, *wb("conv2"), stride=2))
    a3 = r(ref_conv(a2, *wb("conv3"), stride=2))
    a4 = r(ref_conv(a3, *wb("conv4"), stride=2))
    a5 = r(ref_conv(a4, *wb("conv5")))
    a6 = r(ref_conv(a5, *wb("conv6a")))
    a6b = r(ref_conv(np.concatenate([ref_up2_bilinear(a6), a3]), *wb("conv6b")))
    a7 = r(ref_conv(np.concatenate([ref_up2_bilinear(a6b), a2]), *wb("conv7")))
    a8 = r(ref_conv(np.concatenate([ref_up2_bilinear(a7), a1]), *wb("conv8")))
    return ref_conv(a8, *wb("conv9"))


class TestConfig:
    def test_channel_formulas(self):
        cfg = UNetConfig(planes=16, groups=4, supersample=2, views=4)
        assert cfg.in_channels == 48
        assert cfg.out_channels == 2 * 4 * 5 + 3 == 43
        assert cfg.out_planes_per_group == 8

    def test_skip_channel_sums(self):
        table = dict((name, (ci, co)) for name, ci, co, _ in layer_table(TINY))
        assert table["conv6b"][0] == 256 + 64 == 320
        assert table["conv7"][0] == 64 + 32 == 96
        assert table["conv8"][0] == 32 + 16 == 48

    def test_rejects_bad_grouping(self):
        with pytest.raises(ValueError):
            UNetConfig(planes=10, groups=4)

    def test_medium_config_grouped_shape(self):
        cfg = UNetConfig(planes=32, groups=16, supersample=2, views=4)
        assert cfg.in_channels == 2 * 4 * 3 == 24
        assert cfg.out_channels == 2 * 2 * 5 + 3 == 23


class TestForward:
    def test_zero_weights_zero_output(self):
        store = WeightStore({name: Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
                             for name, shape in expected_shapes(TINY).items()})
        out = unet_forward(TINY, store, np.random.default_rng(0).random((12, 16, 16), dtype=np.float32))
        assert out.raw.shape == (TINY.out_channels, 16, 16)
        np.testing.assert_array_equal(out.raw.data, 0.0)

    def test_rejects_bad_spatial_size(self):
        weights = init_weights(TINY)
        with pytest.raises(ShapeError):
            unet_forward(TINY, weights, np.zeros((12, 20, 16), dtype=np.float32))

    def test_rejects_bad_channels(self):
        weights = init_weights(TINY)
        with pytest.raises(ShapeError):
            unet_forward(TINY, weights, np.zeros((10, 16, 16), dtype=np.float32))

    def test_bias_only_matches_reference(self):
        rng = np.random.default_rng(1)
        weights = init_weights(TINY, seed=3, dtype=np.float64)
        for name in weights.tensors:
            if name.endswith(".bias"):
                weights.tensors[name] = Tensor(rng.standard_normal(weights[name].shape),
                                               requires_grad=True)
        x = np.zeros((12, 16, 16), dtype=np.float64)
        got = unet_forward(TINY, weights, x).raw.data
        want = ref_unet(TINY, weights, x)
        assert rel_error(got, want) < 1e-5

    def test_random_input_matches_reference(self):
        rng = np.random.default_rng(2)
        weights = init_weights(TINY, seed=4, dtype=np.float64)
        x = rng.standard_normal((12, 16, 16))
        got = unet_forward(TINY, weights, x).raw.data
        want = ref_unet(TINY, weights, x)
        assert rel_error(got, want) < 1e-5

    def test_nearest_mode_changes_decoder(self):
        cfg_n = UNetConfig(planes=8, groups=4, supersample=1, views=2,
                           upsample_mode="nearest")
        weights = init_weights(TINY, seed=5)
        x = np.random.default_rng(3).random((12, 16, 16), dtype=np.float32)
        a = unet_forward(TINY, weights, x).raw.data
        b = unet_forward(cfg_n, weights, x).raw.data
        assert np.abs(a - b).max() > 1e-6

    def test_fully_convolutional_interior(self):
        cfg = TINY
        weights = init_weights(cfg, seed=6)
        rng = np.random.default_rng(7)
        n = 96
        small = rng.random((12, n, n), dtype=np.float32)
        big = np.zeros((12, 2 * n, 2 * n), dtype=np.float32)
        off = n // 2  # multiple of 8 keeps the stride grids aligned
        big[:, off:off + n, off:off + n] = small
        out_small = unet_forward(cfg, weights, small).raw.data
        out_big = unet_forward(cfg, weights, big).raw.data
        m = 42  # half the ~80 px receptive field, rounded up
        inner_small = out_small[:, m:n - m, m:n - m]
        inner_big = out_big[:, off + m:off + n - m, off + m:off + n - m]
        assert inner_small.shape[-1] > 0
        assert rel_error(inner_big, inner_small) < 1e-5


class TestRunGroups:
    def _grouped(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        return rng.random((cfg.groups, cfg.in_channels, 16, 16), dtype=np.float32)

    def test_single_group_equals_forward(self):
        cfg = UNetConfig(planes=2, groups=1, supersample=1, views=2)
        weights = init_weights(cfg, seed=1)
        data = self._grouped(cfg)
        heads = run_groups(cfg, weights, data)
        direct = unet_forward(cfg, weights, data[0])
        np.testing.assert_array_equal(heads[0].raw.data, direct.raw.data)

    def test_matches_sequential_loop_oracle(self):
        weights = init_weights(TINY, seed=2)
        data = self._grouped(TINY, seed=3)
        heads = run_groups(TINY, weights, data, mode="sequential")
        for g in range(TINY.groups):
            np.testing.assert_array_equal(heads[g].raw.data,
                                          unet_forward(TINY, weights, data[g]).raw.data)

    def test_permuting_groups_permutes_outputs(self):
        weights = init_weights(TINY, seed=3)
        data = self._grouped(TINY, seed=4)
        perm = [2, 0, 3, 1]
        heads = run_groups(TINY, weights, data, mode="sequential")
        heads_p = run_groups(TINY, weights, data[perm], mode="sequential")
        for i, p in enumerate(perm):
            np.testing.assert_array_equal(heads_p[i].raw.data, heads[p].raw.data)

    def test_threaded_bit_exact(self):
        weights = init_weights(TINY, seed=4)
        data = self._grouped(TINY, seed=5)
        seq = run_groups(TINY, weights, data, mode="sequential")
        par = run_groups(TINY, weights, data, mode="threads", threads=2)
        for a, b in zip(seq, par):
            np.testing.assert_array_equal(a.raw.data, b.raw.data)

    def test_threaded_bit_exact_f64(self):
        weights = init_weights(TINY, seed=8, dtype=np.float64)
        data = self._grouped(TINY, seed=9).astype(np.float64)
        seq = run_groups(TINY, weights, data, mode="sequential")
        par = run_groups(TINY, weights, data, mode="threads", threads=3)
        for a, b in zip(seq, par):
            np.testing.assert_array_equal(a.raw.data, b.raw.data)

    def test_batched_close_to_sequential(self):
        weights = init_weights(TINY, seed=5)
        data = self._grouped(TINY, seed=6)
        seq = run_groups(TINY, weights, data, mode="sequential")
        bat = run_groups(TINY, weights, data, mode="batched")
        for a, b in zip(seq, bat):
            assert rel_error(a.raw.data, b.raw.data) < 1e-5

    def test_channel_mismatch(self):
        weights = init_weights(TINY)
        with pytest.raises(ShapeError):
            run_groups(TINY, weights, np.zeros((4, 5, 16, 16), dtype=np.float32))


class TestGradient:
    def test_unet_gradient_sampled_finite_differences(self):
        cfg = TINY
        weights = init_weights(cfg, seed=10, dtype=np.float64)
        rng = np.random.default_rng(11)
        x = rng.random((cfg.in_channels, 16, 16))
        proj = rng.standard_normal((cfg.out_channels, 16, 16))

        def forward_scalar():
            out = unet_forward(cfg, weights, x)
            return (out.raw * Tensor(proj)).sum()

        loss = forward_scalar()
        loss.backward()

        h = 1e-5
        checked = 0
        for name, t in weights.tensors.items():
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1)
            idxs = rng.choice(flat.size, size=min(6, flat.size), replace=False)
            for i in idxs:
                old = flat[i]
                flat[i] = old + h
                fp = float(forward_scalar().data)
                flat[i] = old - h
                fm = float(forward_scalar().data)
                flat[i] = old
                num = (fp - fm) / (2 * h)
                scale = max(abs(num), abs(gflat[i]), 1e-3)
                assert abs(num - gflat[i]) / scale < 1e-3, \
                    f"{name}[{i}]: analytic {gflat[i]:.6e} vs numeric {num:.6e}"
                checked += 1
        assert checked >= 100


class TestCostModel:
    def test_flops_instrumentation_matches_model(self):
        cfg = UNetConfig(planes=8, groups=2, supersample=1, views=2)
        weights = init_weights(cfg, seed=0)
        data = np.random.default_rng(0).random((2, cfg.in_channels, 16, 16), dtype=np.float32)
        T.flops.reset()
        T.flops.enabled = True
        with T.no_grad():
            run_groups(cfg, weights, data, mode="sequential")
        T.flops.enabled = False
        assert T.flops.count == flops_model(cfg, 16, 16)

    def test_param_count_formula(self):
        cfg = TINY
        assert param_count(cfg) == init_weights(cfg).num_params()

    def test_last_layer_delta_between_supersample_factors(self):
        a = UNetConfig(planes=32, groups=16, supersample=2, views=4)
        b = UNetConfig(planes=64, groups=32, supersample=1, views=4)
        assert a.in_channels == b.in_channels
        delta = param_count(a) - param_count(b)
        assert delta == (a.out_channels - b.out_channels) * (16 * 9 + 1)


class TestWeightIO:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip_bit_exact(self, tmp_path, dtype):
        weights = init_weights(TINY, seed=12, dtype=dtype)
        save_weights(tmp_path / "w.fmpw", weights, TINY)
        loaded, cfg = load_weights(tmp_path / "w.fmpw")
        assert cfg == TINY
        assert loaded.dtype == np.dtype(dtype)
        for name in weights.tensors:
            np.testing.assert_array_equal(loaded[name].data, weights[name].data)

    def test_truncated_file(self, tmp_path):
        weights = init_weights(TINY)
        save_weights(tmp_path / "w.fmpw", weights, TINY)
        raw = (tmp_path / "w.fmpw").read_bytes()
        (tmp_path / "t.fmpw").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(WeightFormatError):
            load_weights(tmp_path / "t.fmpw")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.fmpw").write_bytes(b"WXYZ" + b"\0" * 100)
        with pytest.raises(WeightFormatError):
            load_weights(tmp_path / "x.fmpw")

    def test_config_mismatch_names_first_bad_layer(self, tmp_path):
        weights = init_weights(TINY)
        save_weights(tmp_path / "w.fmpw", weights, TINY)
        other = UNetConfig(planes=8, groups=2, supersample=1, views=2)
        with pytest.raises(WeightFormatError, match="conv1.weight"):
            load_weights(tmp_path / "w.fmpw", other)

    def test_equal_shapes_but_different_echo_rejected(self, tmp_path):
        weights = init_weights(TINY)
        save_weights(tmp_path / "w.fmpw", weights, TINY)
        # same channel counts (D/G and S*(D/G) unchanged) but different grouping
        other = UNetConfig(planes=16, groups=8, supersample=1, views=2)
        assert expected_shapes(other) == expected_shapes(TINY)
        with pytest.raises(WeightFormatError, match="config"):
            load_weights(tmp_path / "w.fmpw", other)
