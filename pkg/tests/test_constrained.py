"""Constrained kernel bank: initialization, projection, noise extraction."""
import numpy as np
import pytest

from noisedge import Tensor
from noisedge.constrained import (
    CLAMP_FLOOR,
    ConstrainedKernelBank,
    init_laplace_like,
    init_laplace_like_d,
    init_random,
    init_random_sum,
    project_improved,
    project_original,
)


class TestInitSchemes:
    def test_laplace_like_k3(self):
        w = init_laplace_like(3)
        assert w[1, 1] == -1.0
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        assert np.allclose(w[mask], 0.125)
        assert abs(w.sum()) < 1e-12

    def test_laplace_like_k5(self):
        w = init_laplace_like(5)
        mask = np.ones((5, 5), bool)
        mask[2, 2] = False
        assert np.allclose(w[mask], 1.0 / 24.0)
        assert abs(w.sum()) < 1e-12

    def test_laplace_like_d_k3_exact(self):
        w = init_laplace_like_d(3)
        x = 1.0 / (4.0 + 4.0 / np.sqrt(2.0))
        assert abs(w[0, 1] - x) < 1e-12            # distance 1
        assert abs(w[0, 0] - x / np.sqrt(2.0)) < 1e-12   # distance sqrt(2)
        assert abs(w[0, 1] - 0.14645) < 5e-5
        assert abs(w[0, 0] - 0.10355) < 5e-5
        assert w[1, 1] == -1.0
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        assert abs(w[mask].sum() - 1.0) < 1e-12

    def test_laplace_like_d_k5(self):
        w = init_laplace_like_d(5)
        total = 4.0 + 4.0 / np.sqrt(2.0) + 2.0 + 8.0 / np.sqrt(5.0) + 4.0 / (2.0 * np.sqrt(2.0))
        x = 1.0 / total
        assert abs(w[2, 3] - x) < 1e-12
        assert abs(x - 0.07236) < 5e-5
        mask = np.ones((5, 5), bool)
        mask[2, 2] = False
        assert abs(w[mask].sum() - 1.0) < 1e-12

    def test_random_ranges(self):
        w = init_random(3, np.random.default_rng(42))
        assert w[1, 1] == -1.0
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        assert np.all(w[mask] > 0.0) and np.all(w[mask] < 1.0)

    def test_random_sum_normalized(self):
        for seed in range(10):
            w = init_random_sum(5, np.random.default_rng(seed))
            mask = np.ones((5, 5), bool)
            mask[2, 2] = False
            assert abs(w[mask].sum() - 1.0) < 1e-12
            assert w[2, 2] == -1.0

    def test_random_reproducible(self):
        a = init_random(5, np.random.default_rng(3))
        b = init_random(5, np.random.default_rng(3))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("fn", [init_laplace_like, init_laplace_like_d])
    def test_even_size_rejected(self, fn):
        with pytest.raises(ValueError, match="odd"):
            fn(4)


class TestProjectImproved:
    def _k3_from_noncenter(self, values):
        w = np.zeros((3, 3))
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        w[mask] = values
        return w[None]

    def test_worked_example(self):
        # eight non-center weights with |sum| 1.2; hand-traced through the
        # zero/normalize/clamp/balance steps
        vals = [0.2, -0.1, 0.3, -0.2, 0.1, 0.05, -0.05, 0.2]
        w = self._k3_from_noncenter(vals)
        project_improved(w)
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        got = w[0][mask]
        want = [0.2 / 1.2, CLAMP_FLOOR, 0.25, CLAMP_FLOOR, 0.1 / 1.2,
                0.05 / 1.2, CLAMP_FLOOR, 0.2 / 1.2]
        assert np.allclose(got, want, atol=1e-6)
        assert abs(w[0, 1, 1] - (-0.711333)) < 1e-4
        assert abs(w[0].sum()) < 1e-12

    def test_laplace_like_is_fixed_point(self):
        w = init_laplace_like(3)[None].copy()
        project_improved(w)
        assert np.allclose(w[0], init_laplace_like(3), atol=1e-12)

    def test_large_negative_clamped(self):
        vals = [0.1, 0.1, 0.1, -5.0, 0.1, 0.1, 0.1, 0.1]
        w = self._k3_from_noncenter(vals)
        project_improved(w)
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        assert w[0, 1, 0] == CLAMP_FLOOR           # the -5.0 entry
        assert np.min(w[0][mask]) >= CLAMP_FLOOR

    def test_strict_center_uses_presum(self):
        vals = [0.2, -0.1, 0.3, -0.2, 0.1, 0.05, -0.05, 0.2]
        w = self._k3_from_noncenter(vals)
        project_improved(w, strict_center=True)
        assert abs(w[0, 1, 1] - (-1.2)) < 1e-12

    def test_degenerate_kernel_reinitialized(self, caplog):
        w = np.zeros((1, 3, 3))
        with caplog.at_level("WARNING"):
            project_improved(w, reinit=lambda: init_laplace_like(3))
        assert np.allclose(w[0], init_laplace_like(3))
        assert "degenerate" in caplog.text

    def test_degenerate_without_reinit_raises(self):
        with pytest.raises(ValueError, match="degenerate"):
            project_improved(np.zeros((1, 3, 3)))


class TestProjectOriginal:
    def test_instability_witness(self):
        # non-center sum -0.01: division magnifies x100 and flips signs
        w = np.zeros((1, 3, 3))
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        vals = np.array([0.3, -0.2, 0.25, -0.3, 0.15, -0.25, 0.2, -0.16])
        assert abs(vals.sum() - (-0.01)) < 1e-12
        w[0][mask] = vals
        before = np.max(np.abs(w[0][mask]))
        project_original(w)
        after = np.max(np.abs(w[0][mask]))
        assert after >= 10.0 * before
        assert np.all(np.sign(w[0][mask]) == -np.sign(vals))
        assert w[0, 1, 1] == -1.0

    def test_improved_stays_bounded_on_same_input(self):
        w = np.zeros((1, 3, 3))
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        w[0][mask] = [0.3, -0.2, 0.25, -0.3, 0.15, -0.25, 0.2, -0.16]
        project_improved(w)
        assert np.max(np.abs(w[0][mask])) <= 1.0
        assert np.min(w[0][mask]) >= CLAMP_FLOOR

    def test_unit_sum_fixed_point(self):
        w = np.zeros((1, 3, 3))
        mask = np.ones((3, 3), bool)
        mask[1, 1] = False
        vals = np.array([0.5, 0.5, -0.5, 0.5, 0.0, 0.0, 0.0, 0.0])
        w[0][mask] = vals
        project_original(w)
        assert np.allclose(w[0][mask], vals)

    def test_zero_sum_skipped_with_warning(self, caplog):
        w = np.zeros((1, 3, 3))
        w[0, 0, 0], w[0, 0, 2] = 0.5, -0.5
        with caplog.at_level("WARNING"):
            project_original(w)
        assert w[0, 0, 0] == 0.5
        assert "skipped" in caplog.text


class TestBank:
    def test_default_configuration(self):
        bank = ConstrainedKernelBank()
        assert bank.kernel_size == 5
        assert bank.scheme == "laplace-like-d"
        assert bank.mode == "improved"
        assert bank.weight.shape == (3, 1, 5, 5)
        assert bank.groups == 3

    def test_dense_layout(self):
        bank = ConstrainedKernelBank(dense=True)
        assert bank.weight.shape == (3, 3, 5, 5)
        assert bank.groups == 1
        assert bank.n_kernels == 9

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ValueError, match="scheme"):
            ConstrainedKernelBank(scheme="xavier")

    def test_projection_restores_invariants_after_noise(self):
        bank = ConstrainedKernelBank(kernel_size=3, seed=1)
        rng = np.random.default_rng(0)
        bank.weight.data += rng.normal(scale=0.5, size=bank.weight.shape)
        bank.project()
        bank.check_invariants()

    def test_invariant_violation_detected(self):
        bank = ConstrainedKernelBank(kernel_size=3)
        bank.project()
        bank.weight.data[0, 0, 0, 0] = -0.5
        with pytest.raises(AssertionError):
            bank.check_invariants()

    def test_determinism_across_runs(self):
        a = ConstrainedKernelBank(scheme="random", seed=9)
        b = ConstrainedKernelBank(scheme="random", seed=9)
        rng1, rng2 = np.random.default_rng(5), np.random.default_rng(5)
        for _ in range(10):
            a.weight.data += rng1.normal(size=a.weight.shape)
            b.weight.data += rng2.normal(size=b.weight.shape)
            a.project()
            b.project()
        assert np.array_equal(a.weight.data, b.weight.data)

    def test_roundtrip_serialization(self, tmp_path):
        bank = ConstrainedKernelBank(scheme="random", seed=4)
        bank.project()
        path = tmp_path / "bank.txt"
        bank.save(path)
        loaded = ConstrainedKernelBank.load(path)
        assert loaded.kernel_size == 5
        assert loaded.scheme == "random"
        assert loaded.mode == "improved"
        assert np.array_equal(loaded.weight.data, bank.weight.data)

    def test_load_rejects_truncated_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("3 3 random improved\n0.1 0.1 0.1\n")
        with pytest.raises(ValueError, match="rows"):
            ConstrainedKernelBank.load(path)

    def test_load_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("3 3 random\n")
        with pytest.raises(ValueError, match="header"):
            ConstrainedKernelBank.load(path)


class TestExtractNoise:
    def test_constant_image_gives_zero_interior(self):
        bank = ConstrainedKernelBank(kernel_size=3)
        img = Tensor(np.full((1, 3, 8, 8), 0.7))
        out = bank.extract_noise(img)
        assert out.shape == (1, 3, 8, 8)
        # zero-sum kernels annihilate constants away from the border
        assert np.max(np.abs(out.data[:, :, 1:-1, 1:-1])) < 1e-12

    def test_linear_ramp_gives_zero_interior(self):
        bank = ConstrainedKernelBank(kernel_size=3, scheme="laplace-like")
        ramp = np.arange(8.0)[None, :] * np.ones((8, 1))
        img = Tensor(np.broadcast_to(ramp, (1, 3, 8, 8)).copy())
        out = bank.extract_noise(img)
        assert np.max(np.abs(out.data[:, :, 1:-1, 1:-1])) < 1e-10

    def test_channels_stay_separate(self):
        bank = ConstrainedKernelBank(kernel_size=3)
        img = np.zeros((1, 3, 8, 8))
        img[0, 1, 4, 4] = 1.0      # impulse on channel 1 only
        out = bank.extract_noise(Tensor(img))
        assert np.max(np.abs(out.data[0, 0])) == 0.0
        assert np.max(np.abs(out.data[0, 2])) == 0.0
        assert np.max(np.abs(out.data[0, 1])) > 0.0

    def test_shape_preserved_at_all_sizes(self):
        for k in (3, 5, 7):
            bank = ConstrainedKernelBank(kernel_size=k)
            out = bank.extract_noise(Tensor(np.zeros((2, 3, 16, 16))))
            assert out.shape == (2, 3, 16, 16)

    def test_wrong_channel_count_rejected(self):
        bank = ConstrainedKernelBank()
        with pytest.raises(ValueError, match="3 x H x W"):
            bank.extract_noise(Tensor(np.zeros((1, 1, 8, 8))))

    def test_gradient_flows_to_kernels(self):
        bank = ConstrainedKernelBank(kernel_size=3)
        img = Tensor(np.random.default_rng(0).normal(size=(1, 3, 6, 6)))
        from noisedge import ops
        ops.sum_all(ops.mul(bank.extract_noise(img), bank.extract_noise(img))).backward()
        assert bank.weight.grad is not None
        assert bank.weight.grad.shape == bank.weight.shape
