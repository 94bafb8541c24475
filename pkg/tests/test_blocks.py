"""Building blocks: module bookkeeping, ARM/FFM/EEB contracts."""
import numpy as np
import pytest

from noisedge import Tensor, no_grad
from noisedge.blocks import (
    ARM,
    EEB,
    FFM,
    BasicBlock,
    BatchNorm2d,
    Conv2d,
    Module,
    freeze_running_stats,
    make_stage,
    run_stage,
)


class TestModuleSystem:
    def test_named_parameters_are_dotted_and_ordered(self):
        rng = np.random.default_rng(0)
        block = BasicBlock(4, 8, rng, stride=2)
        names = [n for n, _ in block.named_parameters()]
        assert names[0] == "conv1.weight"
        assert "proj.weight" in names
        assert "bn1.gamma" in names and "bn1.beta" in names
        # repeatable ordering
        assert names == [n for n, _ in block.named_parameters()]

    def test_buffers_tracked(self):
        bn = BatchNorm2d(3)
        assert {n for n, _ in bn.named_buffers()} == {"running_mean", "running_var"}

    def test_train_eval_propagates(self):
        rng = np.random.default_rng(1)
        stage = make_stage(4, 4, 2, rng)
        stage.eval()
        assert all(not b.training for b in stage)
        assert not stage[0].bn1.training
        stage.train()
        assert stage[0].bn1.training

    def test_zero_grad_clears(self):
        rng = np.random.default_rng(2)
        conv = Conv2d(2, 3, 3, rng)
        from noisedge import ops
        ops.sum_all(conv(Tensor(np.ones((1, 2, 4, 4))))).backward()
        assert conv.weight.grad is not None
        conv.zero_grad()
        assert conv.weight.grad is None

    def test_freeze_running_stats(self):
        rng = np.random.default_rng(3)
        block = BasicBlock(2, 2, rng)
        freeze_running_stats(block)
        before = block.bn1.running_mean.copy()
        with no_grad():
            block(Tensor(np.random.default_rng(4).normal(size=(2, 2, 4, 4))))
        assert np.array_equal(block.bn1.running_mean, before)


class TestBasicBlock:
    def test_identity_skip_shape(self):
        rng = np.random.default_rng(5)
        block = BasicBlock(4, 4, rng)
        with no_grad():
            out = block(Tensor(np.random.default_rng(6).normal(size=(2, 4, 8, 8))))
        assert out.shape == (2, 4, 8, 8)

    def test_projected_skip_downsamples(self):
        rng = np.random.default_rng(7)
        block = BasicBlock(4, 8, rng, stride=2)
        with no_grad():
            out = block(Tensor(np.zeros((1, 4, 8, 8))))
        assert out.shape == (1, 8, 4, 4)

    def test_stage_composition(self):
        rng = np.random.default_rng(8)
        stage = make_stage(4, 8, 3, rng, stride=2)
        assert len(stage) == 3
        with no_grad():
            out = run_stage(stage, Tensor(np.zeros((1, 4, 16, 16))))
        assert out.shape == (1, 8, 8, 8)


class TestARM:
    def test_zeroed_conv_gives_half_gate(self):
        rng = np.random.default_rng(9)
        arm = ARM(4, rng)
        arm.eval()
        arm.conv.weight.data[...] = 0.0
        f = Tensor(np.random.default_rng(10).normal(size=(1, 4, 3, 3)))
        with no_grad():
            out = arm(f)
        assert np.allclose(out.data, 0.5 * f.data)

    def test_zero_input_gives_zero(self):
        rng = np.random.default_rng(11)
        arm = ARM(4, rng)
        with no_grad():
            out = arm(Tensor(np.zeros((1, 4, 3, 3))))
        assert np.all(out.data == 0.0)

    def test_matches_scalar_path_oracle(self):
        rng = np.random.default_rng(12)
        arm = ARM(3, rng)
        arm.eval()
        f = np.random.default_rng(13).normal(size=(2, 3, 4, 4))
        with no_grad():
            out = arm(Tensor(f))
        w = arm.conv.weight.data[:, :, 0, 0]
        for n in range(2):
            means = f[n].mean(axis=(1, 2))
            logits = w @ means
            rm, rv = arm.bn.running_mean, arm.bn.running_var
            normed = (logits - rm) / np.sqrt(rv + arm.bn.eps)
            scales = 1.0 / (1.0 + np.exp(-(arm.bn.gamma.data * normed + arm.bn.beta.data)))
            assert np.all(scales > 0.0) and np.all(scales < 1.0)
            want = f[n] * scales[:, None, None]
            assert np.max(np.abs(out.data[n] - want)) < 1e-10


class TestFFM:
    def test_zero_gate_passes_h_through(self):
        rng = np.random.default_rng(14)
        ffm = FFM(12, 8, rng)
        ffm.eval()
        ffm.gate1.weight.data[...] = 0.0
        ffm.gate1.bias.data[...] = 0.0
        ffm.gate2.weight.data[...] = 0.0
        ffm.gate2.bias.data[...] = -100.0     # sigmoid -> ~0
        fa = Tensor(np.random.default_rng(15).normal(size=(1, 4, 6, 6)))
        fb = Tensor(np.random.default_rng(16).normal(size=(1, 8, 6, 6)))
        with no_grad():
            out = ffm(fa, fb)
            from noisedge import ops
            h = ops.relu(ffm.bn(ffm.compress(ops.concat_channels([fa, fb]))))
        assert np.max(np.abs(out.data - h.data)) < 1e-9

    def test_output_channel_count(self):
        rng = np.random.default_rng(17)
        ffm = FFM(4 * 32 + 8 * 32, 8 * 32, rng)
        fa = Tensor(np.zeros((1, 128, 4, 4)))
        fb = Tensor(np.zeros((1, 256, 4, 4)))
        with no_grad():
            out = ffm(fa, fb)
        assert out.shape == (1, 256, 4, 4)

    def test_zero_inputs_give_zero_output(self):
        rng = np.random.default_rng(18)
        ffm = FFM(6, 4, rng)
        ffm.eval()
        with no_grad():
            out = ffm(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 4, 3, 3))))
        assert np.allclose(out.data, 0.0)

    def test_spatial_mismatch_rejected(self):
        rng = np.random.default_rng(19)
        ffm = FFM(6, 4, rng)
        with pytest.raises(ValueError, match="spatial"):
            ffm(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 4, 5, 5))))


class TestEEB:
    def test_single_channel_output_spatial_preserved(self):
        rng = np.random.default_rng(20)
        eeb = EEB(16, rng)
        with no_grad():
            out = eeb(Tensor(np.random.default_rng(21).normal(size=(2, 16, 7, 9))))
        assert out.shape == (2, 1, 7, 9)

    def test_minimum_width_floor(self):
        rng = np.random.default_rng(22)
        eeb = EEB(2, rng)        # 2 // 4 -> floor at 1 internal channel
        with no_grad():
            out = eeb(Tensor(np.zeros((1, 2, 4, 4))))
        assert out.shape == (1, 1, 4, 4)
