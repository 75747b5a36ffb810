"""Tests for the descriptor network and checkpoint persistence."""

import struct
import zlib

import numpy as np
import pytest

from patchdesc import model
from patchdesc.errors import FormatError, ParameterError
from patchdesc.model import (DescriptorNet, expected_parameter_count,
                             load_checkpoint, preprocess_patch, save_checkpoint)

# eval-mode output of DescriptorNet(seed=0) on the fixed patch below,
# recorded at the first correct build  [DERIVED golden regression]
GOLDEN_SEED0 = np.array([
    -9.97022614e-02, -1.07871473e-01, 7.59170502e-02, -1.58442613e-02,
    -5.33467792e-02, -1.56825006e-01, -1.71054125e-01, 7.11918697e-02,
    3.91284414e-02, 6.70466945e-02, 4.74256203e-02, 5.91764785e-02,
    1.60786416e-02, 6.34819418e-02, -1.37224048e-01, 6.44586310e-02,
    1.19162146e-02, 1.57989547e-01, 5.44055514e-02, 3.64721119e-02,
    -1.39222136e-02, -4.50292081e-02, -4.55958769e-02, 8.97306204e-02,
    8.54100659e-03, 9.81404111e-02, -5.56417070e-02, -9.64894518e-02,
    6.39741123e-02, 1.01323538e-02, 4.36406471e-02, 1.78353146e-01,
    -1.43938497e-01, 7.45827705e-02, 5.89548685e-02, -1.61088660e-01,
    -2.36657681e-03, 1.24211013e-01, -9.24910232e-03, -5.96540757e-02,
    -1.37102157e-02, 6.95679560e-02, -2.65640002e-02, 1.16307236e-01,
    -1.00093849e-01, 1.41189203e-01, 4.75343764e-02, -1.00519039e-01,
    2.48412505e-01, -1.07482607e-02, -5.97602911e-02, -1.18872002e-01,
    6.49298579e-02, 6.27094954e-02, 1.14285491e-01, -1.46165535e-01,
    -1.19270235e-01, 8.00289810e-02, -8.34434256e-02, 1.02200784e-01,
    6.94079623e-02, -3.31708470e-05, -1.31815568e-01, 2.11058576e-02,
    -6.58020750e-02, 6.30642399e-02, 2.07694471e-02, -1.33999750e-01,
    -7.96954185e-02, -5.21679781e-02, -4.17199219e-03, -1.98978230e-01,
    2.61775963e-02, -3.44762355e-02, -1.41726285e-01, -4.95802499e-02,
    -1.67075172e-02, 8.19352269e-03, -6.80357143e-02, 9.72703006e-03,
    -1.74113624e-02, -6.78782016e-02, 1.03897816e-02, -1.93834342e-02,
    -5.90688437e-02, 1.07278265e-01, 4.95362692e-02, 2.07070380e-01,
    -4.91687320e-02, -1.62876379e-02, 2.75268592e-02, -3.18296254e-02,
    4.09047715e-02, 5.39206453e-02, -3.29976971e-03, -1.87453479e-02,
    1.60005048e-01, 7.21294060e-02, 6.89902008e-02, 1.19828425e-01,
    -4.62438688e-02, 1.93032883e-02, 2.46570632e-03, 1.15617430e-02,
    -2.46586446e-02, 4.30014357e-02, -3.17866094e-02, 2.20884755e-02,
    1.80069357e-02, 5.64067028e-02, -3.75454538e-02, 1.10233955e-01,
    -7.37060308e-02, -1.72415692e-02, 2.81472467e-02, -4.05228417e-03,
    -5.24881622e-03, 3.82621251e-02, 1.21544912e-01, -8.13860297e-02,
    -3.50030363e-02, 6.37232186e-03, 3.68528627e-02, 2.99822032e-01,
    -1.88248396e-01, -4.10171971e-02, 1.36948138e-01, 1.38873681e-01,
], dtype=np.float32)


def fixed_patch(seed=7, n=1):
    raw = np.random.default_rng(seed).random((n, 128, 128), dtype=np.float32)
    return preprocess_patch(raw)


class TestPreprocess:
    def test_constant_patch_zeros(self):
        p = np.full((128, 128), 0.6, dtype=np.float32)
        np.testing.assert_array_equal(preprocess_patch(p), np.zeros_like(p))

    def test_mean_zero_std_one(self):
        out = preprocess_patch(np.random.default_rng(0).random((128, 128)))
        assert abs(out.mean()) <= 1e-6
        assert abs(out.std() - 1.0) <= 1e-4

    def test_affine_invariance(self):
        p = np.random.default_rng(1).random((128, 128)).astype(np.float32)
        a, b = 0.35, 0.2
        np.testing.assert_allclose(preprocess_patch(a * p + b),
                                   preprocess_patch(p), atol=1e-5)

    def test_batch_standardizes_per_patch(self):
        batch = np.random.default_rng(2).random((3, 16, 16)).astype(np.float32)
        out = preprocess_patch(batch)
        for i in range(3):
            np.testing.assert_allclose(out[i], preprocess_patch(batch[i]), atol=1e-6)


class TestForward:
    def test_output_shape_and_unit_norm(self):
        net = DescriptorNet(seed=0)
        for b in (1, 3):
            d = net.forward(fixed_patch(seed=3, n=b), train=False)
            assert d.shape == (b, 128)
            np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-5)

    def test_shape_chain(self):
        # the net's layers run channel-major: (channels, batch, h, w)
        net = DescriptorNet(seed=0)
        x = fixed_patch()[None, :]
        sizes = []
        for i in range(7):
            x = net.convs[i].forward(x)
            sizes.append((x.shape[0],) + x.shape[2:])
            x = net.bns[i].forward(x, train=False)
            if i < 6:
                x = net.relus[i].forward(x)
        assert sizes == [(16, 64, 64), (16, 64, 64), (32, 32, 32), (64, 32, 32),
                         (128, 16, 16), (128, 8, 8), (128, 1, 1)]

    def test_duplicated_patches_identical(self):
        net = DescriptorNet(seed=1)
        p = fixed_patch(seed=4)
        batch = np.repeat(p, 3, axis=0)
        d = net.forward(batch, train=False)
        np.testing.assert_array_equal(d[0], d[1])
        np.testing.assert_array_equal(d[0], d[2])

    def test_golden_regression(self):
        net = DescriptorNet(seed=0)
        d = net.forward(fixed_patch(seed=7), train=False)[0]
        np.testing.assert_allclose(d, GOLDEN_SEED0, atol=1e-6)

    def test_eval_mode_pure(self):
        net = DescriptorNet(seed=2)
        p = fixed_patch(seed=5, n=2)
        stats_before = [bn.running_mean.copy() for bn in net.bns]
        d1 = net.forward(p, train=False)
        d2 = net.forward(p, train=False)
        np.testing.assert_array_equal(d1, d2)
        for bn, before in zip(net.bns, stats_before):
            np.testing.assert_array_equal(bn.running_mean, before)

    def test_train_mode_updates_running_stats(self):
        net = DescriptorNet(seed=2)
        before = net.bns[0].running_mean.copy()
        net.forward(fixed_patch(seed=6, n=2), train=True)
        assert not np.array_equal(net.bns[0].running_mean, before)

    def test_wrong_patch_size_rejected(self):
        net = DescriptorNet(seed=0)
        with pytest.raises(ParameterError):
            net.forward(np.zeros((2, 64, 64), dtype=np.float32))

    def test_train_batch_of_one_rejected(self):
        net = DescriptorNet(seed=0)
        with pytest.raises(ParameterError):
            net.forward(fixed_patch(n=1), train=True)

    def test_backward_populates_finite_grads(self):
        net = DescriptorNet(seed=3)
        d = net.forward(fixed_patch(seed=8, n=2), train=True)
        # a descriptor's own direction lies in the normalization null
        # space; perturb it so real gradient flows down the chain
        dout = d + np.float32(0.1) * np.random.default_rng(1).standard_normal(
            d.shape).astype(np.float32)
        net.backward(dout)
        gs = net.grads()
        assert len(gs) == 7 * 4
        assert all(np.isfinite(g).all() for g in gs)
        assert any(np.abs(g).max() > 0 for g in gs)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        net = DescriptorNet(seed=5)
        # make running stats nontrivial before saving
        net.forward(fixed_patch(seed=9, n=2), train=True)
        p = tmp_path / "net.ckpt"
        save_checkpoint(net, str(p))
        back = load_checkpoint(str(p))
        for a, b in zip(net.state_arrays(), back.state_arrays()):
            np.testing.assert_array_equal(a, b)
        d1 = net.forward(fixed_patch(seed=10), train=False)
        d2 = back.forward(fixed_patch(seed=10), train=False)
        np.testing.assert_array_equal(d1, d2)

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"XXXXXXXX" + bytes(64))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(str(p))

    def test_wrong_version(self, tmp_path):
        net = DescriptorNet(seed=0)
        p = tmp_path / "v.ckpt"
        save_checkpoint(net, str(p))
        raw = bytearray(p.read_bytes())
        raw[8:12] = struct.pack("<I", 99)
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(str(p))

    def test_truncated_reports_offset(self, tmp_path):
        net = DescriptorNet(seed=0)
        p = tmp_path / "t.ckpt"
        save_checkpoint(net, str(p))
        raw = p.read_bytes()
        p.write_bytes(raw[:1000])
        with pytest.raises(FormatError, match="byte"):
            load_checkpoint(str(p))

    def test_crc_detects_corruption(self, tmp_path):
        net = DescriptorNet(seed=0)
        p = tmp_path / "c.ckpt"
        save_checkpoint(net, str(p))
        raw = bytearray(p.read_bytes())
        raw[100] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(str(p))

    def test_crc_is_of_all_preceding_bytes(self, tmp_path):
        net = DescriptorNet(seed=0)
        p = tmp_path / "k.ckpt"
        save_checkpoint(net, str(p))
        raw = p.read_bytes()
        stored = struct.unpack("<I", raw[-4:])[0]
        assert stored == (zlib.crc32(raw[:-4]) & 0xFFFFFFFF)
        assert raw[:8] == b"SSLDESC1"

    def test_parameter_count_closed_form(self):
        net = DescriptorNet(seed=0)
        assert net.count_parameters() == expected_parameter_count()
        # independent arithmetic: filters, kernels, conv bias + 4 BN vectors
        filters = (16, 16, 32, 64, 128, 128, 128)
        kernels = (3, 3, 3, 3, 3, 3, 8)
        total, in_ch = 0, 1
        for oc, k in zip(filters, kernels):
            total += oc * in_ch * k * k + oc + 4 * oc
            in_ch = oc
        assert total == 1_297_808
        assert net.count_parameters() == 1_297_808


class TestFullNetGradient:
    def test_composite_gradcheck_64bit_smoke(self):
        # a few sampled coordinates through the whole chain in float64;
        # batch >= 4 keeps the final-stage batch statistics non-degenerate
        from fd_utils import fd_check_multi
        net = DescriptorNet(seed=4, dtype=np.float64)
        x = np.random.default_rng(11).standard_normal((4, 128, 128))
        w = np.random.default_rng(12).standard_normal((4, 128))

        def loss():
            return float((net.forward(x, train=True) * w).sum())

        net.forward(x, train=True)
        net.backward(w.copy())
        err = fd_check_multi(loss, net.convs[0].weights,
                             net.convs[0].grad_weights,
                             max_coords=3, rng=np.random.default_rng(0))
        assert err <= 1e-5
