"""Network architecture: descriptor math, deterministic init, forward
shapes, checkpoint format, and normalization-stats handling."""

import dataclasses
import json

import numpy as np
import pytest

from arl.arlnet import (ArchDescriptor, ArlNet, BaselineNet, init_identity_stats,
                        load_checkpoint, save_checkpoint, stats_initialized,
                        subnet_rng, zero_grads)
from arl.autodiff import Tensor
from arl.datasets import generate_synthetic, sample_episode
from arl.errors import (ContractError, DescriptorMismatchError, FormatError,
                        StatsUninitializedError)

SMALL = dict(image_size=32, enc_channels=8, trunk_channels=8, class_dim=8,
             attr_dim=16, rel_hidden=4)


@pytest.fixture(scope="module")
def episode():
    ds = generate_synthetic(seed=7, n_classes=12, per_class=10, side=32)
    return sample_episode(ds, 3, 2, 2, "train", seed=0)


class TestDescriptor:
    def test_spatial_math(self):
        assert ArchDescriptor(image_size=28).enc_spatial == 1
        assert ArchDescriptor(image_size=32).enc_spatial == 2
        assert ArchDescriptor(image_size=64).enc_spatial == 4
        for size in (28, 32, 64):
            assert ArchDescriptor(image_size=size).trunk_spatial == 1

    def test_feedback_channel_count(self):
        d = ArchDescriptor(class_dim=12, attr_dim=16)
        assert d.feedback_channels == 2 * (12 + 16)
        d2 = ArchDescriptor(class_dim=2, attr_dim=4)
        assert d2.feedback_channels == 2 * (2 + 4)

    def test_json_round_trip(self):
        d = ArchDescriptor(**SMALL, precision="f64", feedback_detach=True)
        back = ArchDescriptor.from_json(d.to_json())
        assert back == d
        assert json.dumps(d.to_json())  # payload is plain JSON

    def test_dtype(self):
        assert ArchDescriptor(precision="f32").dtype == np.float32
        assert ArchDescriptor(precision="f64").dtype == np.float64


class TestInit:
    def test_deterministic_in_seed(self):
        d = ArchDescriptor(**SMALL)
        a, b = ArlNet(d, seed=3), ArlNet(d, seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(),
                                      b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        c = ArlNet(d, seed=4)
        assert any(not np.array_equal(pa.data, pc.data)
                   for (_, pa), (_, pc) in zip(a.named_parameters(),
                                               c.named_parameters()))

    def test_subnet_streams_are_independent(self):
        a = subnet_rng(0, "encoder").random(4)
        b = subnet_rng(0, "trunk").random(4)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, subnet_rng(0, "encoder").random(4))

    def test_baseline_shares_subnet_streams(self):
        d = dataclasses.replace(ArchDescriptor(**SMALL),
                                absolute_feedback=False,
                                relative_feedback=False)
        arl = ArlNet(d, seed=5)
        base = BaselineNet(d, seed=5)
        pa, pb = dict(arl.named_parameters()), dict(base.named_parameters())
        assert set(pb) < set(pa)  # baseline lacks the absolute heads
        for name in pb:
            np.testing.assert_array_equal(pa[name].data, pb[name].data, name)

    def test_baseline_requires_feedback_off(self):
        with pytest.raises(ContractError):
            BaselineNet(ArchDescriptor(**SMALL), seed=0)

    def test_param_dtype_follows_precision(self):
        d = ArchDescriptor(**SMALL, precision="f64")
        net = ArlNet(d, seed=0)
        assert all(p.data.dtype == np.float64
                   for _, p in net.named_parameters())


class TestForward:
    def test_supervised_bundle_shapes(self, episode):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        fb = net.forward_supervised(episode, train=True)
        assert (fb.n_rows, fb.n_cols) == (3, 6)
        assert fb.c_rel.data.shape == (18, 1)  # (L rows) x (L*Q cols)
        assert fb.a_rel.data.shape == (18, 1)
        assert fb.class_logits.data.shape == (12, 8)  # L*Z + L*Q images
        assert fb.attr_pred.data.shape == (12, 16)

    def test_all_pairs_bundle_shapes(self, episode):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        fb = net.forward_supervised(episode, train=True, pair_mode="all_pairs")
        n = 3 + 3 * 2
        assert (fb.n_rows, fb.n_cols) == (n, n)
        assert fb.c_rel.data.shape == (n * n, 1)

    def test_forward_is_pure_with_frozen_stats(self, episode):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        a = net.forward_supervised(episode, train=True, update_stats=False)
        b = net.forward_supervised(episode, train=True, update_stats=False)
        np.testing.assert_array_equal(a.c_rel.data, b.c_rel.data)
        np.testing.assert_array_equal(a.class_logits.data,
                                      b.class_logits.data)

    def test_batched_pairs_match_single_pairs(self, episode):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        init_identity_stats(net)
        phi = net.encode(episode.support_x, train=False)
        n = phi.data.shape[0]
        c_all, a_all = net.relation_scores(phi, phi, train=False)
        c_grid = c_all.data.reshape(n, n)
        a_grid = a_all.data.reshape(n, n)
        for i in (0, 2, 5):
            for j in (1, 3, 4):
                pi = Tensor(phi.data[i:i + 1], requires_grad=False)
                pj = Tensor(phi.data[j:j + 1], requires_grad=False)
                ci, ai = net.relation_scores(pi, pj, train=False)
                assert c_grid[i, j] == pytest.approx(float(ci.data[0, 0]),
                                                     abs=1e-6)
                assert a_grid[i, j] == pytest.approx(float(ai.data[0, 0]),
                                                     abs=1e-6)

    def test_unsupervised_bundle_shapes(self, episode):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        x = episode.support_x[:3]
        y = episode.support_x[3:6]
        ub = net.forward_unsupervised(x, y, train=True)
        assert ub.zeta.data.shape == (3, 3)
        assert ub.zeta_star.data.shape == (3, 3)
        assert ub.zeta_cross.data.shape == (3, 3)
        assert ub.a_rel_xx.data.shape == (9, 1)
        assert ub.a_rel_yy.data.shape == (9, 1)
        assert ub.a_rel_xy.data.shape == (9, 1)
        assert ub.class_logits.data.shape == (6, 8)
        assert ub.attr_pred.data.shape == (6, 16)


class TestStats:
    def test_eval_before_any_training_raises(self, episode):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        with pytest.raises(StatsUninitializedError, match="stats-uninitialized"):
            net.forward_supervised(episode, train=False)

    def test_identity_stats_enable_eval(self, episode):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        init_identity_stats(net)
        assert stats_initialized(net)
        fb = net.forward_supervised(episode, train=False)
        assert np.all(np.isfinite(fb.c_rel.data))

    def test_training_forward_initializes_stats(self, episode):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        assert not stats_initialized(net)
        net.forward_supervised(episode, train=True)
        assert stats_initialized(net)

    def test_mixed_initialization_is_a_contract_error(self, episode):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        init_identity_stats(net)
        _, bn = next(iter(net.bn_layers()))
        bn.state.initialized = False
        with pytest.raises(ContractError):
            stats_initialized(net)

    def test_zero_grads(self, episode):
        from arl import autodiff as ad
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        fb = net.forward_supervised(episode, train=True)
        ad.tsum(fb.c_rel).backward()
        assert any(p.grad is not None and np.any(p.grad)
                   for _, p in net.named_parameters())
        zero_grads(net)
        assert all(p.grad is None or not np.any(p.grad)
                   for _, p in net.named_parameters())


class TestCheckpoint:
    def test_round_trip_bit_exact(self, episode, tmp_path):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        net.forward_supervised(episode, train=True)  # realistic BN stats
        p = tmp_path / "model.ckpt"
        save_checkpoint(str(p), net, iteration=17)
        net2, it = load_checkpoint(str(p))
        assert it == 17
        assert isinstance(net2, ArlNet)
        assert net2.desc == net.desc
        for (na, pa), (nb, pb) in zip(net.named_parameters(),
                                      net2.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        for (na, ba), (nb, bb) in zip(net.bn_layers(), net2.bn_layers()):
            np.testing.assert_array_equal(ba.state.mean, bb.state.mean)
            np.testing.assert_array_equal(ba.state.var, bb.state.var)
            assert ba.state.initialized == bb.state.initialized

    def test_resave_is_byte_identical(self, episode, tmp_path):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        net.forward_supervised(episode, train=True)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(str(p1), net, iteration=5)
        net2, _ = load_checkpoint(str(p1))
        save_checkpoint(str(p2), net2, iteration=5)
        assert p1.read_bytes() == p2.read_bytes()

    def test_baseline_kind_round_trips(self, tmp_path):
        d = dataclasses.replace(ArchDescriptor(**SMALL),
                                absolute_feedback=False,
                                relative_feedback=False)
        net = BaselineNet(d, seed=1)
        init_identity_stats(net)
        p = tmp_path / "b.ckpt"
        save_checkpoint(str(p), net, iteration=0)
        net2, _ = load_checkpoint(str(p))
        assert isinstance(net2, BaselineNet)

    def test_truncated_file(self, tmp_path):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        init_identity_stats(net)
        p = tmp_path / "m.ckpt"
        save_checkpoint(str(p), net, iteration=0)
        raw = p.read_bytes()
        (tmp_path / "half.ckpt").write_bytes(raw[:len(raw) // 2])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(str(tmp_path / "half.ckpt"))
        (tmp_path / "nearly.ckpt").write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(str(tmp_path / "nearly.ckpt"))

    def test_garbage_header(self, tmp_path):
        p = tmp_path / "g.ckpt"
        p.write_bytes(b"\x00\x01\x02 not json\n" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_checkpoint(str(p))

    def test_tensor_list_mismatch(self, tmp_path):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        init_identity_stats(net)
        p = tmp_path / "m.ckpt"
        save_checkpoint(str(p), net, iteration=0)
        head, _, body = p.read_bytes().partition(b"\n")
        header = json.loads(head)
        header["tensors"] = header["tensors"][:-1]
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(json.dumps(header, sort_keys=True).encode()
                        + b"\n" + body)
        with pytest.raises(DescriptorMismatchError):
            load_checkpoint(str(bad))

    def test_trailing_bytes(self, tmp_path):
        net = ArlNet(ArchDescriptor(**SMALL), seed=0)
        init_identity_stats(net)
        p = tmp_path / "m.ckpt"
        save_checkpoint(str(p), net, iteration=0)
        (tmp_path / "fat.ckpt").write_bytes(p.read_bytes() + b"\x00" * 16)
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(str(tmp_path / "fat.ckpt"))
