"""Architecture contracts, decoder isolation, and checkpoint serialization."""

import numpy as np
import pytest

from metamtl import nn
from metamtl.errors import FormatError, ParameterError, ShapeError
from metamtl.tensor import Tensor


def _conv_params(cin, cout, k):
    return cout * cin * k * k + cout


def _dense_params(a, b):
    return a * b + b


class TestArchSpecs:
    def test_mnist2_feature_dim(self):
        spec = nn.arch_spec("mnist2")
        assert spec.shape_walk() == [(1, 28, 28), (32, 12, 12), (64, 4, 4)]
        assert spec.feature_dim == 1024

    def test_omniglot4_feature_dim(self):
        spec = nn.arch_spec("omniglot4")
        assert spec.feature_dim == 848  # 53 filters * 4 * 4

    def test_mini4_feature_dim(self):
        spec = nn.arch_spec("mini4")
        assert spec.feature_dim == 288  # 32 filters * 3 * 3

    def test_unknown_arch(self):
        with pytest.raises(ParameterError):
            nn.arch_spec("resnet50")

    def test_incompatible_input_shape(self):
        spec = nn.arch_spec("mnist2", input_shape=(1, 6, 6))
        with pytest.raises(ShapeError):
            nn.build(spec, [10], seed=0)

    def test_param_counts_derived(self):
        # mnist2 encoder: conv(1->32,5) + conv(32->64,4); decoder: 1024 -> L
        expect = (_conv_params(1, 32, 5) + _conv_params(32, 64, 4)
                  + _dense_params(1024, 10))
        assert nn.param_count(nn.arch_spec("mnist2"), [10]) == expect

        # omniglot4: 4 convs of 53 filters/3x3 + decoder 848 -> 848 -> L
        spec = nn.arch_spec("omniglot4")
        expect = (_conv_params(1, 53, 3) + 3 * _conv_params(53, 53, 3)
                  + _dense_params(848, 848) + _dense_params(848, 14))
        assert nn.param_count(spec, [14]) == expect

        # mini4: 4 convs of 32 filters/3x3 + decoder 288 -> 100 -> L
        spec = nn.arch_spec("mini4")
        expect = (_conv_params(3, 32, 3) + 3 * _conv_params(32, 32, 3)
                  + _dense_params(288, 100) + _dense_params(100, 5))
        assert nn.param_count(spec, [5]) == expect


class TestBuild:
    def test_decoder_widths(self):
        model = nn.build(nn.arch_spec("mnist2"), [10], seed=0)
        assert model.theta_D[0][-1].shape == (10,)

        og = nn.build(nn.arch_spec("omniglot4"), [14, 20], seed=0)
        assert og.theta_D[0][-1].shape == (14,)
        assert og.theta_D[1][-1].shape == (20,)

    def test_seed_determinism(self):
        a = nn.build(nn.arch_spec("mnist2"), [10], seed=5)
        b = nn.build(nn.arch_spec("mnist2"), [10], seed=5)
        assert all(np.array_equal(x.data, y.data)
                   for x, y in zip(a.all_tensors(), b.all_tensors()))

    def test_class_count_validation(self):
        with pytest.raises(ParameterError):
            nn.build(nn.arch_spec("mnist2"), [1], seed=0)


class TestForward:
    def test_logits_shape(self):
        model = nn.build(nn.arch_spec("mnist2"), [10], seed=0)
        x = np.random.default_rng(0).random((5, 1, 28, 28))
        assert nn.forward(model, 0, x).shape == (5, 10)

    def test_eval_determinism(self):
        model = nn.build(nn.arch_spec("omniglot4"), [7], seed=0)
        x = np.random.default_rng(1).random((2, 1, 105, 105))
        a = nn.forward(model, 0, x, training=False)
        b = nn.forward(model, 0, x, training=False)
        assert np.array_equal(a.data, b.data)

    def test_mnist2_encoder_flattens_to_1024(self):
        model = nn.build(nn.arch_spec("mnist2"), [10], seed=0)
        x = np.random.default_rng(2).random((3, 1, 28, 28))
        assert nn.shared_output(model, x).shape == (3, 1024)

    def test_unknown_task_index(self):
        model = nn.build(nn.arch_spec("mnist2"), [10], seed=0)
        x = np.zeros((1, 1, 28, 28))
        with pytest.raises(IndexError):
            nn.forward(model, 1, x)

    def test_wrong_input_shape(self):
        model = nn.build(nn.arch_spec("mnist2"), [10], seed=0)
        with pytest.raises(ShapeError):
            nn.forward(model, 0, np.zeros((1, 1, 14, 14)))

    def test_training_dropout_is_seed_deterministic(self):
        model = nn.build(nn.arch_spec("omniglot4"), [7], seed=0)
        x = np.random.default_rng(3).random((2, 1, 105, 105))
        a = nn.forward(model, 0, x, training=True, seed=9)
        b = nn.forward(model, 0, x, training=True, seed=9)
        c = nn.forward(model, 0, x, training=True, seed=10)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)


class TestSharing:
    def test_shared_output_task_invariant(self):
        model = nn.build(nn.arch_spec("toy_dense", (1, 1, 6), hidden=8), [3, 4], seed=0)
        x = np.random.default_rng(4).random((5, 1, 1, 6))
        h = nn.shared_output(model, x)
        # decoders differ, but the encoder output is the same object of study
        za = nn.forward(model, 0, x)
        zb = nn.forward(model, 1, x)
        assert h.shape == (5, 8)
        assert za.shape == (5, 3) and zb.shape == (5, 4)

    def test_self_distance_zero(self):
        model = nn.build(nn.arch_spec("toy_dense", (1, 1, 6), hidden=8), [2], seed=0)
        x = np.random.default_rng(5).random((1, 1, 1, 6))
        h1 = nn.shared_output(model, x).data
        h2 = nn.shared_output(model, x).data
        assert np.linalg.norm(h1 - h2) == 0.0

    def test_decoder_isolation(self):
        model = nn.build(nn.arch_spec("toy_dense", (1, 1, 6), hidden=8), [3, 4], seed=0)
        x = np.random.default_rng(6).random((5, 1, 1, 6))
        before = nn.forward(model, 0, x).data.copy()
        for w in model.theta_D[1]:
            w.data += 1.0
        after = nn.forward(model, 0, x).data
        assert np.array_equal(before, after)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = nn.build(nn.arch_spec("mnist2"), [10, 7], seed=3)
        path = tmp_path / "model.mmtl"
        nn.save_checkpoint(path, model)
        loaded = nn.load_checkpoint(path)
        assert loaded.arch == model.arch
        assert loaded.task_class_counts == model.task_class_counts
        assert all(np.array_equal(a.data, b.data)
                   for a, b in zip(model.all_tensors(), loaded.all_tensors()))

    def test_round_trip_toy_dense(self, tmp_path):
        model = nn.build(nn.arch_spec("toy_dense", (2, 3, 4), hidden=11), [3], seed=1)
        path = tmp_path / "toy.mmtl"
        nn.save_checkpoint(path, model)
        loaded = nn.load_checkpoint(path)
        assert loaded.arch == model.arch

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mmtl"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            nn.load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        model = nn.build(nn.arch_spec("toy_dense", (1, 1, 4), hidden=4), [2], seed=0)
        path = tmp_path / "trunc.mmtl"
        nn.save_checkpoint(path, model)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 9])
        with pytest.raises(FormatError, match="truncated"):
            nn.load_checkpoint(path)

    def test_non_finite_rejected(self, tmp_path):
        model = nn.build(nn.arch_spec("toy_dense", (1, 1, 4), hidden=4), [2], seed=0)
        model.theta_F[0].data[0, 0] = np.nan
        path = tmp_path / "nan.mmtl"
        nn.save_checkpoint(path, model)
        with pytest.raises(FormatError, match="non-finite"):
            nn.load_checkpoint(path)

    def test_save_is_deterministic(self, tmp_path):
        model = nn.build(nn.arch_spec("toy_dense", (1, 1, 4), hidden=4), [2], seed=0)
        p1, p2 = tmp_path / "a.mmtl", tmp_path / "b.mmtl"
        nn.save_checkpoint(p1, model)
        nn.save_checkpoint(p2, model)
        assert p1.read_bytes() == p2.read_bytes()
