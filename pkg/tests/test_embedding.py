"""Autoencoder training, embedding extraction, and EMB1 file round-trips."""

import struct

import numpy as np
import pytest

from metamtl.data import LabeledDataset
from metamtl.embedding import (AutoencoderConfig, EmbeddingMatrix, embed,
                               export_embeddings, import_embeddings,
                               train_autoencoder)
from metamtl.errors import DataError, FormatError, ParameterError


def _small_cfg(**kw):
    base = dict(latent_dim=4, epochs=3, batch_size=16, learning_rate=0.1, seed=0)
    base.update(kw)
    return AutoencoderConfig(**base)


class TestTrainAutoencoder:
    def test_empty_dataset_rejected(self):
        data = LabeledDataset(np.zeros((0, 1, 1, 4)), None, 2)
        with pytest.raises(DataError):
            train_autoencoder(data, _small_cfg())

    def test_loss_decreases(self, digits):
        sub = digits.subset(np.arange(300))
        ae = train_autoencoder(sub, _small_cfg(latent_dim=8, epochs=8))
        assert ae.epoch_losses[-1] < ae.epoch_losses[0]

    def test_seed_determinism(self, digits):
        sub = digits.subset(np.arange(120))
        a = train_autoencoder(sub, _small_cfg())
        b = train_autoencoder(sub, _small_cfg())
        assert all(np.array_equal(x.data, y.data)
                   for x, y in zip(a.params(), b.params()))

    def test_zero_learning_rate_freezes_params(self, digits):
        # with lr=0 the parameters never leave their seeded initialization
        sub = digits.subset(np.arange(80))
        a = train_autoencoder(sub, _small_cfg(learning_rate=0.0, epochs=3))
        b = train_autoencoder(sub, _small_cfg(learning_rate=0.0, epochs=1))
        assert all(np.array_equal(x.data, y.data)
                   for x, y in zip(a.params(), b.params()))

    def test_conv_path_used_for_28x28(self):
        rng = np.random.default_rng(0)
        data = LabeledDataset(rng.random((24, 1, 28, 28)), None, 2)
        ae = train_autoencoder(data, _small_cfg(epochs=1))
        assert ae.kind == "conv"

    def test_dense_path_for_flat_inputs(self):
        rng = np.random.default_rng(1)
        data = LabeledDataset(rng.random((24, 1, 1, 8)), None, 2)
        ae = train_autoencoder(data, _small_cfg(epochs=1))
        assert ae.kind == "dense"

    def test_linear_capacity_identity(self):
        # rank-d data with d = input dimension: reconstruction can reach ~0
        rng = np.random.default_rng(2)
        data = LabeledDataset(rng.random((64, 1, 1, 4)), None, 2)
        ae = train_autoencoder(data, _small_cfg(latent_dim=4, epochs=60,
                                                learning_rate=0.3))
        assert ae.epoch_losses[-1] < 0.25 * ae.epoch_losses[0]

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            AutoencoderConfig(latent_dim=1)
        with pytest.raises(ParameterError):
            AutoencoderConfig(epochs=0)


class TestEmbed:
    def test_row_count_and_order(self, digits):
        sub = digits.subset(np.arange(60))
        ae = train_autoencoder(sub, _small_cfg(epochs=1))
        z = embed(sub, ae)
        assert z.n == 60 and z.d == 4
        assert z.source == "autoencoder"

    def test_duplicate_inputs_identical_rows(self, digits):
        sub = digits.subset(np.arange(40))
        ae = train_autoencoder(sub, _small_cfg(epochs=1))
        doubled = LabeledDataset(np.concatenate([sub.inputs[:1], sub.inputs[:1]]),
                                 None, 10)
        z = embed(doubled, ae)
        assert np.array_equal(z.rows[0], z.rows[1])

    def test_pure_function(self, digits):
        sub = digits.subset(np.arange(40))
        ae = train_autoencoder(sub, _small_cfg(epochs=1))
        assert np.array_equal(embed(sub, ae).rows, embed(sub, ae).rows)

    def test_class_structure_in_latent(self, digits):
        # two visually distinct digit classes separate in a 2-D latent space
        mask = (digits.labels == 0) | (digits.labels == 1)
        pair = digits.subset(np.flatnonzero(mask)[:200])
        ae = train_autoencoder(pair, _small_cfg(latent_dim=2, epochs=25,
                                                learning_rate=0.2, seed=1))
        z = embed(pair, ae)
        zero = z.rows[pair.labels == 0]
        one = z.rows[pair.labels == 1]
        between = np.linalg.norm(zero.mean(axis=0) - one.mean(axis=0))
        within = np.mean([np.linalg.norm(r - zero.mean(axis=0)) for r in zero]
                         + [np.linalg.norm(r - one.mean(axis=0)) for r in one])
        assert between > within

    def test_shape_mismatch(self, digits):
        ae = train_autoencoder(digits.subset(np.arange(40)), _small_cfg(epochs=1))
        other = LabeledDataset(np.zeros((3, 1, 1, 5)), None, 2)
        with pytest.raises(ParameterError):
            embed(other, ae)


class TestEmb1Format:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        matrix = EmbeddingMatrix(rng.random((7, 5)).astype(np.float32)
                                 .astype(np.float64), source="imported")
        path = tmp_path / "z.emb1"
        export_embeddings(path, matrix)
        loaded = import_embeddings(path)
        assert loaded.source == "imported"
        assert np.array_equal(loaded.rows, matrix.rows)

    def test_autoencoder_rows_round_trip_exact(self, digits, tmp_path):
        sub = digits.subset(np.arange(30))
        ae = train_autoencoder(sub, _small_cfg(epochs=1))
        z = embed(sub, ae)
        path = tmp_path / "ae.emb1"
        export_embeddings(path, z)
        assert np.array_equal(import_embeddings(path).rows, z.rows)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.emb1"
        path.write_bytes(b"EMB2" + struct.pack("<II", 1, 1) + b"\x00" * 4)
        with pytest.raises(FormatError, match="magic"):
            import_embeddings(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.emb1"
        path.write_bytes(b"EMB1" + struct.pack("<II", 3, 2)
                         + np.zeros(5, dtype="<f4").tobytes())
        with pytest.raises(FormatError, match="5 floats, expected 6"):
            import_embeddings(path)

    def test_nan_rejected(self, tmp_path):
        path = tmp_path / "nan.emb1"
        payload = np.array([1.0, np.nan], dtype="<f4")
        path.write_bytes(b"EMB1" + struct.pack("<II", 1, 2) + payload.tobytes())
        with pytest.raises(FormatError, match="non-finite"):
            import_embeddings(path)
