"""Latent embeddings for task construction: a reconstruction autoencoder
plus an import path for embeddings computed by external tools.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import DataError, FormatError, ParameterError
from .tensor import (Graph, Tensor, backward, conv2d, conv_transpose2d, dense,
                     maxpool2d, no_grad, relu, reshape)


@dataclass
class EmbeddingMatrix:
    """Per-example latent vectors; rows are float32-representable so that an
    EMB1 export/import round-trip is exact."""

    rows: np.ndarray
    source: str = "autoencoder"

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise DataError(f"embedding rows must be 2-D, got {self.rows.shape}")
        if not np.isfinite(self.rows).all():
            raise DataError("embedding rows must be finite")
        if self.source not in ("autoencoder", "imported", "synthetic"):
            raise DataError(f"unknown embedding source {self.source!r}")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class AutoencoderConfig:
    latent_dim: int = 32
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ParameterError(f"latent_dim must be >= 2, got {self.latent_dim}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ParameterError("epochs and batch_size must be positive, "
                                 "learning_rate non-negative")


def _conv_geometry(shape: tuple[int, int, int]):
    """Check whether the conv encoder/decoder pair reproduces the input size."""
    c, h, w = shape
    h1, w1 = h - 4, w - 4
    if h1 < 1 or w1 < 1:
        return None
    h1, w1 = h1 // 2, w1 // 2
    h2, w2 = h1 - 3, w1 - 3
    if h2 < 1 or w2 < 1:
        return None
    h2, w2 = h2 // 2, w2 // 2
    if h2 < 1 or w2 < 1:
        return None
    up = lambda s: (((s - 1) * 2 + 6) - 1) * 2 + 6
    if up(h2) != h or up(w2) != w:
        return None
    return h2, w2


@dataclass
class Autoencoder:
    """Trained encoder/decoder tensors plus the loss trajectory."""

    input_shape: tuple[int, int, int]
    latent_dim: int
    kind: str  # "conv" or "dense"
    encoder: list[Tensor]
    decoder: list[Tensor]
    bottleneck_shape: tuple[int, int, int] | None
    epoch_losses: list[float] = field(default_factory=list)

    def params(self) -> list[Tensor]:
        return self.encoder + self.decoder

    def encode(self, x: Tensor) -> Tensor:
        if self.kind == "conv":
            h = relu(conv2d(x, self.encoder[0], self.encoder[1]))
            h = maxpool2d(h, 2)
            h = relu(conv2d(h, self.encoder[2], self.encoder[3]))
            h = maxpool2d(h, 2)
            h = reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
            return dense(h, self.encoder[4], self.encoder[5])
        n = x.shape[0]
        h = reshape(x, (n, int(np.prod(x.shape[1:]))))
        h = relu(dense(h, self.encoder[0], self.encoder[1]))
        return dense(h, self.encoder[2], self.encoder[3])

    def decode(self, z: Tensor) -> Tensor:
        n = z.shape[0]
        if self.kind == "conv":
            c2, h2, w2 = self.bottleneck_shape
            h = relu(dense(z, self.decoder[0], self.decoder[1]))
            h = reshape(h, (n, c2, h2, w2))
            h = relu(conv_transpose2d(h, self.decoder[2], self.decoder[3], stride=2))
            return conv_transpose2d(h, self.decoder[4], self.decoder[5], stride=2)
        h = relu(dense(z, self.decoder[0], self.decoder[1]))
        h = dense(h, self.decoder[2], self.decoder[3])
        return reshape(h, (n,) + self.input_shape)


def _init(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _build_autoencoder(input_shape, d: int, rng) -> Autoencoder:
    c, h, w = input_shape
    geom = _conv_geometry(input_shape)
    if geom is not None:
        h2, w2 = geom
        flat = 64 * h2 * w2
        encoder = [
            _init(rng, (32, c, 5, 5), c * 25, 32 * 25), _zeros((32,)),
            _init(rng, (64, 32, 4, 4), 32 * 16, 64 * 16), _zeros((64,)),
            _init(rng, (flat, d), flat, d), _zeros((d,)),
        ]
        decoder = [
            _init(rng, (d, flat), d, flat), _zeros((flat,)),
            _init(rng, (64, 32, 6, 6), 64 * 36, 32 * 36), _zeros((32,)),
            _init(rng, (32, c, 6, 6), 32 * 36, c * 36), _zeros((c,)),
        ]
        return Autoencoder(input_shape, d, "conv", encoder, decoder, (64, h2, w2))
    flat = int(np.prod(input_shape))
    hidden = 128
    encoder = [
        _init(rng, (flat, hidden), flat, hidden), _zeros((hidden,)),
        _init(rng, (hidden, d), hidden, d), _zeros((d,)),
    ]
    decoder = [
        _init(rng, (d, hidden), d, hidden), _zeros((hidden,)),
        _init(rng, (hidden, flat), hidden, flat), _zeros((flat,)),
    ]
    return Autoencoder(input_shape, d, "dense", encoder, decoder, None)


def train_autoencoder(data: LabeledDataset, cfg: AutoencoderConfig) -> Autoencoder:
    """Minimize mean squared reconstruction error with momentum SGD.

    Labels are ignored; only the inputs matter.
    """
    if data.n == 0:
        raise DataError("cannot train an autoencoder on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    ae = _build_autoencoder(data.input_shape, cfg.latent_dim, rng)
    params = ae.params()
    velocity = [np.zeros_like(p.data) for p in params]

    for _ in range(cfg.epochs):
        order = rng.permutation(data.n)
        losses = []
        for start in range(0, data.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(data.inputs[idx])
            recon = ae.decode(ae.encode(x))
            loss = ((recon - x) * (recon - x)).mean()
            grads = backward(loss)
            for p, v in zip(params, velocity):
                v *= cfg.momentum
                v += grads.data(p)
                p.data -= cfg.learning_rate * v
            losses.append(loss.item())
        ae.epoch_losses.append(float(np.mean(losses)))
    return ae


def embed(data: LabeledDataset, encoder: Autoencoder,
          batch_size: int = 256) -> EmbeddingMatrix:
    """Eval-mode encoding of every example, in dataset order."""
    if data.input_shape != encoder.input_shape:
        raise ParameterError(
            f"dataset shape {data.input_shape} does not match the encoder's "
            f"{encoder.input_shape}")
    rows = np.empty((data.n, encoder.latent_dim), dtype=np.float64)
    with no_grad():
        for start in range(0, data.n, batch_size):
            x = Tensor(data.inputs[start:start + batch_size])
            rows[start:start + len(x.data)] = encoder.encode(x).data
    # quantize to float32 so EMB1 round-trips are exact
    return EmbeddingMatrix(rows.astype(np.float32).astype(np.float64),
                           source="autoencoder")


_EMB_MAGIC = b"EMB1"


def export_embeddings(path, matrix: EmbeddingMatrix) -> None:
    with open(path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<II", matrix.n, matrix.d))
        f.write(matrix.rows.astype("<f4").tobytes())


def import_embeddings(path) -> EmbeddingMatrix:
    with open(path, "rb") as f:
        if f.read(4) != _EMB_MAGIC:
            raise FormatError("bad embedding magic, expected 'EMB1'")
        head = f.read(8)
        if len(head) != 8:
            raise FormatError("embedding file truncated while reading the header")
        n, d = struct.unpack("<II", head)
        payload = f.read()
    if len(payload) != 4 * n * d:
        raise FormatError(
            f"embedding payload holds {len(payload) // 4} floats, expected {n * d}")
    rows = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, d)
    if not np.isfinite(rows).all():
        raise FormatError("embedding file contains non-finite values")
    return EmbeddingMatrix(rows, source="imported")
