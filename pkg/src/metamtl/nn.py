"""Shared encoder with per-task decoder heads, plus checkpoint serialization.

Three benchmark architectures are provided (a 4-conv 105x105 character net,
a 2-conv 28x28 digit net, a 4-conv 84x84 natural-image net) together with a
tiny dense net for synthetic data and fast tests.  All parameters are plain
graph tensors so forward passes can be taken at substituted shared weights,
which the meta update relies on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError, ShapeError
from .tensor import Tensor, conv2d, dense, dropout, maxpool2d, relu, reshape


@dataclass(frozen=True)
class ConvLayer:
    filters: int
    kernel: int
    pool: int
    dropout: float = 0.0


@dataclass(frozen=True)
class ArchSpec:
    """Static description of one encoder/decoder family."""

    name: str
    input_shape: tuple[int, int, int]
    conv_layers: tuple[ConvLayer, ...] = ()
    dense_layers: tuple[int, ...] = ()
    decoder_hidden: tuple[int, ...] = ()

    def shape_walk(self) -> list[tuple[int, int, int]]:
        """Per-layer [C,H,W] after each conv+pool stage; raises on underflow."""
        c, h, w = self.input_shape
        shapes = [(c, h, w)]
        for layer in self.conv_layers:
            h, w = h - layer.kernel + 1, w - layer.kernel + 1
            if h <= 0 or w <= 0:
                raise ShapeError(
                    f"{self.name}: spatial extent exhausted at a {layer.kernel}x"
                    f"{layer.kernel} conv (input {self.input_shape})")
            if layer.pool > 1:
                if layer.pool > h or layer.pool > w:
                    raise ShapeError(
                        f"{self.name}: {layer.pool}x{layer.pool} pool larger than {h}x{w}")
                h, w = h // layer.pool, w // layer.pool
            c = layer.filters
            shapes.append((c, h, w))
        return shapes

    @property
    def feature_dim(self) -> int:
        c, h, w = self.shape_walk()[-1]
        dim = c * h * w
        for width in self.dense_layers:
            dim = width
        return dim


_ARCH_ORDINALS = {"omniglot4": 0, "mnist2": 1, "mini4": 2, "toy_dense": 3}
_ARCH_NAMES = {v: k for k, v in _ARCH_ORDINALS.items()}


def arch_spec(name: str, input_shape: tuple[int, int, int] | None = None,
              hidden: int = 32) -> ArchSpec:
    """Look up an architecture by name, optionally overriding the input shape."""
    if name == "omniglot4":
        return ArchSpec(name, input_shape or (1, 105, 105),
                        conv_layers=tuple(ConvLayer(53, 3, 2, 0.5) for _ in range(4)),
                        decoder_hidden=(848,))
    if name == "mnist2":
        return ArchSpec(name, input_shape or (1, 28, 28),
                        conv_layers=(ConvLayer(32, 5, 2), ConvLayer(64, 4, 2)))
    if name == "mini4":
        return ArchSpec(name, input_shape or (3, 84, 84),
                        conv_layers=tuple(ConvLayer(32, 3, 2) for _ in range(4)),
                        decoder_hidden=(100,))
    if name == "toy_dense":
        if input_shape is None:
            raise ParameterError("toy_dense needs an explicit input_shape")
        return ArchSpec(name, tuple(input_shape), dense_layers=(hidden,))
    raise ParameterError(f"unknown architecture {name!r}")


@dataclass
class ModelParams:
    """Shared-encoder tensors plus one decoder tensor list per task.

    theta_D[0] is always the main-task decoder.
    """

    arch: ArchSpec
    theta_F: list[Tensor]
    theta_D: list[list[Tensor]]
    task_class_counts: list[int]

    @property
    def n_tasks(self) -> int:
        return len(self.theta_D)

    def all_tensors(self):
        yield from self.theta_F
        for dec in self.theta_D:
            yield from dec

    def finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.all_tensors())


def _init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _decoder_params(rng, feature_dim: int, hidden: tuple[int, ...], n_classes: int):
    widths = [feature_dim, *hidden, n_classes]
    params = []
    for a, b in zip(widths, widths[1:]):
        params.append(_init(rng, (a, b), a, b))
        params.append(_zeros((b,)))
    return params


def build(arch: ArchSpec, task_class_counts: list[int], seed: int) -> ModelParams:
    """Initialize fan-in-scaled uniform weights and zero biases for all tasks."""
    for n in task_class_counts:
        if n < 2:
            raise ParameterError(f"every task needs >= 2 classes, got {n}")
    arch.shape_walk()  # raises ShapeError for an incompatible input shape
    rng = np.random.default_rng(seed)

    theta_f: list[Tensor] = []
    c = arch.input_shape[0]
    for layer in arch.conv_layers:
        k = layer.kernel
        theta_f.append(_init(rng, (layer.filters, c, k, k), c * k * k, layer.filters * k * k))
        theta_f.append(_zeros((layer.filters,)))
        c = layer.filters
    dim = int(np.prod(arch.shape_walk()[-1]))
    for width in arch.dense_layers:
        theta_f.append(_init(rng, (dim, width), dim, width))
        theta_f.append(_zeros((width,)))
        dim = width

    theta_d = [_decoder_params(rng, arch.feature_dim, arch.decoder_hidden, n)
               for n in task_class_counts]
    return ModelParams(arch, theta_f, theta_d, list(task_class_counts))


def _encode(arch: ArchSpec, weights: list[Tensor], x: Tensor,
            training: bool, seed: int) -> Tensor:
    h = x
    i = 0
    for li, layer in enumerate(arch.conv_layers):
        h = relu(conv2d(h, weights[i], weights[i + 1]))
        i += 2
        if layer.pool > 1:
            h = maxpool2d(h, layer.pool)
        if layer.dropout > 0.0:
            h = dropout(h, layer.dropout, training,
                        np.random.SeedSequence(entropy=int(seed), spawn_key=(li,)))
    n = h.shape[0]
    h = reshape(h, (n, int(np.prod(h.shape[1:]))))
    for _ in arch.dense_layers:
        h = relu(dense(h, weights[i], weights[i + 1]))
        i += 2
    return h


def _decode(weights: list[Tensor], h: Tensor) -> Tensor:
    n_affine = len(weights) // 2
    for j in range(n_affine):
        h = dense(h, weights[2 * j], weights[2 * j + 1])
        if j < n_affine - 1:
            h = relu(h)
    return h


def forward(params: ModelParams, t: int, x, training: bool = False, seed: int = 0,
            theta_F: list[Tensor] | None = None,
            theta_D_t: list[Tensor] | None = None) -> Tensor:
    """Logits of task t; shared weights can be substituted for meta updates."""
    if not 0 <= t < params.n_tasks:
        raise IndexError(f"task index {t} out of range [0, {params.n_tasks})")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1:] != params.arch.input_shape:
        raise ShapeError(
            f"input shape {x.shape} does not match [N, {params.arch.input_shape}]")
    h = _encode(params.arch, theta_F if theta_F is not None else params.theta_F,
                x, training, seed)
    return _decode(theta_D_t if theta_D_t is not None else params.theta_D[t], h)


def shared_output(params: ModelParams, x, theta_F: list[Tensor] | None = None) -> Tensor:
    """Flattened eval-mode encoder activation, identical for every task."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1:] != params.arch.input_shape:
        raise ShapeError(
            f"input shape {x.shape} does not match [N, {params.arch.input_shape}]")
    return _encode(params.arch, theta_F if theta_F is not None else params.theta_F,
                   x, training=False, seed=0)


def param_count(arch: ArchSpec, task_class_counts: list[int]) -> int:
    model = build(arch, task_class_counts, seed=0)
    return sum(t.size for t in model.all_tensors())


# ---------------------------------------------------------------------------
# checkpoint format: magic "MMTL", u32 version, then named tensor records


_MAGIC = b"MMTL"
_VERSION = 1


def _records(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    arch = params.arch
    recs = [
        ("meta.arch", np.array([_ARCH_ORDINALS[arch.name]], dtype=np.float64)),
        ("meta.input_shape", np.asarray(arch.input_shape, dtype=np.float64)),
        ("meta.class_counts", np.asarray(params.task_class_counts, dtype=np.float64)),
        ("meta.dense_hidden", np.asarray(arch.dense_layers, dtype=np.float64)),
    ]
    for i, t in enumerate(params.theta_F):
        recs.append((f"theta_F.{i}", t.data))
    for ti, dec in enumerate(params.theta_D):
        for j, t in enumerate(dec):
            recs.append((f"theta_D.{ti}.{j}", t.data))
    return recs


def save_checkpoint(path, params: ModelParams) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        for name, arr in _records(params):
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path) -> ModelParams:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise FormatError("bad checkpoint magic, expected 'MMTL'")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("checkpoint truncated while reading a record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "record name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"extents of {name}"))
            count = int(np.prod(shape)) if rank else 1
            payload = _read_exact(f, 8 * count, f"payload of {name}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)

    for key in ("meta.arch", "meta.input_shape", "meta.class_counts"):
        if key not in arrays:
            raise FormatError(f"checkpoint is missing the {key} record")
    ordinal = int(arrays["meta.arch"][0])
    if ordinal not in _ARCH_NAMES:
        raise FormatError(f"unknown architecture ordinal {ordinal}")
    name = _ARCH_NAMES[ordinal]
    input_shape = tuple(int(v) for v in arrays["meta.input_shape"])
    counts = [int(v) for v in arrays["meta.class_counts"]]
    hidden = tuple(int(v) for v in arrays.get("meta.dense_hidden", ()))
    arch = arch_spec(name, input_shape, hidden=hidden[0]) if name == "toy_dense" \
        else arch_spec(name, input_shape)

    reference = build(arch, counts, seed=0)
    params = ModelParams(arch, [], [], counts)
    for i, ref in enumerate(reference.theta_F):
        key = f"theta_F.{i}"
        if key not in arrays:
            raise FormatError(f"checkpoint is missing the {key} record")
        arr = arrays[key]
        if arr.shape != ref.shape:
            raise FormatError(f"{key} has shape {arr.shape}, expected {ref.shape}")
        params.theta_F.append(Tensor(arr, requires_grad=True))
    for ti, dec_ref in enumerate(reference.theta_D):
        dec = []
        for j, ref in enumerate(dec_ref):
            key = f"theta_D.{ti}.{j}"
            if key not in arrays:
                raise FormatError(f"checkpoint is missing the {key} record")
            arr = arrays[key]
            if arr.shape != ref.shape:
                raise FormatError(f"{key} has shape {arr.shape}, expected {ref.shape}")
            dec.append(Tensor(arr, requires_grad=True))
        params.theta_D.append(dec)
    if not params.finite():
        raise FormatError("checkpoint contains non-finite values")
    return params
