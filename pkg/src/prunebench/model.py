"""Masked layer stacks, the CNN5 builder, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"PBCK"  u32 version  u32 h  u32 w  u32 c  u32 class_count  u32 n_layers
    per layer:
        u8 kind (1 = conv, 2 = dense)  u8 flags (1 relu, 2 maxpool, 4 same padding)
        weight block, bias block
    block:
        u8 prunable  u8 ndim  u32 extents[ndim]
        f64 values[prod(extents)]
        mask bits, LSB-first, padded to a whole byte
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .tensor import Tensor, affine, conv2d, flatten, maxpool2, relu

MAGIC = b"PBCK"
VERSION = 1
_KIND_TAGS = {"conv": 1, "dense": 2}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


@dataclass
class MaskedParameter:
    values: np.ndarray
    mask: np.ndarray
    prunable: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones_like(self.values)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != self.values.shape:
            raise DimensionError(f"mask shape {self.mask.shape} != values shape {self.values.shape}")

    @property
    def effective(self) -> np.ndarray:
        return self.values * self.mask

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def copy(self) -> MaskedParameter:
        return MaskedParameter(self.values.copy(), self.mask.copy(), self.prunable)


@dataclass
class Layer:
    kind: str  # "conv" or "dense"
    weight: MaskedParameter
    bias: MaskedParameter
    relu: bool = True
    pool: bool = False
    padding: str = "same"

    def params(self) -> list[MaskedParameter]:
        return [self.weight, self.bias]

    def copy(self) -> Layer:
        return Layer(self.kind, self.weight.copy(), self.bias.copy(), self.relu, self.pool, self.padding)


@dataclass
class MaskedNetwork:
    layers: list[Layer]
    input_shape: tuple[int, int, int]
    class_count: int

    def parameters(self) -> list[MaskedParameter]:
        return [p for layer in self.layers for p in layer.params()]

    def prunable_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.weight.prunable]

    def copy(self) -> MaskedNetwork:
        return MaskedNetwork([layer.copy() for layer in self.layers], tuple(self.input_shape), self.class_count)

    def fingerprint(self) -> str:
        """SHA-256 of the serialized checkpoint; identifies the exact model."""
        return hashlib.sha256(to_bytes(self)).hexdigest()


@dataclass(frozen=True)
class SparsityStat:
    total: int
    nonzero: int
    per_layer: tuple[tuple[int, int], ...] = field(default=())

    @property
    def compression_rate(self) -> float:
        return self.total / self.nonzero if self.nonzero else math.inf


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_cnn5(
    input_shape: tuple[int, int, int] = (28, 28, 1),
    classes: int = 10,
    seed: int = 0,
    filters: tuple[int, int] = (16, 32),
    dense: tuple[int, int] = (128, 64),
    kernel: int = 5,
) -> MaskedNetwork:
    """Two 5x5 conv blocks (relu, 2x2 max-pool) followed by three dense layers."""
    h, w, c = input_shape
    if h < 20 or w < 20:
        raise DimensionError(f"CNN5 needs inputs of at least 20x20, got {h}x{w}")
    if h % 4 or w % 4:
        raise DimensionError(f"CNN5 pools twice; spatial extents must be divisible by 4, got {h}x{w}")
    if classes < 2:
        raise DimensionError("need at least two classes")
    rng = np.random.default_rng(seed)
    layers = []
    c_in = c
    for f in filters:
        fan_in = kernel * kernel * c_in
        W = _uniform_fan_in(rng, (kernel, kernel, c_in, f), fan_in)
        layers.append(Layer("conv", MaskedParameter(W, None), MaskedParameter(np.zeros(f), None, prunable=False),
                            relu=True, pool=True, padding="same"))
        c_in = f
    d_in = (h // 4) * (w // 4) * c_in
    widths = list(dense) + [classes]
    for i, d_out in enumerate(widths):
        W = _uniform_fan_in(rng, (d_in, d_out), d_in)
        last = i == len(widths) - 1
        layers.append(Layer("dense", MaskedParameter(W, None), MaskedParameter(np.zeros(d_out), None, prunable=False),
                            relu=not last, pool=False))
        d_in = d_out
    return MaskedNetwork(layers, (h, w, c), classes)


def forward(net: MaskedNetwork, x: Tensor, weights: list[Tensor] | None = None) -> Tensor:
    """Logits as a graph node. ``weights`` optionally supplies leaf tensors
    (weight, bias per layer) so callers can differentiate with respect to them."""
    if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(net.input_shape):
        raise DimensionError(f"expected input (n, {', '.join(map(str, net.input_shape))}), got {x.shape}")
    if weights is None:
        weights = [Tensor(p.effective) for p in net.parameters()]
    h = x
    for i, layer in enumerate(net.layers):
        W, b = weights[2 * i], weights[2 * i + 1]
        if layer.kind == "conv":
            h = conv2d(h, W, b, padding=layer.padding)
        else:
            if h.data.ndim != 2:
                h = flatten(h)
            h = affine(h, W, b)
        if layer.relu:
            h = relu(h)
        if layer.pool:
            h = maxpool2(h)
    return h


def logits(net: MaskedNetwork, x) -> np.ndarray:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return forward(net, x).data


def predict(net: MaskedNetwork, x, batch_size: int = 512) -> np.ndarray:
    """Class indices; ties resolve to the lowest index."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = [logits(net, x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def accuracy(net: MaskedNetwork, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(net, images) == labels))


def sparsity(net: MaskedNetwork) -> SparsityStat:
    per_layer = []
    for layer in net.layers:
        p = layer.weight
        if p.prunable:
            per_layer.append((int(p.mask.size), int(np.count_nonzero(p.mask))))
    total = sum(t for t, _ in per_layer)
    nonzero = sum(nz for _, nz in per_layer)
    return SparsityStat(total, nonzero, tuple(per_layer))


def _write_block(buf: io.BytesIO, p: MaskedParameter) -> None:
    buf.write(struct.pack("<BB", int(p.prunable), p.values.ndim))
    buf.write(struct.pack(f"<{p.values.ndim}I", *p.values.shape))
    buf.write(p.values.astype("<f8").tobytes())
    buf.write(np.packbits(p.mask.ravel() != 0, bitorder="little").tobytes())


def to_bytes(net: MaskedNetwork) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIIIII", VERSION, *net.input_shape, net.class_count, len(net.layers)))
    for layer in net.layers:
        flags = int(layer.relu) | (int(layer.pool) << 1) | (int(layer.padding == "same") << 2)
        buf.write(struct.pack("<BB", _KIND_TAGS[layer.kind], flags))
        _write_block(buf, layer.weight)
        _write_block(buf, layer.bias)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_block(r: _Reader) -> MaskedParameter:
    prunable, ndim = r.unpack("<BB")
    shape = r.unpack(f"<{ndim}I")
    size = int(np.prod(shape)) if ndim else 1
    values = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    bits = np.frombuffer(r.take((size + 7) // 8), dtype=np.uint8)
    mask = np.unpackbits(bits, count=size, bitorder="little").astype(np.float64).reshape(shape)
    return MaskedParameter(values, mask, bool(prunable))


def from_bytes(data: bytes) -> MaskedNetwork:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    version, h, w, c, classes, n_layers = r.unpack("<IIIIII")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        tag, flags = r.unpack("<BB")
        if tag not in _TAG_KINDS:
            raise FormatError(f"unknown layer tag {tag}")
        weight = _read_block(r)
        bias = _read_block(r)
        layers.append(Layer(_TAG_KINDS[tag], weight, bias, relu=bool(flags & 1), pool=bool(flags & 2),
                            padding="same" if flags & 4 else "valid"))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last layer")
    return MaskedNetwork(layers, (h, w, c), classes)


def save_checkpoint(net: MaskedNetwork, path) -> None:
    Path(path).write_bytes(to_bytes(net))


def load_checkpoint(path) -> MaskedNetwork:
    return from_bytes(Path(path).read_bytes())
