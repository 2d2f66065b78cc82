"""Layers, models and the uncompressed NNW container.

NNW layout (little-endian)::

    "NNW1" | u32 layer count | per layer:
        u16 name length, UTF-8 name
        u8 kind (0 = conv, 1 = fc)
        u8 ndims, ndims x u32 shape
        f32 weights, row-major
        u32 bias count, f32 biases
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import BadMagic, CorruptStream, InvariantViolation, NonFiniteWeight, TruncatedFile

NNW_MAGIC = b"NNW1"
MIB = 2**20
FLOAT_BYTES = 4


class LayerKind(enum.IntEnum):
    CONV = 0
    FC = 1


_NDIMS = {LayerKind.CONV: 4, LayerKind.FC: 2}


def kind_for_ndims(ndims: int) -> LayerKind:
    for kind, nd in _NDIMS.items():
        if nd == ndims:
            return kind
    raise InvariantViolation(f"no layer kind has {ndims}-dimensional weights")


@dataclass(frozen=True)
class LayerShape:
    """Shape-only header of a layer, enough for size accounting."""

    name: str
    kind: LayerKind
    shape: tuple[int, ...]
    bias_count: int = 0

    @property
    def n_weights(self) -> int:
        return math.prod(self.shape)


def _as_f32(values, what: str, where: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float32, copy=True)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise NonFiniteWeight(f"layer {where!r}: non-finite {what} at element {bad}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """A named conv or fc layer with its weight tensor and bias vector.

    Weights are copied into a read-only float32 array; conv weights are
    (out, in, kh, kw), fc weights are (out, in).
    """

    name: str
    kind: LayerKind
    weights: np.ndarray
    bias: np.ndarray = None

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise InvariantViolation("layer name must be a non-empty string")
        kind = LayerKind(self.kind)
        weights = _as_f32(self.weights, "weight", self.name)
        bias = _as_f32([] if self.bias is None else self.bias, "bias", self.name).ravel()
        if weights.ndim != _NDIMS[kind]:
            raise InvariantViolation(
                f"layer {self.name!r}: {kind.name} weights need {_NDIMS[kind]} dims, got shape {weights.shape}"
            )
        if any(d <= 0 for d in weights.shape):
            raise InvariantViolation(f"layer {self.name!r}: zero-sized dimension in {weights.shape}")
        if bias.size not in (0, weights.shape[0]):
            raise InvariantViolation(
                f"layer {self.name!r}: bias length {bias.size} does not match {weights.shape[0]} outputs"
            )
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.weights.shape)

    @property
    def n_weights(self) -> int:
        return int(self.weights.size)

    def header(self) -> LayerShape:
        return LayerShape(self.name, self.kind, self.shape, int(self.bias.size))

    def with_weights(self, weights: np.ndarray) -> "LayerSpec":
        return LayerSpec(self.name, self.kind, np.asarray(weights).reshape(self.shape), self.bias)

    def __eq__(self, other):
        if not isinstance(other, LayerSpec):
            return NotImplemented
        return (
            self.name == other.name
            and self.kind == other.kind
            and self.shape == other.shape
            and self.weights.tobytes() == other.weights.tobytes()
            and self.bias.tobytes() == other.bias.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class Model:
    """Ordered layers in forward-pass order."""

    layers: tuple[LayerSpec, ...] = ()

    def __post_init__(self):
        layers = tuple(self.layers)
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise InvariantViolation(f"duplicate layer name {dup!r}")
        object.__setattr__(self, "layers", layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[LayerSpec]:
        return iter(self.layers)

    def __getitem__(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def headers(self) -> list[LayerShape]:
        return [layer.header() for layer in self.layers]

    def replace(self, layer: LayerSpec) -> "Model":
        return Model(tuple(layer if l.name == layer.name else l for l in self.layers))


# -- NNW encoding ------------------------------------------------------------


def write_name(buf: bytearray, name: str) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise InvariantViolation(f"layer name too long ({len(raw)} bytes)")
    buf += struct.pack("<H", len(raw))
    buf += raw


def write_shape(buf: bytearray, shape: Sequence[int]) -> None:
    buf += struct.pack("<B", len(shape))
    buf += struct.pack(f"<{len(shape)}I", *shape)


def write_model(model: Model) -> bytes:
    """Serialize ``model`` to NNW bytes. Output is deterministic."""
    if not isinstance(model, Model):
        raise InvariantViolation(f"expected Model, got {type(model).__name__}")
    buf = bytearray(NNW_MAGIC)
    buf += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        write_name(buf, layer.name)
        buf += struct.pack("<B", int(layer.kind))
        write_shape(buf, layer.shape)
        buf += layer.weights.astype("<f4").tobytes()
        buf += struct.pack("<I", layer.bias.size)
        buf += layer.bias.astype("<f4").tobytes()
    return bytes(buf)


class Reader:
    """Bounds-checked little-endian cursor over a byte buffer."""

    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0
        self.context = "header"

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedFile(
                f"{self.context}: need {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def u8(self) -> int:
        return self.unpack("<B")[0]

    def u16(self) -> int:
        return self.unpack("<H")[0]

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def f32_array(self, count: int) -> np.ndarray:
        raw = self.take(count * FLOAT_BYTES)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def name(self) -> str:
        length = self.u16()
        try:
            return bytes(self.take(length)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptStream(f"{self.context}: layer name is not UTF-8 at offset {self.pos - length}") from exc

    def shape(self) -> tuple[int, ...]:
        ndims = self.u8()
        return tuple(self.unpack(f"<{ndims}I"))

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise CorruptStream(f"{len(self.data) - self.pos} trailing bytes at offset {self.pos}")


def check_magic(reader: Reader, magic: bytes) -> None:
    got = bytes(reader.data[: len(magic)])
    if got != magic:
        raise BadMagic(f"expected magic {magic!r}, got {got!r}")
    reader.pos = len(magic)


def read_model(data: bytes) -> Model:
    """Parse NNW bytes into a :class:`Model`."""
    reader = Reader(data)
    check_magic(reader, NNW_MAGIC)
    count = reader.u32()
    layers = []
    for index in range(count):
        reader.context = f"layer #{index}"
        name = reader.name()
        reader.context = f"layer {name!r}"
        kind_code = reader.u8()
        if kind_code not in (0, 1):
            raise CorruptStream(f"layer {name!r}: unknown kind code {kind_code} at offset {reader.pos - 1}")
        shape = reader.shape()
        weights = reader.f32_array(math.prod(shape)).reshape(shape)
        bias = reader.f32_array(reader.u32())
        layers.append(LayerSpec(name, LayerKind(kind_code), weights, bias))
    reader.expect_end()
    return Model(tuple(layers))


def save_model(model: Model, path: Union[str, Path]) -> None:
    Path(path).write_bytes(write_model(model))


def load_model(path: Union[str, Path]) -> Model:
    return read_model(Path(path).read_bytes())


# -- size accounting -----------------------------------------------------------


def layer_size_mib(layer: Union[LayerSpec, LayerShape]) -> float:
    """Uncompressed weight storage of ``layer`` in MiB; biases are not counted."""
    return layer.n_weights * FLOAT_BYTES / MIB


def alexnet_reference_shapes() -> list[LayerShape]:
    """The seven compressible AlexNet layers (conv2, conv4, conv5 are grouped)."""
    return [
        LayerShape("conv1", LayerKind.CONV, (96, 3, 11, 11), 96),
        LayerShape("conv2", LayerKind.CONV, (256, 48, 5, 5), 256),
        LayerShape("conv3", LayerKind.CONV, (384, 256, 3, 3), 384),
        LayerShape("conv4", LayerKind.CONV, (384, 192, 3, 3), 384),
        LayerShape("conv5", LayerKind.CONV, (256, 192, 3, 3), 256),
        LayerShape("fc6", LayerKind.FC, (4096, 9216), 4096),
        LayerShape("fc7", LayerKind.FC, (4096, 4096), 4096),
    ]


def random_model(headers: Iterable[LayerShape], seed: int = 0) -> Model:
    """He-normal random weights and small biases for the given headers."""
    rng = np.random.default_rng(seed)
    layers = []
    for h in headers:
        fan_in = math.prod(h.shape[1:])
        w = rng.standard_normal(h.shape, dtype=np.float32) * np.float32(math.sqrt(2.0 / fan_in))
        b = rng.standard_normal(h.bias_count, dtype=np.float32) * np.float32(0.01)
        layers.append(LayerSpec(h.name, h.kind, w, b))
    return Model(tuple(layers))
