"""Compressed layers, the NNC container and size accounting.

A layer is stored in one of four ways: raw (no compression), quantized
(codebook + packed indices), pruned (bitmap + raw survivors) or pruned and
quantized (bitmap + codebook + packed survivor indices).

NNC layout (little-endian)::

    "NNC1" | u32 layer count | per layer:
        u16 name length, UTF-8 name
        u8 method (0 none, 1 quant, 2 prune, 3 prune+quant)
        u8 ndims, ndims x u32 shape
        [quant]  u8 bits, u16 centroid count, f32 centroids
        [prune]  ceil(n/8) mask bytes, LSB-first, 1 = kept
        payload: packed indices of survivors (quant), f32 survivors
                 (prune only) or f32 weights (none)
        u32 bias count, f32 biases
"""

from __future__ import annotations

import enum
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from .errors import (
    CompressionError,
    CorruptStream,
    IndexTooWide,
    InvariantViolation,
    OutOfRange,
    ShapeMismatch,
    UnknownLayer,
)
from .model_store import (
    FLOAT_BYTES,
    MIB,
    LayerKind,
    LayerShape,
    LayerSpec,
    Model,
    Reader,
    check_magic,
    kind_for_ndims,
    write_name,
    write_shape,
)
from .pruner import expected_kept, prune_layer
from .quantizer import MAX_BITS, Codebook, assign, fit_codebook

NNC_MAGIC = b"NNC1"
FULL_BITS = 32


# -- bit packing ---------------------------------------------------------------


def pack_indices(indices, bits: int) -> bytes:
    """Concatenate ``bits``-wide indices LSB-first; the last byte is zero-padded."""
    if not 1 <= bits <= MAX_BITS:
        raise OutOfRange(f"bit width {bits} outside [1, {MAX_BITS}]")
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        return b""
    if idx.min() < 0 or idx.max() >= 2**bits:
        bad = int(idx[(idx < 0) | (idx >= 2**bits)][0])
        raise IndexTooWide(f"index {bad} does not fit in {bits} bits")
    shifts = np.arange(bits, dtype=np.uint64)
    bit_matrix = ((idx.astype(np.uint64)[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bit_matrix.ravel(), bitorder="little").tobytes()


def unpack_indices(data: bytes, bits: int, count: int) -> np.ndarray:
    if not 1 <= bits <= MAX_BITS:
        raise OutOfRange(f"bit width {bits} outside [1, {MAX_BITS}]")
    need = packed_size(count, bits)
    if len(data) != need:
        raise CorruptStream(f"{count} indices of {bits} bits need {need} bytes, got {len(data)}")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if flat[count * bits :].any():
        raise CorruptStream("non-zero padding bits after the last index")
    bit_matrix = flat[: count * bits].reshape(count, bits).astype(np.uint64)
    values = (bit_matrix << np.arange(bits, dtype=np.uint64)).sum(axis=1)
    return values.astype(np.int64)


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def pack_mask(mask) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool).ravel(), bitorder="little").tobytes()


def unpack_mask(data: bytes, n: int) -> np.ndarray:
    if len(data) != (n + 7) // 8:
        raise CorruptStream(f"mask for {n} weights needs {(n + 7) // 8} bytes, got {len(data)}")
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if flat[n:].any():
        raise CorruptStream("non-zero padding bits after the pruning mask")
    return flat[:n].astype(bool)


# -- plans ---------------------------------------------------------------------


class Order(enum.Enum):
    PRUNE_THEN_QUANTIZE = "prune-then-quantize"
    QUANTIZE_THEN_PRUNE = "quantize-then-prune"


class Method(enum.IntEnum):
    NONE = 0
    QUANT = 1
    PRUNE = 2
    PRUNE_QUANT = 3

    @property
    def quantized(self) -> bool:
        return self in (Method.QUANT, Method.PRUNE_QUANT)

    @property
    def pruned(self) -> bool:
        return self in (Method.PRUNE, Method.PRUNE_QUANT)


@dataclass(frozen=True)
class LayerPlan:
    """How to compress one layer.

    ``prune_factor`` f keeps about 1/f of the weights; plans read from JSON
    may give ``keep_fraction`` instead, which is converted to 1/keep.
    """

    quant_bits: Optional[int] = None
    prune_factor: Optional[float] = None
    order: Order = Order.PRUNE_THEN_QUANTIZE

    def __post_init__(self):
        if self.quant_bits is None and self.prune_factor is None:
            raise InvariantViolation("a layer plan needs quant_bits, prune_factor or both")
        if self.quant_bits is not None:
            if isinstance(self.quant_bits, bool) or int(self.quant_bits) != self.quant_bits:
                raise OutOfRange(f"quant_bits must be an integer, got {self.quant_bits!r}")
            if not 1 <= self.quant_bits <= MAX_BITS:
                raise OutOfRange(f"quant_bits {self.quant_bits} outside [1, {MAX_BITS}]")
            object.__setattr__(self, "quant_bits", int(self.quant_bits))
        if self.prune_factor is not None:
            if not self.prune_factor >= 1:
                raise OutOfRange(f"prune_factor must be >= 1, got {self.prune_factor!r}")
            object.__setattr__(self, "prune_factor", float(self.prune_factor))
        object.__setattr__(self, "order", Order(self.order))

    @property
    def method(self) -> Method:
        if self.quant_bits is not None and self.prune_factor is not None:
            return Method.PRUNE_QUANT
        return Method.QUANT if self.quant_bits is not None else Method.PRUNE

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerPlan":
        unknown = set(d) - {"bits", "prune_factor", "keep_fraction", "order"}
        if unknown:
            raise InvariantViolation(f"unknown plan keys {sorted(unknown)}")
        factor = d.get("prune_factor")
        if "keep_fraction" in d:
            if factor is not None:
                raise InvariantViolation("give prune_factor or keep_fraction, not both")
            keep = float(d["keep_fraction"])
            if not 0 < keep <= 1:
                raise OutOfRange(f"keep_fraction must be in (0, 1], got {keep}")
            factor = 1.0 / keep
        return cls(d.get("bits"), factor, Order(d.get("order", Order.PRUNE_THEN_QUANTIZE.value)))

    def to_dict(self) -> dict:
        out = {}
        if self.quant_bits is not None:
            out["bits"] = self.quant_bits
        if self.prune_factor is not None:
            out["prune_factor"] = self.prune_factor
        if self.method is Method.PRUNE_QUANT:
            out["order"] = self.order.value
        return out


class CompressionPlan(dict):
    """Mapping of layer name to :class:`LayerPlan`; absent layers stay raw."""

    @classmethod
    def from_json(cls, text: str) -> "CompressionPlan":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvariantViolation(f"plan is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise InvariantViolation("plan must be a JSON object mapping layer names to settings")
        plan = cls()
        for name, entry in raw.items():
            if not isinstance(entry, dict):
                raise InvariantViolation(f"plan entry for {name!r} must be an object")
            try:
                plan[name] = LayerPlan.from_dict(entry)
            except CompressionError as exc:
                raise type(exc)(f"layer {name!r}: {exc}") from exc
        return plan

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CompressionPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def to_json(self) -> str:
        return json.dumps({name: lp.to_dict() for name, lp in self.items()}, indent=2)

    def check_layers(self, names: Iterable[str]) -> None:
        known = set(names)
        for name in self:
            if name not in known:
                raise UnknownLayer(f"plan names layer {name!r}, which is not in the model")


# -- compressed layers ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CompressedLayer:
    method: Method
    shape: tuple[int, ...]
    codebook: Optional[Codebook] = None
    mask: Optional[np.ndarray] = None
    packed_indices: bytes = b""
    raw: Optional[np.ndarray] = None
    name: str = ""
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))

    def __post_init__(self):
        method = Method(self.method)
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "method", method)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "packed_indices", bytes(self.packed_indices))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float32).ravel())
        if self.mask is not None:
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool).ravel())
        if self.raw is not None:
            object.__setattr__(self, "raw", np.asarray(self.raw, dtype=np.float32).ravel())
        self.validate()

    @property
    def n_weights(self) -> int:
        return math.prod(self.shape)

    @property
    def n_kept(self) -> int:
        return int(self.mask.sum()) if self.method.pruned else self.n_weights

    @property
    def kind(self) -> LayerKind:
        return kind_for_ndims(len(self.shape))

    def indices(self) -> np.ndarray:
        return unpack_indices(self.packed_indices, self.codebook.bits, self.n_kept)

    def validate(self) -> None:
        m = self.method
        if m.pruned:
            if self.mask is None or self.mask.size != self.n_weights:
                raise CorruptStream(f"layer {self.name!r}: mask must hold one bit per weight")
        elif self.mask is not None:
            raise CorruptStream(f"layer {self.name!r}: unpruned layer carries a mask")
        if m.quantized:
            if self.codebook is None:
                raise CorruptStream(f"layer {self.name!r}: quantized layer without a codebook")
            if len(self.packed_indices) != packed_size(self.n_kept, self.codebook.bits):
                raise CorruptStream(f"layer {self.name!r}: packed index stream has the wrong length")
            if self.raw is not None:
                raise CorruptStream(f"layer {self.name!r}: quantized layer carries raw values")
        else:
            if self.codebook is not None or self.packed_indices:
                raise CorruptStream(f"layer {self.name!r}: unquantized layer carries a codebook")
            if self.raw is None or self.raw.size != self.n_kept:
                raise CorruptStream(f"layer {self.name!r}: expected {self.n_kept} raw values")

    def __eq__(self, other):
        if not isinstance(other, CompressedLayer):
            return NotImplemented

        def key(c):
            return (
                c.method,
                c.shape,
                c.name,
                None if c.codebook is None else (c.codebook.bits, c.codebook.centroids.tobytes()),
                None if c.mask is None else c.mask.tobytes(),
                c.packed_indices,
                None if c.raw is None else c.raw.tobytes(),
                c.bias.tobytes(),
            )

        return key(self) == key(other)

    __hash__ = None


def compress_layer(weights, plan: Optional[LayerPlan], seed: int = 0, *, name: str = "", bias=()) -> CompressedLayer:
    """Compress one weight tensor according to ``plan`` (None keeps it raw).

    Prune-then-quantize fits the codebook on the surviving weights only.
    Quantize-then-prune fits it on all weights and prunes by the
    magnitude of the reconstructed values.
    """
    w = np.asarray(weights, dtype=np.float32)
    flat = w.ravel()
    common = dict(shape=w.shape, name=name, bias=np.asarray(bias, dtype=np.float32))
    if plan is None:
        return CompressedLayer(Method.NONE, raw=flat.copy(), **common)

    method = plan.method
    if method is Method.PRUNE:
        pr = prune_layer(w, plan.prune_factor)
        return CompressedLayer(method, mask=pr.mask, raw=pr.kept_values, **common)

    if method is Method.QUANT:
        codebook = fit_codebook(flat, plan.quant_bits, seed)
        idx = assign(flat, codebook.centroids)
        return CompressedLayer(method, codebook=codebook, packed_indices=pack_indices(idx, codebook.bits), **common)

    if plan.order is Order.PRUNE_THEN_QUANTIZE:
        pr = prune_layer(w, plan.prune_factor)
        mask = pr.mask
        codebook = fit_codebook(pr.kept_values, plan.quant_bits, seed)
        idx = assign(pr.kept_values, codebook.centroids)
    else:
        codebook = fit_codebook(flat, plan.quant_bits, seed)
        all_idx = assign(flat, codebook.centroids)
        mask = prune_layer(codebook.centroids[all_idx], plan.prune_factor).mask
        idx = all_idx[mask]
    return CompressedLayer(
        method, codebook=codebook, mask=mask, packed_indices=pack_indices(idx, codebook.bits), **common
    )


def decompress_layer(c: CompressedLayer, shape=None) -> np.ndarray:
    if shape is not None and tuple(shape) != c.shape:
        raise ShapeMismatch(f"layer {c.name!r}: stored shape {c.shape}, requested {tuple(shape)}")
    c.validate()
    if c.method.quantized:
        idx = c.indices()
        if idx.size and idx.max() >= len(c.codebook):
            raise CorruptStream(f"layer {c.name!r}: index {int(idx.max())} outside codebook of {len(c.codebook)}")
        values = c.codebook.centroids[idx]
    else:
        values = c.raw
    if not c.method.pruned:
        return values.astype(np.float32).reshape(c.shape)
    out = np.zeros(c.n_weights, dtype=np.float32)
    out[c.mask] = values
    return out.reshape(c.shape)


@dataclass(frozen=True)
class CompressedModel:
    layers: tuple[CompressedLayer, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, name: str) -> CompressedLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


def compress_model(model: Model, plan: Mapping[str, LayerPlan], seed: int = 0, workers: int = 1) -> CompressedModel:
    """Compress every layer of ``model``; layers are independent, so ``workers``
    only changes wall time, never the result."""
    CompressionPlan.check_layers(plan, model.names)

    def one(layer: LayerSpec) -> CompressedLayer:
        return compress_layer(layer.weights, plan.get(layer.name), seed, name=layer.name, bias=layer.bias)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            layers = list(pool.map(one, model.layers))
    else:
        layers = [one(layer) for layer in model.layers]
    return CompressedModel(tuple(layers))


def decompress_model(cm: CompressedModel) -> Model:
    return Model(tuple(LayerSpec(c.name, c.kind, decompress_layer(c), c.bias) for c in cm.layers))


# -- NNC container ---------------------------------------------------------------


def write_compressed(cm: CompressedModel) -> bytes:
    buf = bytearray(NNC_MAGIC)
    buf += struct.pack("<I", len(cm.layers))
    for c in cm.layers:
        c.validate()
        write_name(buf, c.name)
        buf += struct.pack("<B", int(c.method))
        write_shape(buf, c.shape)
        if c.method.quantized:
            if len(c.codebook) > 0xFFFF:
                raise InvariantViolation(
                    f"layer {c.name!r}: {len(c.codebook)} centroids exceed the container's u16 count"
                )
            buf += struct.pack("<BH", c.codebook.bits, len(c.codebook))
            buf += c.codebook.centroids.astype("<f4").tobytes()
        if c.method.pruned:
            buf += pack_mask(c.mask)
        if c.method.quantized:
            buf += c.packed_indices
        else:
            buf += c.raw.astype("<f4").tobytes()
        buf += struct.pack("<I", c.bias.size)
        buf += c.bias.astype("<f4").tobytes()
    return bytes(buf)


def read_compressed(data: bytes) -> CompressedModel:
    reader = Reader(data)
    check_magic(reader, NNC_MAGIC)
    count = reader.u32()
    layers = []
    for index in range(count):
        reader.context = f"layer #{index}"
        name = reader.name()
        reader.context = f"layer {name!r}"
        code = reader.u8()
        if code not in Method._value2member_map_:
            raise CorruptStream(f"layer {name!r}: unknown method code {code} at offset {reader.pos - 1}")
        method = Method(code)
        shape = reader.shape()
        try:
            kind_for_ndims(len(shape))
        except InvariantViolation as exc:
            raise CorruptStream(f"layer {name!r}: {exc}") from exc
        n = math.prod(shape)
        codebook = mask = raw = None
        packed = b""
        try:
            if method.quantized:
                bits, ncent = reader.unpack("<BH")
                codebook = Codebook(reader.f32_array(ncent), bits)
            if method.pruned:
                mask = unpack_mask(bytes(reader.take((n + 7) // 8)), n)
            kept = int(mask.sum()) if mask is not None else n
            if method.quantized:
                packed = bytes(reader.take(packed_size(kept, codebook.bits)))
                idx = unpack_indices(packed, codebook.bits, kept)
                if idx.size and idx.max() >= len(codebook):
                    raise CorruptStream(f"index {int(idx.max())} outside codebook of {len(codebook)}")
            else:
                raw = reader.f32_array(kept)
                if not np.all(np.isfinite(raw)):
                    raise CorruptStream("non-finite weight")
            bias = reader.f32_array(reader.u32())
        except CorruptStream:
            raise
        except CompressionError as exc:
            raise CorruptStream(f"layer {name!r}: {exc}") from exc
        layers.append(CompressedLayer(method, shape, codebook, mask, packed, raw, name, bias))
    reader.expect_end()
    return CompressedModel(tuple(layers))


def save_compressed(cm: CompressedModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(write_compressed(cm))


def load_compressed(path: Union[str, Path]) -> CompressedModel:
    return read_compressed(Path(path).read_bytes())


# -- size accounting ---------------------------------------------------------------


@dataclass(frozen=True)
class LayerSize:
    """Storage of one layer in bytes.

    ``payload_bytes`` counts the packed indices (or raw survivors) only;
    codebook and pruning map are kept apart so that the nominal factor
    follows the usual bits-per-weight convention.
    """

    name: str
    n_weights: int
    n_kept: int
    original_bytes: int
    payload_bytes: int
    codebook_bytes: int = 0
    map_bytes: int = 0
    bias_bytes: int = 0

    @property
    def cf_nominal(self) -> float:
        return self.original_bytes / self.payload_bytes if self.payload_bytes else math.inf

    @property
    def cf_effective(self) -> float:
        stored = self.payload_bytes + self.map_bytes + self.codebook_bytes
        return self.original_bytes / stored if stored else math.inf

    @property
    def original_mib(self) -> float:
        return self.original_bytes / MIB

    @property
    def payload_mib(self) -> float:
        return self.payload_bytes / MIB

    @property
    def stored_original_mib(self) -> float:
        """Uncompressed weights plus fp32 biases."""
        return (self.original_bytes + self.bias_bytes) / MIB

    @property
    def stored_compressed_mib(self) -> float:
        """Payload plus codebook plus the (always uncompressed) biases, no map."""
        return (self.payload_bytes + self.codebook_bytes + self.bias_bytes) / MIB


_SUMMED = ("n_weights", "n_kept", "original_bytes", "payload_bytes", "codebook_bytes", "map_bytes", "bias_bytes")


@dataclass(frozen=True)
class SizeReport:
    layers: tuple[LayerSize, ...]

    def __getitem__(self, name: str) -> LayerSize:
        for row in self.layers:
            if row.name == name:
                return row
        raise KeyError(name)

    def subtotal(self, names: Optional[Iterable[str]] = None, label: str = "total") -> LayerSize:
        rows = self.layers if names is None else [self[n] for n in names]
        return LayerSize(label, **{f: sum(getattr(r, f) for r in rows) for f in _SUMMED})

    @property
    def total(self) -> LayerSize:
        return self.subtotal()

    def format_table(self) -> str:
        header = f"{'layer':<12}{'orig MiB':>11}{'+bias MiB':>11}{'payload MiB':>13}{'map MiB':>10}{'cf_nom':>10}{'cf_eff':>10}"
        lines = [header, "-" * len(header)]
        for row in (*self.layers, self.total):
            lines.append(
                f"{row.name:<12}{row.original_mib:>11.4f}{row.stored_original_mib:>11.4f}{row.payload_mib:>13.4f}"
                f"{row.map_bytes / MIB:>10.4f}{row.cf_nominal:>10.2f}{row.cf_effective:>10.2f}"
            )
        return "\n".join(lines)


def _codebook_bytes(count: int) -> int:
    # u8 bits + u16 count + f32 centroids
    return 3 + FLOAT_BYTES * count


def _layer_size(name, n, n_kept, bits, n_centroids, pruned, bias_count) -> LayerSize:
    payload = packed_size(n_kept, bits) if bits is not None else n_kept * FLOAT_BYTES
    return LayerSize(
        name,
        n,
        n_kept,
        n * FLOAT_BYTES,
        payload,
        _codebook_bytes(n_centroids) if bits is not None else 0,
        (n + 7) // 8 if pruned else 0,
        bias_count * FLOAT_BYTES,
    )


def size_report(shapes: Iterable[Union[LayerShape, LayerSpec]], plan: Mapping[str, LayerPlan]) -> SizeReport:
    """Storage accounting of a plan from layer shapes alone.

    Survivor counts are those ``prune_layer`` produces on distinct
    magnitudes; codebooks are assumed full (min(2**bits, survivors)).
    """
    headers = [s.header() if isinstance(s, LayerSpec) else s for s in shapes]
    CompressionPlan.check_layers(plan, [h.name for h in headers])
    rows = []
    for h in headers:
        n = h.n_weights
        lp = plan.get(h.name)
        if lp is None:
            rows.append(_layer_size(h.name, n, n, None, 0, False, h.bias_count))
            continue
        pruned = lp.prune_factor is not None
        kept = expected_kept(n, lp.prune_factor) if pruned else n
        bits = lp.quant_bits
        fitted = n if lp.order is Order.QUANTIZE_THEN_PRUNE else kept
        ncent = min(2**bits, fitted) if bits is not None else 0
        rows.append(_layer_size(h.name, n, kept, bits, ncent, pruned, h.bias_count))
    return SizeReport(tuple(rows))


def measure(cm: CompressedModel) -> SizeReport:
    """Storage accounting of an actual compressed model; matches its NNC file."""
    rows = []
    for c in cm.layers:
        bits = c.codebook.bits if c.method.quantized else None
        ncent = len(c.codebook) if c.method.quantized else 0
        rows.append(_layer_size(c.name, c.n_weights, c.n_kept, bits, ncent, c.method.pruned, c.bias.size))
    return SizeReport(tuple(rows))
