import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from nncompress.codec import (
    CompressedLayer,
    CompressedModel,
    CompressionPlan,
    LayerPlan,
    Method,
    Order,
    compress_layer,
    compress_model,
    decompress_layer,
    decompress_model,
    measure,
    pack_indices,
    pack_mask,
    packed_size,
    read_compressed,
    size_report,
    unpack_indices,
    unpack_mask,
    write_compressed,
)
from nncompress.errors import (
    BadMagic,
    CorruptStream,
    IndexTooWide,
    InvariantViolation,
    OutOfRange,
    ShapeMismatch,
    UnknownLayer,
)
from nncompress.model_store import LayerKind, LayerShape, random_model
from nncompress.quantizer import Codebook

from helpers import reference


def bits_of(data: bytes) -> str:
    """Bits in stream order: byte 0 bit 0 first."""
    return "".join(str((b >> i) & 1) for b in data for i in range(8))


# -- packing ---------------------------------------------------------------------


def test_pack_examples():
    assert pack_indices([1, 0, 1, 1], 1) == bytes([0b00001101])
    assert pack_indices([5, 2], 3) == bytes([0b00010101])
    for bits in (1, 7, 32):
        assert pack_indices([], bits) == b""


def test_pack_too_wide():
    with pytest.raises(IndexTooWide):
        pack_indices([4], 2)
    with pytest.raises(IndexTooWide):
        pack_indices([-1], 3)
    with pytest.raises(OutOfRange):
        pack_indices([0], 33)


def test_unpack_checks_length_and_padding():
    with pytest.raises(CorruptStream):
        unpack_indices(b"\x00\x00", 3, 2)
    with pytest.raises(CorruptStream):
        unpack_indices(bytes([0b11000000]), 3, 2)
    with pytest.raises(CorruptStream):
        unpack_mask(bytes([0xFF]), 5)


@given(st.integers(1, 32), st.data())
def test_pack_unpack_identity(bits, data):
    n = data.draw(st.integers(0, 300))
    idx = data.draw(hnp.arrays(np.int64, n, elements=st.integers(0, 2**bits - 1)))
    packed = pack_indices(idx, bits)
    assert len(packed) == packed_size(n, bits)
    np.testing.assert_array_equal(unpack_indices(packed, bits, n), idx)


@given(hnp.arrays(bool, st.integers(0, 100)))
def test_mask_identity(mask):
    data = pack_mask(mask)
    assert len(data) == (mask.size + 7) // 8
    np.testing.assert_array_equal(unpack_mask(data, mask.size), mask)


def test_pack_matches_bit_placement_oracle():
    rng = np.random.default_rng(4)
    for bits in range(1, 33):
        idx = rng.integers(0, 2**bits, 17, dtype=np.uint64)
        expected = "".join(format(int(i), f"0{bits}b")[::-1] for i in idx)
        got = bits_of(pack_indices(idx.astype(np.int64), bits))
        assert got[: len(expected)] == expected
        assert set(got[len(expected) :]) <= {"0"}


# -- layer compression -------------------------------------------------------------


def test_quant_only_example():
    c = compress_layer([-1, -1, 1, 1], LayerPlan(1))
    assert c.codebook.centroids.tolist() == [-1.0, 1.0]
    assert c.mask is None
    # indices [0, 0, 1, 1] in stream order
    assert bits_of(c.packed_indices)[:4] == "0011"
    assert c.packed_indices == bytes([0b00001100])


def test_prune_only_example():
    c = compress_layer([0.1, 0.2, 0.3, 0.4], LayerPlan(None, 2))
    assert c.mask.tolist() == [False, True, True, True]
    assert bits_of(pack_mask(c.mask))[:4] == "0111"
    np.testing.assert_array_equal(c.raw, np.float32([0.2, 0.3, 0.4]))
    np.testing.assert_array_equal(decompress_layer(c), np.float32([0, 0.2, 0.3, 0.4]))


def test_prune_then_quantize_nine():
    w = np.random.default_rng(1).normal(size=9)
    c = compress_layer(w, LayerPlan(1, 3))
    assert 3 <= c.n_kept <= 4
    assert len(c.codebook) <= 2


def test_constant_round_trip():
    w = np.full((3, 4), 0.25, np.float32)
    np.testing.assert_array_equal(decompress_layer(compress_layer(w, LayerPlan(2))), w)


def test_all_pruned_layer_decodes_to_zeros():
    c = CompressedLayer(Method.PRUNE, (2, 3), mask=np.zeros(6, bool), raw=np.zeros(0))
    np.testing.assert_array_equal(decompress_layer(c), np.zeros((2, 3)))
    c = CompressedLayer(Method.PRUNE_QUANT, (2, 3), codebook=Codebook([], 1), mask=np.zeros(6, bool))
    np.testing.assert_array_equal(decompress_layer(c), np.zeros((2, 3)))
    assert read_compressed(write_compressed(CompressedModel((c,)))).layers[0] == c


def test_shape_mismatch():
    c = compress_layer(np.ones((2, 2)), None)
    with pytest.raises(ShapeMismatch):
        decompress_layer(c, (4,))


def test_inconsistent_layers_rejected():
    with pytest.raises(CorruptStream):
        CompressedLayer(Method.PRUNE, (4,), mask=np.ones(3, bool), raw=np.ones(3))
    with pytest.raises(CorruptStream):
        CompressedLayer(Method.QUANT, (4,), codebook=Codebook([0.0, 1.0], 1), packed_indices=b"\0\0")


def test_bits_32_is_lossless():
    w = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    np.testing.assert_array_equal(decompress_layer(compress_layer(w, LayerPlan(32))), w)


finite = st.floats(-50, 50, width=32, allow_nan=False)


@st.composite
def plans(draw):
    kind = draw(st.sampled_from(["none", "q", "p", "pq", "qp"]))
    if kind == "none":
        return None
    bits = draw(st.integers(1, 6))
    factor = draw(st.sampled_from([1.0, 1.5, 2.0, 3.0, 4.0, 102 / 32, 10.0]))
    if kind == "q":
        return LayerPlan(bits)
    if kind == "p":
        return LayerPlan(None, factor)
    order = Order.PRUNE_THEN_QUANTIZE if kind == "pq" else Order.QUANTIZE_THEN_PRUNE
    return LayerPlan(bits, factor, order)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12), elements=finite), plans(), st.integers(0, 99))
def test_round_trip_equals_direct_composition(w, plan, seed):
    c = compress_layer(w, plan, seed)
    out = decompress_layer(c)
    assert out.tobytes() == reference(w, plan, seed).tobytes()
    again = read_compressed(write_compressed(CompressedModel((c,)))).layers[0]
    assert again == c
    assert decompress_layer(again).tobytes() == out.tobytes()


def test_order_matters_and_both_orders_work():
    w = np.random.default_rng(2).normal(size=200).astype(np.float32)
    ptq = compress_layer(w, LayerPlan(1, 4, Order.PRUNE_THEN_QUANTIZE))
    qtp = compress_layer(w, LayerPlan(1, 4, Order.QUANTIZE_THEN_PRUNE))
    # fitting on survivors only puts both centroids far from zero
    assert np.all(np.abs(ptq.codebook.centroids) > np.abs(qtp.codebook.centroids))


# -- models and container ------------------------------------------------------------


def small_model(seed=0):
    shapes = [
        LayerShape("c1", LayerKind.CONV, (4, 2, 3, 3), 4),
        LayerShape("f1", LayerKind.FC, (10, 20), 10),
        LayerShape("f2", LayerKind.FC, (3, 10), 0),
    ]
    return random_model(shapes, seed)


MIXED = CompressionPlan(
    {"c1": LayerPlan(3), "f1": LayerPlan(2, 4), "f2": LayerPlan(None, 2)}
)


def test_empty_container():
    assert write_compressed(CompressedModel(())) == b"NNC1" + struct.pack("<I", 0)
    assert len(read_compressed(b"NNC1" + struct.pack("<I", 0))) == 0


def test_container_round_trip_and_size():
    m = small_model()
    cm = compress_model(m, MIXED, seed=3)
    data = write_compressed(cm)
    back = read_compressed(data)
    assert all(a == b for a, b in zip(back, cm)) and len(back) == len(cm)
    assert write_compressed(back) == data
    # size accounting agrees with the bytes actually written
    rep = measure(cm)
    overhead = 8 + sum(2 + len(c.name) + 1 + 1 + 4 * len(c.shape) + 4 for c in cm)
    counted = sum(r.payload_bytes + r.codebook_bytes + r.map_bytes + r.bias_bytes for r in rep.layers)
    assert len(data) == overhead + counted


def test_decompressed_model_keeps_biases():
    m = small_model()
    back = decompress_model(compress_model(m, MIXED))
    for a, b in zip(m, back):
        assert a.bias.tobytes() == b.bias.tobytes()
        assert a.kind == b.kind


def test_concurrent_matches_sequential():
    m = small_model(5)
    a = write_compressed(compress_model(m, MIXED, seed=1, workers=1))
    b = write_compressed(compress_model(m, MIXED, seed=1, workers=4))
    assert a == b


def test_container_corruption():
    data = write_compressed(compress_model(small_model(), MIXED))
    with pytest.raises(BadMagic):
        read_compressed(b"NNW1" + data[4:])
    for cut in (5, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptStream):
            read_compressed(data[:cut])
    with pytest.raises(CorruptStream):
        read_compressed(data + b"\0")
    # method byte of the first layer: after magic, count and the name block
    pos = 8 + 2 + len("c1")
    bad = bytearray(data)
    bad[pos] = 9
    with pytest.raises(CorruptStream):
        read_compressed(bytes(bad))


def test_index_beyond_codebook_is_corrupt():
    # 2 centroids at 2 bits leaves index 3 representable but invalid
    c = CompressedLayer(Method.QUANT, (1, 2), codebook=Codebook([0.0, 1.0], 2), packed_indices=pack_indices([0, 1], 2))
    data = bytearray(write_compressed(CompressedModel((c,))))
    i = data.index(pack_indices([0, 1], 2), 8 + 2 + 0 + 1 + 1 + 8 + 3 + 8)
    data[i] = pack_indices([3, 1], 2)[0]
    with pytest.raises(CorruptStream):
        read_compressed(bytes(data))


def test_too_many_centroids_for_container():
    w = np.arange(70_000, dtype=np.float32).reshape(70, 1000)
    c = compress_layer(w, LayerPlan(17))
    assert len(c.codebook) == 70_000
    with pytest.raises(InvariantViolation):
        write_compressed(CompressedModel((c,)))


# -- plans ---------------------------------------------------------------------------


def test_plan_json():
    plan = CompressionPlan.from_json(
        '{"fc6": {"bits": 1, "keep_fraction": 0.3137254901960784}, "conv3": {"bits": 8, "prune_factor": 2}}'
    )
    assert plan["fc6"].prune_factor == pytest.approx(102 / 32)
    assert plan["conv3"].order is Order.PRUNE_THEN_QUANTIZE
    assert CompressionPlan.from_json(plan.to_json()) == plan
    with pytest.raises(InvariantViolation):
        CompressionPlan.from_json('{"fc6": {"bitz": 1}}')
    with pytest.raises(InvariantViolation):
        CompressionPlan.from_json("[1]")
    with pytest.raises(OutOfRange):
        CompressionPlan.from_json('{"fc6": {"bits": 0}}')
    with pytest.raises(InvariantViolation):
        LayerPlan()


def test_unknown_layer():
    with pytest.raises(UnknownLayer):
        compress_model(small_model(), {"nope": LayerPlan(2)})
    with pytest.raises(UnknownLayer):
        size_report(small_model().headers(), {"nope": LayerPlan(2)})


# -- size accounting -------------------------------------------------------------


def test_cf_formulas():
    shape = [LayerShape("a", LayerKind.FC, (64, 64))]
    n = 64 * 64
    for bits in range(1, 33):
        assert size_report(shape, {"a": LayerPlan(bits)})["a"].cf_nominal == 32 / bits
    for f in (2, 4, 8, 16):
        row = size_report(shape, {"a": LayerPlan(None, f)})["a"]
        assert row.cf_nominal == pytest.approx(n / row.n_kept)
    # byte-aligned payload: the formula is exact
    row = size_report(shape, {"a": LayerPlan(8, 4)})["a"]
    assert row.cf_nominal == pytest.approx(32 / (row.n_kept / n * 8), rel=1e-12)
    # otherwise the last byte is padded
    row = size_report(shape, {"a": LayerPlan(2, 4)})["a"]
    assert row.payload_bytes == math.ceil(row.n_kept * 2 / 8)


@given(st.dictionaries(st.sampled_from(["c1", "f1", "f2"]), plans().filter(lambda p: p is not None)))
def test_report_totals_and_cf_order(plan):
    rep = size_report(small_model().headers(), plan)
    tot = rep.total
    for f in ("original_bytes", "payload_bytes", "map_bytes", "codebook_bytes", "n_weights", "n_kept"):
        assert getattr(tot, f) == sum(getattr(r, f) for r in rep.layers)
    for r in (*rep.layers, tot):
        assert r.cf_effective <= r.cf_nominal


def test_shape_report_matches_measured_for_distinct_weights():
    m = small_model(7)
    assert size_report(m.headers(), MIXED) == measure(compress_model(m, MIXED))


def test_identity_plan_payload_equals_weight_bytes():
    m = small_model()
    rep = measure(compress_model(m, {}))
    assert rep.total.payload_bytes == sum(layer.n_weights * 4 for layer in m)
    assert math.isclose(rep.total.cf_nominal, 1.0)
