from __future__ import annotations

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantforge import gguf_io, kquant
from quantforge.core import QuantType, TensorView
from quantforge.errors import CorruptionError, FormatError, UnsupportedTypeError, ValidationError, VersionError
from quantforge.gguf_io import GgufFile, GgufTensorInfo, MetadataValue, ValueType

gguf = pytest.importorskip("gguf")

ARCH = {"general.architecture": MetadataValue.string("llama")}


def _reference_file(tmp_path, add):
    path = tmp_path / "ref.gguf"
    w = gguf.GGUFWriter(str(path), arch="llama")
    add(w)
    w.write_header_to_file()
    w.write_kv_data_to_file()
    w.write_tensors_to_file()
    w.close()
    return path


def _q4k_tensor(rng, rows=1):
    x = (rng.standard_normal(rows * 256) * 0.02).astype(np.float32)
    return x, kquant.quantize(x, QuantType.Q4_K)


def _sample_file(rng) -> GgufFile:
    x, q4 = _q4k_tensor(rng, 2)
    tensors = [
        ("emb", (2, 256), QuantType.Q4_K.ggml_type, q4),
        ("norm", (5,), QuantType.F32.ggml_type, kquant.quantize(np.arange(5.0), QuantType.F32)),
        ("q8", (3, 64), QuantType.Q8_0.ggml_type, kquant.quantize(x[:192], QuantType.Q8_0)),
    ]
    md = dict(ARCH)
    md["test.u8"] = MetadataValue(ValueType.UINT8, 200)
    md["test.f64"] = MetadataValue(ValueType.FLOAT64, -1.5)
    md["test.bool"] = MetadataValue(ValueType.BOOL, True)
    md["test.ints"] = MetadataValue.array(ValueType.INT32, [1, -2, 3])
    md["test.nested"] = MetadataValue.array(
        ValueType.ARRAY, [MetadataValue.array(ValueType.STRING, ["a", "bc"]), MetadataValue.array(ValueType.UINT16, [7])]
    )
    return gguf_io.assemble(md, tensors)


class TestWrite:
    def test_magic_and_version(self):
        data = gguf_io.gguf_bytes(gguf_io.assemble(ARCH, []))
        assert data[:8] == bytes.fromhex("4747554603000000")

    def test_minimal_file_matches_reference_writer(self, tmp_path):
        ref = _reference_file(tmp_path, lambda w: None).read_bytes()
        assert gguf_io.gguf_bytes(gguf_io.assemble(ARCH, [])) == ref

    def test_q4_k_tensor_layout_matches_reference_writer(self, tmp_path, rng):
        _, q4 = _q4k_tensor(rng)
        raw = np.frombuffer(q4, dtype=np.uint8)
        ref = _reference_file(
            tmp_path, lambda w: w.add_tensor("w", raw, raw_dtype=gguf.GGMLQuantizationType.Q4_K)
        ).read_bytes()
        ours = gguf_io.gguf_bytes(gguf_io.assemble(ARCH, [("w", (256,), 12, q4)]))
        assert ours == ref
        f = gguf_io.read_gguf(ours)
        start = len(ours) - len(f.tensor_data)
        assert start % 32 == 0
        assert bytes(f.tensor_bytes("w")) == q4 and len(f.tensor_bytes("w")) == 144
        assert ours[start + 144 :] == bytes(len(ours) - start - 144)

    def test_returns_byte_count(self, rng, tmp_path):
        f = _sample_file(rng)
        sink = io.BytesIO()
        n = gguf_io.write_gguf(f, sink)
        assert n == len(sink.getvalue())
        assert gguf_io.write_gguf(f, tmp_path / "x.gguf") == (tmp_path / "x.gguf").stat().st_size

    def test_offsets_aligned_and_padding_zero(self, rng):
        f = _sample_file(rng)
        data = gguf_io.gguf_bytes(f)
        start = len(data) - len(f.tensor_data)
        covered = np.zeros(len(f.tensor_data), dtype=bool)
        for t in f.tensors:
            assert t.offset % 32 == 0
            covered[t.offset : t.offset + t.nbytes] = True
        assert not np.frombuffer(bytes(f.tensor_data), dtype=np.uint8)[~covered].any()
        head = gguf_io._header_bytes(f.metadata, f.tensors, 3)
        assert data[len(head) : start] == bytes(start - len(head))

    def test_custom_alignment(self, rng):
        md = dict(ARCH, **{gguf_io.ALIGNMENT_KEY: MetadataValue.uint32(64)})
        _, q4 = _q4k_tensor(rng)
        f = gguf_io.assemble(md, [("a", (256,), 12, q4), ("b", (256,), 12, q4)])
        assert [t.offset for t in f.tensors] == [0, 192]
        data = gguf_io.gguf_bytes(f)
        assert (len(data) - len(f.tensor_data)) % 64 == 0
        assert gguf_io.read_gguf(data) == f

    def test_serialized_size_exact(self, rng):
        f = _sample_file(rng)
        infos = [(t.name, t.shape, t.ggml_type) for t in f.tensors]
        sizes = [t.nbytes for t in f.tensors]
        assert gguf_io.serialized_size(f.metadata, infos, sizes) == len(gguf_io.gguf_bytes(f))

    def test_inconsistent_length_writes_nothing(self, rng):
        _, q4 = _q4k_tensor(rng)
        bad = GgufFile(ARCH, (GgufTensorInfo("w", (512,), 12, 0),), q4)
        sink = io.BytesIO()
        with pytest.raises(ValidationError):
            gguf_io.write_gguf(bad, sink)
        assert sink.getvalue() == b""

    @pytest.mark.parametrize(
        "info",
        [GgufTensorInfo("w", (256,), 12, 16), GgufTensorInfo("w", (), 0, 0), GgufTensorInfo("w", (100,), 12, 0)],
    )
    def test_validation_errors(self, info):
        with pytest.raises(ValidationError):
            gguf_io.gguf_bytes(GgufFile(ARCH, (info,), bytes(4096)))

    def test_metadata_value_range_checked(self):
        with pytest.raises(ValidationError):
            MetadataValue(ValueType.UINT8, 256)
        with pytest.raises(ValidationError):
            MetadataValue(ValueType.STRING, 3)


class TestRead:
    def test_round_trip(self, rng):
        f = _sample_file(rng)
        data = gguf_io.gguf_bytes(f)
        back = gguf_io.read_gguf(data)
        assert back == f
        assert gguf_io.gguf_bytes(back) == data

    def test_from_path_and_stream(self, rng, tmp_path):
        f = _sample_file(rng)
        path = tmp_path / "f.gguf"
        gguf_io.write_gguf(f, path)
        assert gguf_io.read_gguf(path) == f
        with open(path, "rb") as fh:
            assert gguf_io.read_gguf(fh) == f

    def test_reads_reference_writer_file(self, tmp_path, rng):
        x = rng.standard_normal((2, 64)).astype(np.float32)
        q8 = gguf.quants.quantize(x, gguf.GGMLQuantizationType.Q8_0)

        def add(w):
            w.add_string("test.s", "hello")
            w.add_array("test.a", [1, 2, 3])
            w.add_tensor("a", np.arange(8, dtype=np.float32).reshape(2, 4))
            w.add_tensor("b", q8, raw_dtype=gguf.GGMLQuantizationType.Q8_0)

        path = _reference_file(tmp_path, add)
        f = gguf_io.read_gguf(path)
        ref = gguf.GGUFReader(str(path))
        assert [t.name for t in f.tensors] == [t.name for t in ref.tensors]
        assert f.metadata["test.s"].to_python() == "hello"
        assert f.metadata["test.a"].to_python() == [1, 2, 3]
        np.testing.assert_array_equal(f.read_tensor("a"), np.arange(8, dtype=np.float32).reshape(2, 4))
        np.testing.assert_array_equal(f.read_tensor("b"), gguf.quants.dequantize(q8, gguf.GGMLQuantizationType.Q8_0))

    def test_reference_reader_parses_ours(self, tmp_path, rng):
        f = _sample_file(rng)
        path = tmp_path / "f.gguf"
        gguf_io.write_gguf(f, path)
        ref = gguf.GGUFReader(str(path))
        assert [t.name for t in ref.tensors] == ["emb", "norm", "q8"]
        assert ref.fields["test.f64"].contents() == -1.5
        assert ref.fields["test.ints"].contents() == [1, -2, 3]

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            gguf_io.read_gguf(b"GGML" + bytes(20))

    def test_version(self):
        data = bytearray(gguf_io.gguf_bytes(gguf_io.assemble(ARCH, [])))
        data[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionError):
            gguf_io.read_gguf(bytes(data))

    def test_truncation_anywhere(self, rng):
        f = _sample_file(rng)
        data = gguf_io.gguf_bytes(f)
        last = max(f.tensors, key=lambda t: t.offset)
        data_end = len(data) - len(f.tensor_data) + last.offset + last.nbytes
        for cut in list(range(4, 200, 7)) + [data_end - 1, data_end - 40]:
            with pytest.raises(CorruptionError):
                gguf_io.read_gguf(data[:cut])

    def _patched(self, rng, tensor: int, field: str, value: int) -> bytes:
        f = _sample_file(rng)
        infos = list(f.tensors)
        t = infos[tensor]
        infos[tensor] = GgufTensorInfo(t.name, t.dims, t.ggml_type, value) if field == "offset" else t
        head = gguf_io._header_bytes(f.metadata, infos, 3)
        pad = gguf_io.align(len(head), 32) - len(head)
        return head + bytes(pad) + bytes(f.tensor_data)

    def test_misaligned_offset(self, rng):
        with pytest.raises(CorruptionError, match="offset"):
            gguf_io.read_gguf(self._patched(rng, 1, "offset", 8))

    def test_overlapping_offsets(self, rng):
        with pytest.raises(CorruptionError, match="overlaps"):
            gguf_io.read_gguf(self._patched(rng, 1, "offset", 256))

    def test_unknown_type_is_opaque(self, rng):
        md = dict(ARCH)
        f = gguf_io.assemble(md, [("odd", (4, 32), 99, bytes(range(100))), ("ok", (2,), 0, bytes(8))])
        back = gguf_io.read_gguf(gguf_io.gguf_bytes(f))
        info = back.tensor("odd")
        assert info.qtype is None and info.shape == (4, 32)
        assert bytes(back.tensor_bytes("odd"))[:100] == bytes(range(100))
        with pytest.raises(UnsupportedTypeError):
            back.read_tensor("odd")
        np.testing.assert_array_equal(back.read_tensor("ok"), [0, 0])


@st.composite
def metadata_values(draw, depth=0):
    kinds = [t for t in ValueType if t is not ValueType.ARRAY or depth < 2]
    vtype = draw(st.sampled_from(kinds))
    ints = {
        ValueType.UINT8: (0, 255), ValueType.INT8: (-128, 127), ValueType.UINT16: (0, 65535),
        ValueType.INT16: (-32768, 32767), ValueType.UINT32: (0, 2**32 - 1), ValueType.INT32: (-(2**31), 2**31 - 1),
        ValueType.UINT64: (0, 2**64 - 1), ValueType.INT64: (-(2**63), 2**63 - 1),
    }

    def scalar(t):
        if t in ints:
            return st.integers(*ints[t])
        if t is ValueType.FLOAT32:
            return st.floats(width=32, allow_nan=False)
        if t is ValueType.FLOAT64:
            return st.floats(allow_nan=False)
        if t is ValueType.BOOL:
            return st.booleans()
        return st.text(max_size=12)

    if vtype is not ValueType.ARRAY:
        return MetadataValue(vtype, draw(scalar(vtype)))
    item = draw(st.sampled_from(kinds))
    if item is ValueType.ARRAY:
        inner = draw(st.lists(metadata_values(depth + 1).filter(lambda v: v.type is ValueType.ARRAY), max_size=3))
        return MetadataValue.array(item, inner)
    return MetadataValue.array(item, draw(st.lists(scalar(item), max_size=5)))


@settings(max_examples=150, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=10), metadata_values(), max_size=5))
def test_write_read_write_identical(md):
    data = gguf_io.gguf_bytes(gguf_io.assemble(md, [("t", (2, 32), 8, bytes(68))]))
    back = gguf_io.read_gguf(data)
    assert back.metadata == md
    assert gguf_io.gguf_bytes(back) == data


class TestPackModel:
    def test_empty(self):
        f = gguf_io.pack_model([], "m")
        assert gguf_io.read_gguf(gguf_io.gguf_bytes(f)).tensors == ()

    def test_f32_lossless(self):
        x = np.array([[1.5, -2.0], [3.25, 1e-20]], dtype=np.float32)
        t = TensorView("w", (2, 2), QuantType.F32, kquant.quantize(x.ravel(), QuantType.F32))
        back = gguf_io.read_gguf(gguf_io.gguf_bytes(gguf_io.pack_model([t], "m")))
        np.testing.assert_array_equal(back.read_tensor("w"), x)

    def test_nf4_rejected(self):
        t = TensorView("w", (64,), QuantType.NF4, kquant.quantize(np.ones(64), QuantType.NF4))
        with pytest.raises(UnsupportedTypeError, match="w"):
            gguf_io.pack_model([t], "m")

    def test_metadata_keys_and_order(self, rng):
        _, q4 = _q4k_tensor(rng)
        tensors = [
            TensorView("b", (256,), QuantType.Q4_K, q4),
            TensorView("a", (2,), QuantType.F32, bytes(8)),
        ]
        f = gguf_io.pack_model(tensors, "model-x", {"vocab_size": "10", "tok.x": "y"}, "plan-p")
        assert list(f.metadata)[:6] == [
            "general.architecture", "general.name", "general.alignment",
            "general.quantized_by", "quantize.plan", "quantize.type_counts",
        ]
        assert f.metadata["general.name"].to_python() == "model-x"
        assert f.metadata["quantize.type_counts"].to_python() == ["F32=1", "Q4_K=1"]
        assert f.metadata["source.vocab_size"].to_python() == "10"
        assert f.metadata["tok.x"].to_python() == "y"
        assert [t.name for t in f.tensors] == ["b", "a"]
