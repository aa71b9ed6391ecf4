import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tallpack import TensorMap, check_compatibility, load_archive, save_archive
from tallpack.errors import (
    EmptyInput,
    IoError,
    MalformedHeader,
    NonFiniteValue,
    TruncatedFile,
    UnsupportedDtype,
)
from tallpack.tensor_store import dump_archive_bytes, load_archive_bytes

from conftest import tmap


def raw_archive(entries: dict, payload: bytes) -> bytes:
    header = json.dumps(entries).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + payload


class TestTensorMap:
    def test_keys_sorted_regardless_of_insertion(self):
        m = tmap(b=[1.0], a=[2.0], c=[3.0])
        assert m.keys() == ("a", "b", "c")

    def test_buffers_are_float32_and_readonly(self):
        m = TensorMap({"w": np.array([1, 2], dtype=np.int64)})
        assert m["w"].dtype == np.float32
        with pytest.raises(ValueError):
            m["w"][0] = 5.0

    def test_constructor_copies_caller_array(self):
        arr = np.array([1.0, 2.0], dtype=np.float32)
        m = TensorMap({"w": arr})
        arr[0] = 99.0
        assert m["w"][0] == 1.0

    def test_rejects_bad_names(self):
        with pytest.raises(ValueError):
            TensorMap({"": np.zeros(1, dtype=np.float32)})
        with pytest.raises(ValueError):
            TensorMap({"a\x00b": np.zeros(1, dtype=np.float32)})

    def test_concat_is_key_ordered_row_major(self):
        m = tmap(b=[[3.0, 4.0]], a=[1.0, 2.0])
        assert m.concat().tolist() == [1.0, 2.0, 3.0, 4.0]


class TestRoundtrip:
    def test_identity(self, tmp_path):
        m = tmap(w=[[1.0, 2.0], [3.0, 4.0]])
        path = tmp_path / "a.safetensors"
        save_archive(m, path)
        assert load_archive(path).equal(m)

    def test_two_tensor_order_preserved(self, tmp_path):
        m = tmap(zz=[1.0], aa=[2.0, 3.0])
        path = tmp_path / "a.safetensors"
        save_archive(m, path)
        loaded = load_archive(path)
        assert loaded.keys() == ("aa", "zz")
        assert loaded.equal(m)

    def test_empty_shape_tensor_preserved(self, tmp_path):
        m = TensorMap({"w": np.zeros((0,), dtype=np.float32), "v": np.ones(2, dtype=np.float32)})
        path = tmp_path / "a.safetensors"
        save_archive(m, path)
        loaded = load_archive(path)
        assert loaded["w"].shape == (0,)
        assert loaded.equal(m)

    def test_scalar_shape_tensor(self, tmp_path):
        m = TensorMap({"s": np.float32(7.5).reshape(())})
        path = tmp_path / "a.safetensors"
        save_archive(m, path)
        loaded = load_archive(path)
        assert loaded["s"].shape == ()
        assert loaded["s"] == np.float32(7.5)

    def test_save_empty_map_rejected(self, tmp_path):
        with pytest.raises(EmptyInput):
            save_archive(TensorMap({}), tmp_path / "a.safetensors")

    def test_save_into_missing_directory(self, tmp_path):
        with pytest.raises(IoError):
            save_archive(tmap(w=[1.0]), tmp_path / "nope" / "a.safetensors")

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_archive(tmp_path / "missing.safetensors")

    @settings(max_examples=40, deadline=None)
    @given(
        data=st.dictionaries(
            st.text(alphabet="abcdefgh.0123456789_", min_size=1, max_size=12),
            hnp.arrays(
                np.float32,
                hnp.array_shapes(max_dims=3, max_side=5),
                elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, width=32),
            ),
            min_size=1,
            max_size=4,
        )
    )
    def test_roundtrip_bit_exact(self, data):
        m = TensorMap(data)
        assert load_archive_bytes(dump_archive_bytes(m)).equal(m)


class TestLoadValidation:
    def test_f16_exact_value(self):
        payload = np.array([1.0], dtype="<f2").tobytes()
        buf = raw_archive({"w": {"dtype": "F16", "shape": [1], "data_offsets": [0, 2]}}, payload)
        loaded = load_archive_bytes(buf)
        assert loaded["w"].dtype == np.float32
        assert loaded["w"][0] == np.float32(1.0)

    def test_bf16_exact_value(self):
        # 0x3FC0 is 1.5 in bfloat16 (top half of the float32 pattern)
        payload = struct.pack("<H", 0x3FC0)
        buf = raw_archive({"w": {"dtype": "BF16", "shape": [1], "data_offsets": [0, 2]}}, payload)
        assert load_archive_bytes(buf)["w"][0] == np.float32(1.5)

    def test_byte_length_disagrees_with_shape(self):
        payload = np.zeros(4, dtype="<f4").tobytes()
        buf = raw_archive({"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 12]}}, payload[:12])
        with pytest.raises(MalformedHeader):
            load_archive_bytes(buf)

    def test_unparsable_header(self):
        buf = struct.pack("<Q", 5) + b"{oops" + b""
        with pytest.raises(MalformedHeader):
            load_archive_bytes(buf)

    def test_duplicate_names_rejected(self):
        header = b'{"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}, "w": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}'
        buf = struct.pack("<Q", len(header)) + header + np.zeros(2, dtype="<f4").tobytes()
        with pytest.raises(MalformedHeader):
            load_archive_bytes(buf)

    def test_overlapping_offsets(self):
        payload = np.zeros(3, dtype="<f4").tobytes()
        buf = raw_archive(
            {
                "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
            },
            payload,
        )
        with pytest.raises(MalformedHeader):
            load_archive_bytes(buf)

    def test_non_contiguous_offsets(self):
        payload = np.zeros(3, dtype="<f4").tobytes()
        buf = raw_archive(
            {
                "a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
                "b": {"dtype": "F32", "shape": [1], "data_offsets": [8, 12]},
            },
            payload,
        )
        with pytest.raises(MalformedHeader):
            load_archive_bytes(buf)

    def test_unsupported_dtype(self):
        buf = raw_archive({"w": {"dtype": "I64", "shape": [1], "data_offsets": [0, 8]}}, b"\0" * 8)
        with pytest.raises(UnsupportedDtype):
            load_archive_bytes(buf)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        payload = np.array([1.0, bad], dtype="<f4").tobytes()
        buf = raw_archive({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, payload)
        with pytest.raises(NonFiniteValue):
            load_archive_bytes(buf)

    def test_truncated_payload(self):
        buf = raw_archive({"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, b"\0" * 8)
        with pytest.raises(TruncatedFile):
            load_archive_bytes(buf)

    def test_truncated_header(self):
        buf = struct.pack("<Q", 1000) + b"{}"
        with pytest.raises(TruncatedFile):
            load_archive_bytes(buf)

    def test_short_file(self):
        with pytest.raises(TruncatedFile):
            load_archive_bytes(b"\x01\x02")

    def test_bf16_nan_rejected(self):
        payload = struct.pack("<H", 0x7FC0)  # bfloat16 NaN
        buf = raw_archive({"w": {"dtype": "BF16", "shape": [1], "data_offsets": [0, 2]}}, payload)
        with pytest.raises(NonFiniteValue):
            load_archive_bytes(buf)

    def test_f16_inf_rejected(self):
        payload = np.array([np.inf], dtype="<f2").tobytes()
        buf = raw_archive({"w": {"dtype": "F16", "shape": [1], "data_offsets": [0, 2]}}, payload)
        with pytest.raises(NonFiniteValue):
            load_archive_bytes(buf)

    def test_negative_shape_rejected(self):
        buf = raw_archive({"w": {"dtype": "F32", "shape": [-1], "data_offsets": [0, 4]}}, b"\0" * 4)
        with pytest.raises(MalformedHeader):
            load_archive_bytes(buf)

    def test_reversed_offsets_rejected(self):
        buf = raw_archive({"w": {"dtype": "F32", "shape": [1], "data_offsets": [4, 0]}}, b"\0" * 4)
        with pytest.raises(MalformedHeader):
            load_archive_bytes(buf)

    def test_trailing_payload_rejected(self):
        payload = np.zeros(2, dtype="<f4").tobytes()
        buf = raw_archive({"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}, payload)
        with pytest.raises(MalformedHeader):
            load_archive_bytes(buf)

    def test_metadata_entry_ignored(self):
        payload = np.array([2.0], dtype="<f4").tobytes()
        buf = raw_archive(
            {
                "__metadata__": {"origin": "test"},
                "w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
            },
            payload,
        )
        assert load_archive_bytes(buf)["w"][0] == 2.0


class TestSafetensorsInterop:
    def test_our_writer_reads_with_reference_library(self, tmp_path):
        st_numpy = pytest.importorskip("safetensors.numpy")
        m = tmap(a=[[1.5, -2.0]], b=[3.25])
        path = tmp_path / "ours.safetensors"
        save_archive(m, path)
        theirs = st_numpy.load_file(str(path))
        assert set(theirs) == {"a", "b"}
        assert np.array_equal(theirs["a"], m["a"])
        assert np.array_equal(theirs["b"], m["b"])

    def test_reference_library_file_loads_here(self, tmp_path):
        st_numpy = pytest.importorskip("safetensors.numpy")
        path = tmp_path / "theirs.safetensors"
        data = {
            "a": np.array([[1.5, -2.0]], dtype=np.float32),
            "b": np.array([3.25], dtype=np.float16),
        }
        st_numpy.save_file(data, str(path))
        loaded = load_archive(path)
        assert np.array_equal(loaded["a"], data["a"])
        assert loaded["b"].dtype == np.float32
        assert loaded["b"][0] == np.float32(3.25)


class TestCompatibility:
    def test_identical_maps_compatible(self):
        a = tmap(w=[1.0, 2.0])
        assert check_compatibility(a, a).compatible

    def test_shape_mismatch_reported(self):
        a = tmap(w=[[1.0, 2.0]])
        b = tmap(w=[[1.0], [2.0]])
        report = check_compatibility(a, b)
        assert not report.compatible
        assert report.shape_mismatches == (("w", (1, 2), (2, 1)),)

    def test_missing_key_reported(self):
        a = tmap(w=[1.0])
        b = tmap(w=[1.0], b=[2.0])
        report = check_compatibility(a, b)
        assert report.missing_in_a == ("b",)
        assert report.missing_in_b == ()
        assert not report.compatible
