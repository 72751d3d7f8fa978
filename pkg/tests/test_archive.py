import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fimmerge.archive import (
    ArchiveError,
    TensorArchive,
    archive_digest,
    archive_to_bytes,
    load_archive,
    write_archive,
)


def _raw_file(header: dict, payload: bytes) -> bytes:
    blob = json.dumps(header).encode()
    return struct.pack("<Q", len(blob)) + blob + payload


names = st.text(alphabet="abcdefgh.xyz_0123456789", min_size=1, max_size=24)
shapes = st.lists(st.integers(min_value=1, max_value=4), min_size=0, max_size=3)


@st.composite
def archives(draw):
    entries = {}
    for name in draw(st.lists(names, min_size=0, max_size=5, unique=True)):
        shape = tuple(draw(shapes))
        values = np.asarray(
            draw(
                st.lists(
                    st.floats(-1e6, 1e6, allow_nan=False, width=32),
                    min_size=int(np.prod(shape, dtype=int)) if shape else 1,
                    max_size=int(np.prod(shape, dtype=int)) if shape else 1,
                )
            ),
            dtype=np.float32,
        ).reshape(shape)
        entries[name] = values
    return TensorArchive(entries)


class TestRoundTrip:
    def test_identity_matrix(self, tmp_path):
        a = TensorArchive({"w": np.array([[1, 0], [0, 1]], dtype=np.float32)})
        path = tmp_path / "a.safetensors"
        write_archive(a, path)
        b = load_archive(path)
        assert b.names() == ["w"]
        assert b["w"].shape == (2, 2)
        assert np.array_equal(b["w"], a["w"])

    @settings(max_examples=60, deadline=None)
    @given(archive=archives())
    def test_round_trip_elementwise(self, tmp_path_factory, archive):
        path = tmp_path_factory.mktemp("rt") / "a.safetensors"
        write_archive(archive, path)
        loaded = load_archive(path)
        assert loaded.names() == archive.names()
        for n in archive.names():
            assert np.array_equal(loaded[n], archive[n])
            assert loaded[n].shape == archive[n].shape

    def test_write_load_write_bytes_identical(self, tmp_path, rng):
        a = TensorArchive({"x": rng.standard_normal((3, 5)).astype(np.float32),
                           "y": rng.standard_normal(7).astype(np.float32)})
        p1, p2 = tmp_path / "1.st", tmp_path / "2.st"
        write_archive(a, p1)
        write_archive(load_archive(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestDeterminism:
    def test_same_archive_same_bytes(self, rng):
        a = TensorArchive({"x": rng.standard_normal((4, 4)).astype(np.float32)})
        assert archive_to_bytes(a) == archive_to_bytes(a)
        assert archive_digest(a) == archive_digest(a)

    def test_two_loads_identical(self, tmp_path, rng):
        a = TensorArchive({"x": rng.standard_normal(11).astype(np.float32)})
        path = tmp_path / "a.st"
        write_archive(a, path)
        l1, l2 = load_archive(path), load_archive(path)
        assert l1.names() == l2.names()
        assert all(np.array_equal(l1[n], l2[n]) for n in l1.names())

    def test_lexicographic_header_order(self, tmp_path):
        a = TensorArchive({"b": np.zeros(2, np.float32), "a": np.ones(3, np.float32)})
        assert a.names() == ["a", "b"]
        blob = archive_to_bytes(a)
        (hlen,) = struct.unpack("<Q", blob[:8])
        header = blob[8 : 8 + hlen].decode()
        assert header.index('"a"') < header.index('"b"')

    def test_empty_archive(self, tmp_path):
        path = tmp_path / "empty.st"
        write_archive(TensorArchive({}), path)
        loaded = load_archive(path)
        assert len(loaded) == 0


class TestValidation:
    def test_declared_bytes_exceed_payload(self, tmp_path):
        # header says 16 bytes, payload only carries 12
        path = tmp_path / "bad.st"
        path.write_bytes(_raw_file(
            {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}},
            b"\x00" * 12,
        ))
        with pytest.raises(ArchiveError, match="out of bounds"):
            load_archive(path)

    def test_truncated_file(self, tmp_path, rng):
        path = tmp_path / "t.st"
        write_archive(TensorArchive({"x": rng.standard_normal(8).astype(np.float32)}), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(ArchiveError):
            load_archive(path)

    def test_byte_length_shape_mismatch(self, tmp_path):
        path = tmp_path / "bad.st"
        path.write_bytes(_raw_file(
            {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 12]}},
            b"\x00" * 12,
        ))
        with pytest.raises(ArchiveError, match="does not match"):
            load_archive(path)

    def test_duplicate_names_rejected(self, tmp_path):
        entry = '{"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}'
        blob = ('{"w": %s, "w": %s}' % (entry, entry)).encode()
        path = tmp_path / "dup.st"
        path.write_bytes(struct.pack("<Q", len(blob)) + blob + b"\x00" * 4)
        with pytest.raises(ArchiveError, match="duplicate"):
            load_archive(path)

    def test_non_finite_rejected(self, tmp_path):
        payload = struct.pack("<4f", 1.0, float("nan"), 0.0, 2.0)
        path = tmp_path / "nan.st"
        path.write_bytes(_raw_file(
            {"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, payload
        ))
        with pytest.raises(ArchiveError, match="non-finite"):
            load_archive(path)

    def test_overlapping_ranges_rejected(self, tmp_path):
        path = tmp_path / "ov.st"
        path.write_bytes(_raw_file(
            {
                "a": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]},
                "b": {"dtype": "F32", "shape": [4], "data_offsets": [8, 24]},
            },
            b"\x00" * 24,
        ))
        with pytest.raises(ArchiveError, match="overlap"):
            load_archive(path)

    def test_payload_gap_rejected(self, tmp_path):
        path = tmp_path / "gap.st"
        path.write_bytes(_raw_file(
            {
                "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                "b": {"dtype": "F32", "shape": [2], "data_offsets": [12, 20]},
            },
            b"\x00" * 20,
        ))
        with pytest.raises(ArchiveError, match="gap"):
            load_archive(path)

    def test_malformed_header_json(self, tmp_path):
        path = tmp_path / "mj.st"
        blob = b"{not json"
        path.write_bytes(struct.pack("<Q", len(blob)) + blob)
        with pytest.raises(ArchiveError, match="malformed"):
            load_archive(path)

    def test_file_too_short(self, tmp_path):
        path = tmp_path / "short.st"
        path.write_bytes(b"\x01\x02")
        with pytest.raises(ArchiveError, match="too short"):
            load_archive(path)

    def test_nonpositive_dim_rejected(self, tmp_path):
        path = tmp_path / "dim.st"
        path.write_bytes(_raw_file(
            {"w": {"dtype": "F32", "shape": [0, 2], "data_offsets": [0, 0]}}, b""
        ))
        with pytest.raises(ArchiveError, match="non-positive"):
            load_archive(path)

    def test_archive_constructor_rejects_nonfinite_on_write(self, tmp_path):
        a = TensorArchive({"w": np.array([np.inf], dtype=np.float32)})
        with pytest.raises(ArchiveError):
            write_archive(a, tmp_path / "x.st")


class TestDtypeUpcast:
    def test_f16_upcast(self, tmp_path):
        values = np.array([1.5, -2.25, 0.125], dtype=np.float16)
        path = tmp_path / "h.st"
        path.write_bytes(_raw_file(
            {"w": {"dtype": "F16", "shape": [3], "data_offsets": [0, 6]}},
            values.tobytes(),
        ))
        loaded = load_archive(path)
        assert loaded["w"].dtype == np.float32
        assert np.array_equal(loaded["w"], values.astype(np.float32))
        assert any("F16" in note for note in loaded.notes)

    def test_bf16_upcast(self, tmp_path):
        f32 = np.array([1.0, -3.5, 0.4375], dtype=np.float32)
        bf16_bits = (f32.view(np.uint32) >> 16).astype(np.uint16)
        path = tmp_path / "b.st"
        path.write_bytes(_raw_file(
            {"w": {"dtype": "BF16", "shape": [3], "data_offsets": [0, 6]}},
            bf16_bits.tobytes(),
        ))
        loaded = load_archive(path)
        # the chosen values are exactly representable in bf16
        assert np.array_equal(loaded["w"], f32)
        assert any("BF16" in note for note in loaded.notes)

    def test_metadata_entry_ignored(self, tmp_path):
        path = tmp_path / "m.st"
        path.write_bytes(_raw_file(
            {
                "__metadata__": {"format": "pt"},
                "w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
            },
            struct.pack("<f", 7.0),
        ))
        loaded = load_archive(path)
        assert loaded.names() == ["w"]
