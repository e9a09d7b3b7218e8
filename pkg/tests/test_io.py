import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from projscrub import io
from projscrub.data import ValidationError


def test_binary_header_layout():
    data = io.encode_binary(np.arange(6.0).reshape(2, 3), 0.72)
    assert len(data) == 24 + 6 * 8
    magic, T, V, pad, tr = struct.unpack("<4sIIId", data[:24])
    assert (magic, T, V, pad, tr) == (b"SCRB", 2, 3, 0, 0.72)
    assert np.frombuffer(data[24:], "<f8")[4] == 4.0


@settings(max_examples=40, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 8), st.integers(1, 5)),
              elements=st.floats(-1e12, 1e12, allow_nan=False, allow_subnormal=False)))
def test_roundtrip_both_encodings(values):
    back, tr = io.decode_binary(io.encode_binary(values, 2.0))
    assert np.array_equal(back, values) and tr == 2.0
    assert np.array_equal(io.decode_csv(io.encode_csv(values)), values)


def test_truncated_binary_rejected():
    data = io.encode_binary(np.ones((3, 3)))
    with pytest.raises(ValidationError):
        io.decode_binary(data[:-8])


def test_csv_header_and_garbage(tmp_path):
    assert np.array_equal(io.decode_csv("a,b\n1,2\n3,4\n"), [[1, 2], [3, 4]])
    with pytest.raises(ValidationError):
        io.decode_csv("1,2\nx,4\n")
    with pytest.raises(ValidationError):
        io.decode_csv("")


def test_read_matrix_autodetect(tmp_path):
    Y = np.random.default_rng(0).standard_normal((4, 3))
    io.write_matrix(tmp_path / "m.bin", Y, 0.5)
    io.write_matrix(tmp_path / "m.csv", Y)
    a, tra = io.read_matrix(tmp_path / "m.bin")
    b, trb = io.read_matrix(tmp_path / "m.csv")
    assert np.array_equal(a, Y) and np.array_equal(b, Y)
    assert tra == 0.5 and trb is None
    scan = io.read_scan(tmp_path / "m.csv", 0.8, subject_id="s1")
    assert scan.tr_seconds == 0.8 and scan.subject_id == "s1"


def test_flags_roundtrip_and_atomic(tmp_path):
    flags = np.array([0, 1, 1, 0], bool)
    io.write_flags_csv(tmp_path / "sub" / "f.csv", flags)
    assert np.array_equal(io.read_flags_csv(tmp_path / "sub" / "f.csv"), flags)
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.csv"]


def test_json_sorted_and_deterministic(tmp_path):
    io.write_json(tmp_path / "a.json", {"b": 1, "a": [1.5]})
    text = (tmp_path / "a.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    io.write_json(tmp_path / "b.json", {"a": [1.5], "b": 1})
    assert (tmp_path / "b.json").read_text() == text
