import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equitrack.ltsr import LTSRError, read_ltsr, write_ltsr


def test_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    path = tmp_path / "t.ltsr"
    write_ltsr(path, arr)
    out = read_ltsr(path)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, arr)


def test_header_layout(tmp_path):
    path = tmp_path / "t.ltsr"
    write_ltsr(path, np.zeros((2, 3), dtype=np.float32))
    data = path.read_bytes()
    assert data[:4] == b"LTSR"
    # version 1, ndim 2, dims 2 and 3, little-endian u32
    assert data[4:20] == (
        (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    )
    assert len(data) == 20 + 4 * 6


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ltsr"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(LTSRError, match="magic"):
        read_ltsr(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.ltsr"
    write_ltsr(path, np.zeros((4, 4), dtype=np.float32))
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(LTSRError, match="truncated"):
        read_ltsr(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "t.ltsr"
    path.write_bytes(b"LTSR" + (1).to_bytes(4, "little") + (3).to_bytes(4, "little"))
    with pytest.raises(LTSRError, match="truncated"):
        read_ltsr(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "t.ltsr"
    write_ltsr(path, np.zeros(3, dtype=np.float32))
    data = bytearray(path.read_bytes())
    data[4] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(LTSRError, match="version"):
        read_ltsr(path)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=4),
    st.integers(0, 2**31 - 1),
)
def test_round_trip_property(tmp_path_factory, dims, seed):
    rng = np.random.default_rng(seed)
    arr = rng.normal(size=dims).astype(np.float32)
    path = tmp_path_factory.mktemp("ltsr") / "p.ltsr"
    write_ltsr(path, arr)
    np.testing.assert_array_equal(read_ltsr(path), arr)
