import struct

import numpy as np
import pytest

from sdr.io import (Checkpoint, ChecksumError, Dataset, FormatError, ParseError, ingest, read_csv, read_raw,
                    write_csv, write_raw)


def _ckpt(rng):
    return Checkpoint({"seed": "3", "note": "a b"},
                      {"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(4), "e": np.zeros((0, 5))})


def test_checkpoint_roundtrip_bytes(rng, tmp_path):
    ck = _ckpt(rng)
    ck.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    assert back.meta == ck.meta
    np.testing.assert_array_equal(back.tensors["w"], ck.tensors["w"])
    assert back.tensors["b"].shape == (1, 4) and back.tensors["e"].shape == (0, 5)
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_layout(rng):
    data = Checkpoint({"k": "v"}, {"t": np.array([[1.5]])}).to_bytes()
    assert data[:4] == b"SDR1"
    assert struct.unpack_from("<I", data, 4)[0] == 1
    assert struct.unpack_from("<Q", data, 8)[0] == len(b"k=v\n")
    assert data[16:20] == b"k=v\n"
    assert struct.unpack_from("<Q", data, 20)[0] == 1
    assert struct.unpack_from("<I", data, 28)[0] == 1 and data[32:33] == b"t"
    assert struct.unpack_from("<QQ", data, 33) == (1, 1)
    assert struct.unpack_from("<d", data, 49)[0] == 1.5
    assert len(data) == 49 + 8 + 8


def test_checkpoint_refuses_corruption(rng):
    data = bytearray(_ckpt(rng).to_bytes())
    data[40] ^= 0x01
    with pytest.raises(ChecksumError):
        Checkpoint.from_bytes(bytes(data))
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(b"NOPE" + bytes(40))


def test_csv_roundtrip_17_digits(rng, tmp_path):
    x = rng.standard_normal((2, 3)) * 10.0 ** rng.integers(-20, 20, (2, 3))
    write_csv(tmp_path / "a.csv", Dataset(x, np.array([0, 4])))
    back = read_csv(tmp_path / "a.csv")
    assert np.array_equal(back.samples, x) and list(back.labels) == [0, 4]
    write_csv(tmp_path / "b.csv", Dataset(x))
    assert read_csv(tmp_path / "b.csv").labels is None


@pytest.mark.parametrize("body,line", [
    ("x0,x1,label\n1,2,0\n3,1\n", 3),
    ("x0,x1\n1,2\n2,nan\n", 3),
    ("x0,x1\n1,inf\n", 2),
    ("x0,x1,label\n1,2,zero\n", 2),
    ("x0,x1\n1,abc\n", 2),
])
def test_csv_errors_name_the_line(tmp_path, body, line):
    (tmp_path / "bad.csv").write_text(body)
    with pytest.raises(ParseError) as err:
        read_csv(tmp_path / "bad.csv")
    assert err.value.lineno == line and f":{line}:" in str(err.value)


def test_raw_binary(rng, tmp_path):
    x = rng.standard_normal((4, 3))
    write_raw(tmp_path / "a.bin", Dataset(x))
    assert np.array_equal(ingest(tmp_path / "a.bin").samples, x)
    data = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-8])
    with pytest.raises(ParseError):
        read_raw(tmp_path / "short.bin")
    bad = x.copy()
    bad[2, 1] = np.nan
    write_raw(tmp_path / "nan.bin", Dataset(bad))
    with pytest.raises(ParseError) as err:
        read_raw(tmp_path / "nan.bin")
    assert err.value.lineno == 3
