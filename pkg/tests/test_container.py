import numpy as np
import pytest

from cimsim.container import ContainerError, read_tensor, write_tensor


@pytest.mark.parametrize("dtype", [np.int8, np.int32, np.float64])
def test_round_trip(tmp_path, dtype):
    rng = np.random.default_rng(1)
    arr = rng.integers(-100, 100, (3, 5, 2)).astype(dtype)
    path = tmp_path / "t.cimt"
    write_tensor(path, arr, scale=0.25)
    back, scale, extra = read_tensor(path)
    assert np.array_equal(back, arr)
    assert back.dtype == arr.dtype
    assert scale == 0.25
    assert extra == {}


def test_extension_fields(tmp_path):
    path = tmp_path / "lut.cimt"
    write_tensor(path, np.arange(256, dtype=np.int32), scale=1.0,
                 extra={"input_scale": 0.125, "z_quant_max": 127,
                        "fraction_bits": 7})
    _, _, extra = read_tensor(path)
    assert extra == {"input_scale": 0.125, "z_quant_max": 127,
                     "fraction_bits": 7}


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.cimt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ContainerError):
        read_tensor(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.cimt"
    write_tensor(path, np.zeros((4, 4), dtype=np.int8))
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(ContainerError):
        read_tensor(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ContainerError):
        write_tensor(tmp_path / "x.cimt", np.zeros(2, dtype=np.float32))


def test_byte_determinism(tmp_path):
    arr = np.arange(-8, 8, dtype=np.int8).reshape(4, 4)
    p1, p2 = tmp_path / "a.cimt", tmp_path / "b.cimt"
    write_tensor(p1, arr, scale=0.5, extra={"partition": 3, "bank": 1})
    write_tensor(p2, arr, scale=0.5, extra={"bank": 1, "partition": 3})
    assert p1.read_bytes() == p2.read_bytes()
