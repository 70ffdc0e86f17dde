import numpy as np
import pytest

from compressnas import cnt


def test_round_trip(tmp_path, rng):
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    cnt.save(tmp_path / "a.cnt", a)
    b = cnt.load(tmp_path / "a.cnt")
    assert b.dtype == np.float32
    np.testing.assert_array_equal(a, b)


def test_header_layout():
    buf = cnt.dumps(np.zeros((2, 5), dtype=np.float32))
    assert buf[:4] == b"CNT1"
    assert buf[4:6] == bytes([0, 2])
    assert buf[6:14] == (2).to_bytes(4, "little") + (5).to_bytes(4, "little")
    assert len(buf) == 4 + 1 + 1 + 2 * 4 + 10 * 4


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-1]])
def test_corrupt_rejected(mutate):
    buf = cnt.dumps(np.ones((3,), dtype=np.float32))
    with pytest.raises(ValueError):
        cnt.loads(mutate(buf))
