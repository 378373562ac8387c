import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from dualnet import container
from dualnet.container import FormatError
from dualnet.params import ParamSet, kaiming_uniform, linear_uniform
from dualnet.tensor import Tensor

dtypes = st.sampled_from([np.float32, np.float64, np.int64])


@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12),
        dtypes.flatmap(lambda dt: arrays(dt, array_shapes(min_dims=0, max_dims=3, max_side=4))),
        max_size=4,
    )
)
def test_roundtrip_is_bit_identical(named):
    out = container.decode(container.encode(named))
    assert list(out) == list(named)
    for k, v in named.items():
        assert out[k].dtype == v.dtype and out[k].shape == v.shape
        assert out[k].tobytes() == np.ascontiguousarray(v).tobytes()


def test_record_layout_by_hand():
    buf = container.encode({"ab": np.array([1.5, -2.0], dtype=np.float32)})
    expected = b"DUALNET1" + struct.pack("<I", 2) + b"ab" + struct.pack("<BII", 0, 1, 2) + struct.pack("<2f", 1.5, -2.0)
    assert buf == expected


def test_bad_magic_and_truncation_report_offsets():
    buf = container.encode({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    with pytest.raises(FormatError) as err:
        container.decode(b"XXXXXXXX" + buf[8:])
    assert err.value.offset == 0
    for cut in (10, 14, len(buf) - 1):
        with pytest.raises(FormatError) as err:
            container.decode(buf[:cut])
        assert 8 <= err.value.offset <= cut
        assert "offset" in str(err.value)


def test_save_and_load_file(tmp_path):
    arrays_in = {"a.b": np.ones((2, 2)), "c": np.array([3], dtype=np.int64)}
    container.save(tmp_path / "x.bin", arrays_in)
    out = container.load(tmp_path / "x.bin")
    np.testing.assert_array_equal(out["a.b"], arrays_in["a.b"])


def test_paramset_basics(rng):
    ps = ParamSet()
    w = ps.add("w", kaiming_uniform(rng, (4, 3, 3, 3)))
    assert w.requires_grad
    with pytest.raises(KeyError):
        ps.add("w", Tensor([1.0]))
    ps.add("b", linear_uniform(rng, 27, (4,)))
    assert ps.names() == ["w", "b"] and ps.count() == 4 * 27 + 4
    bound = np.sqrt(6 / 27)
    assert np.abs(w.data).max() <= bound
    fp = ps.fingerprint()
    snap = ps.snapshot()
    w.data = w.data + 1.0
    assert ps.fingerprint() != fp
    ps.load(snap)
    assert ps.fingerprint() == fp
    with pytest.raises(KeyError):
        ps.load({"w": snap["w"]})
    with pytest.raises(ValueError):
        ps.load({"w": np.zeros(3), "b": snap["b"]})


def test_merge_shares_tensors_and_save(tmp_path, rng):
    a, b = ParamSet(), ParamSet()
    t = a.add("x", Tensor(rng.normal(size=3)))
    b.add("x", Tensor(rng.normal(size=2)))
    m = a.merge(b, prefixes=["slow.", "fast."])
    assert m["slow.x"] is t and m.names() == ["slow.x", "fast.x"]
    m.zero_grad()
    assert np.all(t.grad == 0)
    a.save(tmp_path / "p.bin", prefix="slow.")
    assert list(container.load(tmp_path / "p.bin")) == ["slow.x"]
