"""Binary parameter snapshots: roundtrip fidelity and corruption detection."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from travseg.checkpoint import MAGIC, load_params, params_checksum, save_params
from travseg.errors import ValidationError


def sample_params(rng):
    return {
        "depth.mix.weight": rng.normal(size=(8, 8, 3, 3)).astype(np.float32),
        "decoder.conv1.bias": rng.normal(size=5).astype(np.float32),
        "scale": np.array(0.51, dtype=np.float32),
    }


def test_round_trip_is_bit_exact(tmp_path, rng):
    params = sample_params(rng)
    p = tmp_path / "w.ckpt"
    save_params(p, params)
    back = load_params(p)
    assert sorted(back) == sorted(params)
    for name, arr in params.items():
        assert back[name].dtype == arr.dtype
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()


def test_file_bytes_independent_of_insertion_order(tmp_path, rng):
    params = sample_params(rng)
    reordered = dict(reversed(list(params.items())))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_params(a, params)
    save_params(b, reordered)
    assert a.read_bytes() == b.read_bytes()


def test_empty_checkpoint_is_rejected(tmp_path):
    with pytest.raises(ValidationError):
        save_params(tmp_path / "e.ckpt", {})


def test_bad_magic_is_rejected(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"XXXXX" + b"\x00" * 32)
    with pytest.raises(ValidationError):
        load_params(p)


def test_truncation_is_detected(tmp_path, rng):
    p = tmp_path / "t.ckpt"
    save_params(p, sample_params(rng))
    blob = p.read_bytes()
    p.write_bytes(blob[: len(blob) - 7])
    with pytest.raises(ValidationError):
        load_params(p)


def test_trailing_garbage_is_detected(tmp_path, rng):
    p = tmp_path / "g.ckpt"
    save_params(p, sample_params(rng))
    p.write_bytes(p.read_bytes() + b"\x01\x02")
    with pytest.raises(ValidationError):
        load_params(p)


def test_magic_prefix_present(tmp_path, rng):
    p = tmp_path / "m.ckpt"
    save_params(p, sample_params(rng))
    assert p.read_bytes().startswith(MAGIC)


@given(st.integers(0, 2**32 - 1))
def test_roundtrip_arbitrary_shapes(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    ndim = int(rng.integers(0, 4))
    shape = tuple(int(s) for s in rng.integers(1, 5, size=ndim))
    arr = rng.normal(size=shape).astype(np.float32)
    p = tmp_path_factory.mktemp("ckpt") / "r.ckpt"
    save_params(p, {"only": arr})
    back = load_params(p)["only"]
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_wider_dtypes_are_narrowed_on_save(tmp_path):
    p = tmp_path / "n.ckpt"
    save_params(p, {"w": np.array([0.1, 0.2], dtype=np.float64)})
    back = load_params(p)["w"]
    assert back.dtype == np.float32
    np.testing.assert_array_equal(
        back, np.array([0.1, 0.2], dtype=np.float64).astype(np.float32))


def test_checksum_order_invariant_and_content_sensitive(rng):
    params = sample_params(rng)
    reordered = dict(reversed(list(params.items())))
    assert params_checksum(params) == params_checksum(reordered)

    bumped = {k: v.copy() for k, v in params.items()}
    bumped["scale"] += 1e-6
    assert params_checksum(bumped) != params_checksum(params)

    renamed = dict(params)
    renamed["zcale"] = renamed.pop("scale")
    assert params_checksum(renamed) != params_checksum(params)
