"""Checkpoint format: bit-exact round-trips and corruption handling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstd import checkpoint as ckpt
from mstd.errors import CheckpointError
from mstd.models import ModalityModel
from mstd.rng import stream
from mstd.tensor import Tensor

RNG = np.random.default_rng(77)


def sample_state():
    return {
        "m1/hidden/0/w": RNG.normal(size=(8, 16)).astype(np.float32),
        "m1/hidden/0/b": RNG.normal(size=16).astype(np.float32),
        "m1/head/w": RNG.normal(size=(16, 4)).astype(np.float32),
        "m1/head/b": RNG.normal(size=4).astype(np.float32),
        "scalar": np.array(3.14159, dtype=np.float32),
    }


def test_roundtrip_bit_exact(tmp_path):
    state = sample_state()
    path = tmp_path / "model.ckpt"
    ckpt.save(path, state)
    loaded = ckpt.load(path)
    assert list(loaded) == list(state)
    for k in state:
        assert loaded[k].shape == state[k].shape
        assert np.array_equal(
            loaded[k].view(np.uint32), np.atleast_1d(state[k]).view(np.uint32).reshape(loaded[k].shape)
        )


def test_roundtrip_special_values(tmp_path):
    state = {"p": np.array([0.0, -0.0, 1e-38, 3.4e38, -7.25], dtype=np.float32)}
    path = tmp_path / "x.ckpt"
    ckpt.save(path, state)
    out = ckpt.load(path)["p"]
    assert np.array_equal(out.view(np.uint32), state["p"].view(np.uint32))


def test_save_twice_identical_bytes():
    state = sample_state()
    assert ckpt.save_bytes(state) == ckpt.save_bytes(state)


def test_bad_magic_reports_offset_zero():
    blob = b"XXXX" + ckpt.save_bytes(sample_state())[4:]
    with pytest.raises(CheckpointError) as exc:
        ckpt.load_bytes(blob)
    assert exc.value.offset == 0


def test_unsupported_version_rejected():
    blob = bytearray(ckpt.save_bytes(sample_state()))
    blob[4:6] = (99).to_bytes(2, "little")
    with pytest.raises(CheckpointError) as exc:
        ckpt.load_bytes(bytes(blob))
    assert "version" in str(exc.value)


def test_truncated_payload_reports_offset():
    blob = ckpt.save_bytes({"p": np.ones((4, 4), dtype=np.float32)})
    with pytest.raises(CheckpointError) as exc:
        ckpt.load_bytes(blob[:-5])
    assert "byte offset" in str(exc.value)


def test_duplicate_name_rejected():
    one = ckpt.save_bytes({"p": np.ones(2, dtype=np.float32)})
    blob = one + one[6:]  # append the same record again
    with pytest.raises(CheckpointError) as exc:
        ckpt.load_bytes(blob)
    assert "duplicate" in str(exc.value)


def test_empty_and_tiny_files_rejected():
    for blob in (b"", b"MS", b"MSTD", b"MSTD\x01"):
        with pytest.raises(CheckpointError):
            ckpt.load_bytes(blob)


@settings(max_examples=80, deadline=None)
@given(st.integers(min_value=0, max_value=200))
def test_arbitrary_truncation_never_crashes(cut):
    blob = ckpt.save_bytes({"w": np.arange(12, dtype=np.float32).reshape(3, 4)})
    cut = min(cut, len(blob) - 1)
    try:
        ckpt.load_bytes(blob[:cut])
    except CheckpointError:
        pass  # the only acceptable failure mode


def test_model_checkpoint_roundtrip_preserves_forward(tmp_path):
    m = ModalityModel.build_unimodal(1, 10, [12, 6], 4, stream(3, "init/model/1"))
    x = [Tensor(RNG.normal(size=(5, 10)).astype(np.float32))]
    want = m(x).data
    path = tmp_path / "m1.ckpt"
    ckpt.save(path, ckpt.with_meta(m.state(), modality_index=1))
    weights, meta = ckpt.split_meta(ckpt.load(path))
    assert meta["modality_index"] == 1.0
    rebuilt = ModalityModel.from_state(weights, int(meta["modality_index"]))
    assert np.array_equal(rebuilt(x).data, want)
