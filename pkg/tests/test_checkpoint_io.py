"""체크포인트 형식"""

import numpy as np
import pytest

from app.core.errors import CheckpointFormatError, MissingArtifactError
from app.core.tensor import Tensor
from app.utils.checkpoint_io import (
    decode_checkpoint,
    encode_checkpoint,
    file_digest,
    load_checkpoint,
    save_checkpoint,
    tensors_digest,
)


@pytest.fixture
def tensors():
    return {
        "w": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([0.5, -0.25]),
        "idx": np.array([3, 1, 2]),
    }


def test_dtypes_and_values_survive(tmp_path, tensors):
    save_checkpoint(tmp_path / "a.ckpt", tensors, {"kind": "test", "n": 3})
    loaded, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"kind": "test", "n": 3}
    assert loaded["w"].dtype == np.float32 and loaded["b"].dtype == np.float64 and loaded["idx"].dtype == np.int64
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], arr)


def test_save_load_save_is_byte_identical(tmp_path, tensors):
    first = tmp_path / "first.ckpt"
    second = tmp_path / "second.ckpt"
    digest = save_checkpoint(first, tensors, {"kind": "test"})
    loaded, meta = load_checkpoint(first)
    assert save_checkpoint(second, loaded, meta) == digest
    assert first.read_bytes() == second.read_bytes()
    assert file_digest(first) == file_digest(second)


def test_tensor_inputs_are_accepted(tensors):
    as_tensors = {"w": Tensor(tensors["w"])}
    loaded, _ = decode_checkpoint(encode_checkpoint(as_tensors))
    assert loaded["w"].shape == (2, 3)


def test_digest_ignores_insertion_order(tensors):
    reordered = dict(reversed(list(tensors.items())))
    assert tensors_digest(tensors) == tensors_digest(reordered)
    changed = dict(tensors, b=np.array([0.5, -0.5]))
    assert tensors_digest(tensors) != tensors_digest(changed)


def test_missing_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "nope.ckpt")


@pytest.mark.parametrize("blob", [
    b"no newline here",
    b"{not json}\n",
    b'{"format":"other","tensors":[]}\n',
])
def test_malformed_headers(blob):
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(blob)


def test_truncated_payload(tensors):
    blob = encode_checkpoint(tensors)
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(blob[:-4])


def test_unsupported_dtype():
    with pytest.raises(CheckpointFormatError):
        encode_checkpoint({"s": np.array(["a"])})
