import logging

import numpy as np
import pytest

from app.autodiff import Tensor
from app.errors import DataError
from app.weights_io import (
    MAGIC,
    apply_weights,
    decode_weights,
    encode_weights,
    load_weights,
    save_weights,
)


def test_save_load_save_is_byte_identical(tmp_path, small_net):
    first = tmp_path / "a.satw"
    second = tmp_path / "b.satw"
    save_weights(str(first), small_net.params)
    save_weights(str(second), load_weights(str(first)))
    assert first.read_bytes() == second.read_bytes()


def test_layout_header():
    blob = encode_weights({"w": np.ones((2, 3), dtype=np.float32)})
    assert blob[:4] == MAGIC
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1
    assert len(blob) == 12 + 4 + 1 + 4 + 8 + 24


def test_values_survive_as_float32(rng):
    values = rng.standard_normal((3, 4)).astype(np.float32)
    loaded = decode_weights(encode_weights({"x": values}))
    np.testing.assert_array_equal(loaded["x"], values)
    assert loaded["x"].dtype == np.float32


def test_thousand_tensors_keep_shapes(rng):
    tensors = {f"t{i}": np.zeros(tuple(rng.integers(1, 4, size=i % 4)), dtype=np.float32) for i in range(1000)}
    loaded = decode_weights(encode_weights(tensors))
    assert list(loaded) == list(tensors)
    assert all(loaded[k].shape == v.shape for k, v in tensors.items())


def test_truncated_file_is_rejected(tmp_path):
    path = tmp_path / "w.satw"
    blob = encode_weights({"a": np.ones(5, dtype=np.float32), "b": np.ones(3, dtype=np.float32)})
    path.write_bytes(blob[:-3])
    with pytest.raises(DataError, match="truncated"):
        load_weights(str(path))


def test_bad_magic_and_version():
    blob = encode_weights({"a": np.ones(1, dtype=np.float32)})
    with pytest.raises(DataError, match="magic"):
        decode_weights(b"XXXX" + blob[4:])
    with pytest.raises(DataError, match="version"):
        decode_weights(blob[:4] + (2).to_bytes(4, "little") + blob[8:])


def test_missing_file():
    with pytest.raises(DataError):
        load_weights("/nonexistent/weights.satw")


def test_unknown_names_are_skipped(caplog):
    params = {"known": Tensor(np.zeros((2,)))}
    loaded = {"known": np.ones(2, dtype=np.float32), "stray": np.ones(1, dtype=np.float32)}
    with caplog.at_level(logging.WARNING):
        merged, skipped = apply_weights(params, loaded)
    assert list(skipped) == ["stray"]
    assert "stray" not in merged
    np.testing.assert_array_equal(merged["known"].data, [1.0, 1.0])
    assert merged["known"].dtype == np.float64
    assert "stray" in caplog.text


def test_shape_mismatch_is_an_error():
    with pytest.raises(DataError):
        apply_weights({"w": Tensor(np.zeros((2, 2)))}, {"w": np.zeros(4, dtype=np.float32)})
