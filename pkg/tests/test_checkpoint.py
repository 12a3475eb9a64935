"""Binary checkpoint format: round trips, corruption, and atomicity."""

import json

import numpy as np
import pytest

from camnet.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from camnet.errors import CheckpointError


def sample_params(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "backbone.stem.weight": rng.normal(size=(4, 1, 3, 3)).astype(np.float32),
        "backbone.head.bias": rng.normal(size=(2,)).astype(np.float32),
        "attention.post1.weight": rng.normal(size=(3, 2, 3, 3)).astype(np.float32),
    }


def test_round_trip_preserves_every_array_and_the_metadata(tmp_path):
    path = tmp_path / "model.ckpt"
    params = sample_params()
    config = {"backbone": {"num_classes": 2}, "seed": 7}
    meta = {"phase": 3, "val_auc": 0.91}
    save_checkpoint(path, params, config=config, meta=meta)
    loaded, got_config, got_meta = load_checkpoint(path)
    assert sorted(loaded) == sorted(params)
    for name in params:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name], params[name]), name
    assert got_config == config
    assert got_meta == meta


def test_same_params_write_byte_identical_files(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, sample_params(), config={"seed": 1})
    save_checkpoint(b, sample_params(), config={"seed": 1})
    assert a.read_bytes() == b.read_bytes()


def test_insertion_order_does_not_change_the_file(tmp_path):
    params = sample_params()
    reversed_params = dict(reversed(list(params.items())))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, params)
    save_checkpoint(b, reversed_params)
    assert a.read_bytes() == b.read_bytes()


def test_loaded_arrays_own_their_memory(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, sample_params())
    loaded, _, _ = load_checkpoint(path)
    arr = loaded["backbone.head.bias"]
    arr[0] = 123.0  # must not blow up on a read-only buffer view


def test_missing_file_is_reported(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_truncated_files_are_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, sample_params())
    raw = path.read_bytes()
    for cut in (2, 10, len(raw) - 5):
        clipped = tmp_path / f"cut{cut}.ckpt"
        clipped.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(clipped)


def test_malformed_header_is_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    garbage = b"{not json"
    path.write_bytes(np.array(len(garbage), dtype="<u4").tobytes() + garbage)
    with pytest.raises(CheckpointError, match="malformed header"):
        load_checkpoint(path)


def test_unknown_format_version_is_rejected(tmp_path):
    header = json.dumps({"format_version": FORMAT_VERSION + 1,
                         "params": []}).encode()
    path = tmp_path / "future.ckpt"
    path.write_bytes(np.array(len(header), dtype="<u4").tobytes() + header)
    with pytest.raises(CheckpointError, match="format version"):
        load_checkpoint(path)


def test_no_temp_file_survives_a_successful_save(tmp_path):
    save_checkpoint(tmp_path / "model.ckpt", sample_params())
    assert [p.name for p in tmp_path.iterdir()] == ["model.ckpt"]


def test_higher_precision_params_are_stored_as_float32(tmp_path):
    path = tmp_path / "model.ckpt"
    params = {"w": np.array([1.0, 2.0], dtype=np.float64)}
    save_checkpoint(path, params)
    loaded, _, _ = load_checkpoint(path)
    assert loaded["w"].dtype == np.float32
    assert np.array_equal(loaded["w"], params["w"].astype(np.float32))
