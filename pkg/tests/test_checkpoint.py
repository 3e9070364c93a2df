import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from etherkit import adapters as A
from etherkit import harness as H
from etherkit.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_adapter_tensors,
    load_checkpoint,
    model_tensors,
    save_checkpoint,
)
from etherkit.errors import CheckpointFormatError


def test_empty_map_is_twelve_bytes(tmp_path):
    path = tmp_path / "empty.etck"
    save_checkpoint(path, {})
    assert path.read_bytes() == b"ETCK" + struct.pack("<II", 1, 0)
    assert load_checkpoint(path) == {}


def test_layout_is_bit_exact():
    blob = encode_checkpoint({"ab": np.array([[1.0, 2.0, 3.0]])})
    expected = (b"ETCK" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab" + bytes([0, 2])
                + struct.pack("<QQ", 1, 3) + struct.pack("<3d", 1.0, 2.0, 3.0))
    assert blob == expected


def test_save_load_save_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"w": rng.standard_normal((3, 5)), "scalar": np.array(2.5), "ünïcode": rng.standard_normal(4),
               "empty": np.zeros((0, 3)), "cube": rng.standard_normal((2, 2, 2))}
    first, second = tmp_path / "a.etck", tmp_path / "b.etck"
    save_checkpoint(first, tensors)
    loaded = load_checkpoint(first)
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert loaded[k].shape == tensors[k].shape and loaded[k].tobytes() == tensors[k].tobytes()
    save_checkpoint(second, loaded)
    assert first.read_bytes() == second.read_bytes()


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.text(min_size=0, max_size=12),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4),
                              elements=st.floats(allow_nan=True, allow_infinity=True)),
                       max_size=4))
def test_roundtrip_property(tensors):
    blob = encode_checkpoint(tensors)
    back = decode_checkpoint(blob)
    assert encode_checkpoint(back) == blob


def test_bad_magic():
    blob = bytearray(encode_checkpoint({}))
    blob[:4] = b"NOPE"
    with pytest.raises(CheckpointFormatError) as info:
        decode_checkpoint(bytes(blob))
    assert info.value.offset == 0


def test_bad_version():
    blob = b"ETCK" + struct.pack("<II", 2, 0)
    with pytest.raises(CheckpointFormatError, match="version") as info:
        decode_checkpoint(blob)
    assert info.value.offset == 4


def test_truncated_header():
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(b"ETCK\x01\x00")


def test_truncated_payload_names_tensor():
    blob = encode_checkpoint({"first": np.ones(2), "second": np.ones((3, 3))})
    with pytest.raises(CheckpointFormatError, match="'second'") as info:
        decode_checkpoint(blob[:-5])
    assert info.value.offset == len(blob) - 72


def test_corrupted_dims_name_tensor():
    blob = bytearray(encode_checkpoint({"weights": np.ones((2, 2))}))
    dims_at = 12 + 2 + len("weights") + 2
    blob[dims_at:dims_at + 8] = struct.pack("<Q", 1000)
    with pytest.raises(CheckpointFormatError, match="weights"):
        decode_checkpoint(bytes(blob))


def test_trailing_bytes_and_unknown_dtype():
    blob = encode_checkpoint({"x": np.ones(1)})
    with pytest.raises(CheckpointFormatError, match="trailing"):
        decode_checkpoint(blob + b"\x00")
    bad = bytearray(blob)
    bad[12 + 2 + 1] = 7
    with pytest.raises(CheckpointFormatError, match="dtype"):
        decode_checkpoint(bytes(bad))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 255))
def test_fuzz_single_byte_corruption_never_crashes(pos, value):
    blob = bytearray(encode_checkpoint({"a": np.arange(3.0), "bb": np.eye(2)}))
    blob[pos % len(blob)] = value
    try:
        decode_checkpoint(bytes(blob))
    except CheckpointFormatError:
        pass


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = tmp_path / "x.etck"
    save_checkpoint(path, {"a": np.ones(2)})
    save_checkpoint(path, {"a": np.zeros(2)})
    assert os.listdir(tmp_path) == ["x.etck"]
    assert np.array_equal(load_checkpoint(path)["a"], np.zeros(2))


def test_unwritable_directory(tmp_path):
    with pytest.raises(OSError):
        save_checkpoint(tmp_path / "missing" / "x.etck", {})


@pytest.mark.parametrize("method", A.METHODS)
def test_adapter_roundtrip_for_every_variant(tmp_path, task, pretrained, method):
    run = H.finetune(pretrained, H.AdapterConfig(method, n=2), task, 1e-2, 1, 0, optimizer="adam", keep_model=True)
    path = tmp_path / f"{method}.etck"
    save_checkpoint(path, model_tensors(run.model))
    fresh = pretrained.with_adapters(H.AdapterConfig(method, n=2), seed=99)
    load_adapter_tensors(fresh, load_checkpoint(path))
    x = H.make_task_data(task).probes
    assert fresh(x).data.tobytes() == run.model(x).data.tobytes()
    again = tmp_path / "again.etck"
    save_checkpoint(again, model_tensors(fresh))
    assert again.read_bytes() == path.read_bytes()
