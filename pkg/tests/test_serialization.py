import json

import numpy as np
import pytest

from trojanscope import nn
from trojanscope.errors import ModelFormatError, ModelVersionError
from trojanscope.serialization import load_model, save_model


@pytest.fixture
def model():
    m = nn.build_model("cnn_s", (1, 12, 12), 4, seed=7, hidden=6)
    m.meta["note"] = "probe"
    return m


def test_round_trip_is_bit_identical(model, tmp_path):
    save_model(model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.arch_id == model.arch_id and back.input_shape == model.input_shape
    assert back.layers == model.layers and back.meta == model.meta and back.seed == model.seed
    for a, b in zip(model.params, back.params):
        for k in a:
            assert np.array_equal(a[k], b[k])
    x = np.random.default_rng(0).uniform(size=(5, 1, 12, 12))
    assert np.array_equal(nn.forward(model, x), nn.forward(back, x))


def test_weights_file_is_little_endian_float32(model, tmp_path):
    save_model(model, tmp_path / "m")
    manifest = json.loads((tmp_path / "m" / "manifest").read_text())
    blob = (tmp_path / "m" / "weights.bin").read_bytes()
    first = manifest["tensors"][0]
    values = np.frombuffer(blob[first["offset"]:first["offset"] + first["length"]], dtype="<f4")
    np.testing.assert_array_equal(values.reshape(first["shape"]), model.params[first["layer"]][first["name"]])
    assert sum(t["length"] for t in manifest["tensors"]) == len(blob)


def test_truncated_weights_report_offset(model, tmp_path):
    save_model(model, tmp_path / "m")
    w = tmp_path / "m" / "weights.bin"
    w.write_bytes(w.read_bytes()[:-10])
    with pytest.raises(ModelFormatError, match="byte offset"):
        load_model(tmp_path / "m")


def test_unknown_layer_kind_is_named(model, tmp_path):
    save_model(model, tmp_path / "m")
    mf = tmp_path / "m" / "manifest"
    manifest = json.loads(mf.read_text())
    manifest["layers"][1]["kind"] = "maxpool"
    mf.write_text(json.dumps(manifest))
    with pytest.raises(ModelFormatError, match="maxpool"):
        load_model(tmp_path / "m")


def test_version_mismatch(model, tmp_path):
    save_model(model, tmp_path / "m")
    mf = tmp_path / "m" / "manifest"
    manifest = json.loads(mf.read_text())
    manifest["format_version"] = 2
    mf.write_text(json.dumps(manifest))
    with pytest.raises(ModelVersionError):
        load_model(tmp_path / "m")


def test_corrupt_manifest_and_missing_dir(model, tmp_path):
    save_model(model, tmp_path / "m")
    (tmp_path / "m" / "manifest").write_text("{not json")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "m")
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "absent")
