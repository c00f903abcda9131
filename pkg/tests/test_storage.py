# tests/test_storage.py
import json
import os

import numpy as np
import pytest
import torch

from app import storage
from app.field import new_field_params
from app.scenes import default_phi_bar
from app.utils import ValidationError


def test_map_header_and_layouts(tmp_path):
    path = str(tmp_path / "normal.map")
    values = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    storage.write_map(path, values, layout="hwc")
    header = storage.read_map_header(path)
    assert header == {"magic": "NFSEM-MAP", "dtype": "<f4", "height": 2, "width": 3, "channels": 3, "layout": "hwc"}
    assert np.array_equal(storage.read_map(path), values)

    chw = str(tmp_path / "shadow.map")
    storage.write_map(chw, np.ones((4, 2, 5)), layout="chw")
    assert storage.read_map_header(chw)["channels"] == 4
    assert storage.read_map(chw).shape == (4, 2, 5)


def test_map_keeps_nan(tmp_path):
    path = str(tmp_path / "depth.map")
    values = np.array([[1.5, np.nan], [np.nan, -2.0]], dtype=np.float32)
    storage.write_map(path, values)
    assert np.array_equal(storage.read_map(path), values, equal_nan=True)


def test_truncated_or_foreign_maps_are_rejected(tmp_path):
    path = str(tmp_path / "depth.map")
    storage.write_map(path, np.zeros((4, 4)))
    with open(path, "r+b") as f:
        f.truncate(os.path.getsize(path) - 4)
    with pytest.raises(ValidationError, match="expected 64 bytes"):
        storage.read_map(path)

    foreign = tmp_path / "other.map"
    foreign.write_bytes(b'{"magic": "XYZ", "dtype": "<f4", "layout": "hw"}\n')
    with pytest.raises(ValidationError, match="magic"):
        storage.read_map(str(foreign))
    with pytest.raises(ValidationError):
        storage.write_map(str(tmp_path / "bad.map"), np.zeros(3))


def test_png_quantises_to_bytes(tmp_path):
    path = str(tmp_path / "bse_A.png")
    storage.write_png(path, np.array([[-3.0, 12.4], [12.6, 300.0]]))
    assert storage.read_png(path).tolist() == [[0.0, 12.0], [13.0, 255.0]]


def test_unreadable_json_is_moved_aside(tmp_path):
    path = tmp_path / "phi.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ValidationError, match="not valid JSON"):
        storage.load_json(str(path))
    assert not path.exists()
    assert (tmp_path / "phi.json.corrupt").exists()


def test_jsonl_append_and_read(tmp_path):
    path = str(tmp_path / "log" / "train_log.jsonl")
    storage.append_jsonl(path, {"step": 1, "loss": 0.5})
    storage.append_jsonl(path, {"step": 2, "loss": 0.25})
    assert [r["step"] for r in storage.read_jsonl(path)] == [1, 2]


def test_dataset_round_trip_is_exact(sphere_dataset, tmp_path):
    root = str(tmp_path / "ds")
    manifest_path = storage.save_dataset(sphere_dataset, root)
    assert os.path.basename(manifest_path) == "manifest.json"
    loaded = storage.load_dataset(root)

    assert loaded.scene == "sphere"
    assert loaded.scene_scale == sphere_dataset.scene_scale
    assert torch.equal(loaded.phi_bar.c, sphere_dataset.phi_bar.c)
    for a, b in zip(sphere_dataset.views, loaded.views):
        assert a.index == b.index
        assert np.array_equal(a.camera.pose, b.camera.pose)
        assert np.array_equal(a.bse, b.bse)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.confidence, b.confidence)
        assert np.array_equal(a.gt_depth, b.gt_depth, equal_nan=True)
        assert np.array_equal(a.gt_normal, b.gt_normal, equal_nan=True)
        assert np.array_equal(a.gt_shadow, b.gt_shadow)


def _saved(sphere_dataset, tmp_path):
    root = str(tmp_path / "ds")
    storage.save_dataset(sphere_dataset, root)
    with open(os.path.join(root, "manifest.json"), encoding="utf-8") as f:
        return root, json.load(f)


def test_manifest_rejects_unknown_fields(sphere_dataset, tmp_path):
    root, manifest = _saved(sphere_dataset, tmp_path)
    manifest["views"][0]["exposure"] = 3
    storage.write_json_atomic(os.path.join(root, "manifest.json"), manifest)
    with pytest.raises(ValidationError, match="exposure"):
        storage.load_dataset(root)


def test_manifest_rejects_missing_images(sphere_dataset, tmp_path):
    root, manifest = _saved(sphere_dataset, tmp_path)
    os.remove(os.path.join(root, manifest["views"][1]["files"]["bse"]["C"]))
    with pytest.raises(ValidationError, match="missing file"):
        storage.load_dataset(root)


def test_manifest_rejects_duplicate_views_and_bad_poses(sphere_dataset, tmp_path):
    root, manifest = _saved(sphere_dataset, tmp_path)
    dup = json.loads(json.dumps(manifest))
    dup["views"][1]["index"] = dup["views"][0]["index"]
    storage.write_json_atomic(os.path.join(root, "manifest.json"), dup)
    with pytest.raises(ValidationError, match="more than once"):
        storage.load_manifest(root)

    skew = json.loads(json.dumps(manifest))
    skew["views"][0]["pose"][0] = 3.0
    storage.write_json_atomic(os.path.join(root, "manifest.json"), skew)
    with pytest.raises(ValidationError, match="orthonormal"):
        storage.load_manifest(root)


def test_manifest_rejects_wrong_image_size(sphere_dataset, tmp_path):
    root, manifest = _saved(sphere_dataset, tmp_path)
    storage.write_map(os.path.join(root, manifest["views"][0]["files"]["depth"]), np.zeros((5, 5)))
    with pytest.raises(ValidationError, match="expected 18x24"):
        storage.load_dataset(root)


def test_field_checkpoint_round_trip_and_digest(tiny_spec, tmp_path):
    params = new_field_params(tiny_spec, seed=3)
    path = str(tmp_path / "field.ckpt")
    digest = storage.save_field_checkpoint(path, params)
    assert digest == storage.field_digest(params)
    back = storage.load_field_checkpoint(path)
    assert back.spec == params.spec
    assert torch.equal(back.to_vector(), params.to_vector())
    assert storage.field_digest(back) == digest


def test_tampered_checkpoint_is_rejected(tiny_spec, tmp_path):
    path = str(tmp_path / "field.ckpt")
    storage.save_field_checkpoint(path, new_field_params(tiny_spec))
    with open(path, "r+b") as f:
        f.seek(-4, os.SEEK_END)
        f.write(b"\x00\x00\x80\x7f")
    with pytest.raises(ValidationError, match="digest"):
        storage.load_field_checkpoint(path)


def test_phi_file_round_trip_and_schema(tmp_path):
    path = str(tmp_path / "phi.json")
    phi = default_phi_bar()
    storage.save_phi(path, phi)
    back = storage.load_phi(path)
    assert torch.equal(back.p, phi.p)
    assert back.emission == "poly"

    storage.write_json_atomic(path, {"c": [1, 2, 3], "d": [1] * 4, "e": [0] * 4, "p": [0] * 4})
    with pytest.raises(ValidationError):
        storage.load_phi(path)


def test_save_manifest_refuses_invalid_content(sphere_dataset, tmp_path):
    root, manifest = _saved(sphere_dataset, tmp_path)
    del manifest["views"][0]["files"]["depth"]
    with pytest.raises(ValidationError, match="views/0/files"):
        storage.save_manifest(root, manifest)
