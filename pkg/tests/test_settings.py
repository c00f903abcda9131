# tests/test_settings.py
import os

import pytest
import yaml

from app.settings import build_train_config, load_config
from app.utils import ValidationError, configure_runtime, thread_cap

SHIPPED = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config.yaml")


def _write(tmp_path, payload) -> str:
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(payload), encoding="utf-8")
    return str(path)


def test_shipped_config_loads():
    cfg = load_config(SHIPPED)
    assert cfg.train.t3 == 3000
    assert cfg.train.field.hidden == 64
    assert cfg.simulate.sigma == pytest.approx(0.9142)
    assert cfg.mesh.resolution == 256
    assert cfg.train.lambda_free == 0.5
    assert cfg.out_dir == "data"


def test_partial_file_keeps_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, {"train": {"t1": 5, "t2": 6, "t3": 7, "field": {"hidden": 8}}}))
    assert (cfg.train.t1, cfg.train.t3) == (5, 7)
    assert cfg.train.field.hidden == 8
    assert cfg.train.field.n_levels == 16
    assert cfg.eval.include_ps is True


def test_unknown_keys_are_named(tmp_path):
    with pytest.raises(ValidationError, match="unknown key train.lambda9"):
        load_config(_write(tmp_path, {"train": {"lambda9": 1.0}}))
    with pytest.raises(ValidationError, match="unknown config section 'render'"):
        load_config(_write(tmp_path, {"render": {}}))
    with pytest.raises(ValidationError, match="train.field.depth"):
        load_config(_write(tmp_path, {"train": {"field": {"depth": 3}}}))


def test_invalid_values_and_files(tmp_path):
    with pytest.raises(ValidationError, match="mesh.resolution"):
        load_config(_write(tmp_path, {"mesh": {"resolution": 4}}))
    with pytest.raises(ValidationError, match="not found"):
        load_config(str(tmp_path / "missing.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [1, 2\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="invalid YAML"):
        load_config(str(bad))


def test_cli_overrides_win_over_file_values():
    cfg = build_train_config({"seed": 3, "ablation": "none"}, seed=9, ablation=None)
    assert cfg.seed == 9
    assert cfg.ablation == "none"


def test_config_round_trips_through_its_dict_form():
    cfg = load_config(SHIPPED)
    again = build_train_config(cfg.train.to_dict())
    assert again == cfg.train


def test_thread_cap_from_environment(monkeypatch):
    monkeypatch.setenv("NFSEM_THREADS", "2")
    assert thread_cap() == 2
    monkeypatch.setenv("NFSEM_THREADS", "zero")
    with pytest.raises(ValidationError, match="integer"):
        thread_cap()
    monkeypatch.setenv("NFSEM_THREADS", "0")
    with pytest.raises(ValidationError):
        thread_cap()


def test_runtime_generator_is_seeded(monkeypatch):
    monkeypatch.setenv("NFSEM_THREADS", "1")
    a = configure_runtime(5)
    b = configure_runtime(5)
    assert a.initial_seed() == b.initial_seed() == 5
