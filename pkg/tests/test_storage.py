import json
import os

import numpy as np
import pytest

from utils import storage
from utils.errors import ConfigError


def test_save_data_writes_json_and_leaves_no_temp_file(tmp_path):
    path = tmp_path / "nested" / "data.json"
    assert storage.save_data({"a": np.arange(3), "b": np.float64(0.5)}, str(path)) is None
    assert json.loads(path.read_text()) == {"a": [0, 1, 2], "b": 0.5}
    assert not os.path.exists(f"{path}.tmp")


def test_save_data_overwrites_existing_file(tmp_path):
    path = str(tmp_path / "data.json")
    storage.save_data({"n": 1}, path)
    storage.save_data({"n": 2}, path)
    assert storage.load_data(path) == {"n": 2}


def test_load_data_errors_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        storage.load_data(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        storage.load_data(str(bad))


def test_artifact_header_and_stage_check(tmp_path):
    path = storage.artifact_path(str(tmp_path), "fit_lti")
    storage.save_artifact(path, "fit_lti", {"metrics": {"bfr_train": 90.0}}, "abc", 3)
    artifact = storage.load_artifact(path, "fit_lti")
    assert artifact["version"] == storage.FORMAT_VERSION
    assert (artifact["config_hash"], artifact["seed"]) == ("abc", 3)
    with pytest.raises(ConfigError):
        storage.load_artifact(path, "reduce")


def test_unversioned_file_is_rejected(tmp_path):
    path = tmp_path / "model_fit_lti.json"
    path.write_text(json.dumps({"stage": "fit_lti"}))
    with pytest.raises(ConfigError):
        storage.load_artifact(str(path))
