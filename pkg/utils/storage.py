import json
import logging
import os
import time
from datetime import datetime

import numpy as np

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

FORMAT_VERSION = "rci-sysid/1"


def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    return value


def load_data(file_path):
    """Load data from a JSON file."""
    try:
        with open(file_path, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {file_path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{file_path} is not valid JSON: {e}")


def save_data(data, file_path):
    """Save data to a JSON file through a temp file and an atomic rename."""
    max_retries = 5
    retry_delay = 0.5

    directory = os.path.dirname(file_path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    for attempt in range(max_retries):
        try:
            temp_file = f"{file_path}.tmp"
            with open(temp_file, "w") as f:
                json.dump(_to_jsonable(data), f, indent=2)
            os.replace(temp_file, file_path)
            return
        except OSError as e:
            if attempt < max_retries - 1:
                time.sleep(retry_delay)
            else:
                logger.error("Failed to save data to %s: %s", file_path, e)
                raise


def save_artifact(path, stage, payload, config_hash, seed):
    """Write a stage artifact with the version header every model file carries."""
    artifact = {
        "version": FORMAT_VERSION,
        "stage": stage,
        "config_hash": config_hash,
        "seed": seed,
        "created_at": datetime.now().isoformat(),
    }
    artifact.update(payload)
    save_data(artifact, path)
    logger.info("Saved %s artifact to %s", stage, path)
    return path


def load_artifact(path, stage=None):
    """Read an artifact, checking the version and (optionally) the stage tag."""
    artifact = load_data(path)
    if not isinstance(artifact, dict) or artifact.get("version") != FORMAT_VERSION:
        found = artifact.get("version") if isinstance(artifact, dict) else None
        raise ConfigError(f"{path} is not an {FORMAT_VERSION} model file (version {found!r})")
    if stage is not None and artifact.get("stage") != stage:
        raise ConfigError(f"{path} holds stage {artifact.get('stage')!r}, expected {stage!r}")
    return artifact


def artifact_path(out_dir, stage):
    return os.path.join(out_dir, f"model_{stage}.json")
