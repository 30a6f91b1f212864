import hashlib
import json
import logging
import math
import zlib
from datetime import datetime
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import BaseModel

logger = logging.getLogger(__name__)


class ReportJSONEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return clean_report_data(float(obj))
        elif isinstance(obj, np.ndarray):
            return clean_report_data(obj.tolist())
        elif isinstance(obj, BaseModel):
            return clean_report_data(obj.model_dump(mode="json"))
        elif isinstance(obj, (datetime, Path)):
            return str(obj)
        return super().default(obj)


def clean_report_data(data):
    """
    Make report data JSON-safe: numpy scalars and arrays become plain Python
    values, NaN/infinity become None, pydantic models are dumped, and every
    mapping key becomes a string.
    """
    if data is None:
        return None

    if isinstance(data, BaseModel):
        return clean_report_data(data.model_dump(mode="json"))

    if isinstance(data, dict):
        return {str(k): clean_report_data(v) for k, v in data.items()}

    elif isinstance(data, (list, tuple)):
        return [clean_report_data(item) for item in data]

    elif isinstance(data, np.ndarray):
        return clean_report_data(data.tolist())

    elif isinstance(data, (bool, np.bool_)):
        return bool(data)

    elif isinstance(data, (np.integer,)):
        return int(data)

    elif isinstance(data, (float, np.floating)):
        data = float(data)
        if math.isnan(data) or math.isinf(data):
            return None
        return data

    elif isinstance(data, (datetime, Path)):
        return str(data)

    # strings, ints
    return data


def dump_json(data) -> str:
    """Canonical JSON: sorted keys, fixed separators, trailing newline."""
    return json.dumps(clean_report_data(data), sort_keys=True, indent=2, cls=ReportJSONEncoder) + "\n"


def config_hash(config: Union[BaseModel, dict]) -> str:
    """SHA-256 of the canonical JSON form; key order does not matter."""
    payload = config.model_dump(mode="json") if isinstance(config, BaseModel) else config
    canonical = json.dumps(clean_report_data(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _spawn_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode("utf-8")) & 0xFFFFFFFF


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for the stream named by `keys` under the master seed."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(_spawn_key(k) for k in keys))
    return np.random.default_rng(sequence)


def derive_seed(seed: int, *keys) -> int:
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(_spawn_key(k) for k in keys))
    return int(sequence.generate_state(1)[0])
