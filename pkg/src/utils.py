import hashlib
import json
import os
from datetime import datetime, timezone
from typing import Any, Dict, Tuple
import numpy as np
import pandas as pd
from src.config import SCHEMA_VERSION
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def config_hash(config: Dict[str, Any]) -> str:
    """Stable short hash of a run configuration."""
    payload = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def provenance(config: Dict[str, Any]) -> Dict[str, Any]:
    return {"seed": config.get("seed"), "config_hash": config_hash(config)}


def write_frame(frame: pd.DataFrame, output_path: str, config: Dict[str, Any]) -> str:
    """
    Write a CSV whose first line is a '#' comment carrying seed and config
    hash. Floats use round-trip precision.
    """
    try:
        logger.debug(f"Writing {len(frame)} rows to {output_path}")
        if os.path.dirname(output_path):
            os.makedirs(os.path.dirname(output_path), exist_ok=True)
        header = json.dumps(provenance(config), sort_keys=True)
        with open(output_path, "w", encoding="utf-8", newline="") as handle:
            handle.write(f"# {header}\n")
            frame.to_csv(handle, index=False, float_format="%.17g")
        logger.info({"rows": len(frame), "message": f"CSV written to {output_path}"})
        return output_path
    except OSError as e:
        logger.error({"error": str(e), "message": f"Failed to write {output_path}"})
        raise


def read_frame(path: str) -> pd.DataFrame:
    """Read a CSV written by write_frame."""
    return pd.read_csv(path, comment="#")


def write_summary(summary: Dict[str, Any], output_path: str, config: Dict[str, Any]) -> str:
    """JSON summary with schema version, config echo, provenance and a timestamp."""
    try:
        logger.debug(f"Writing summary to {output_path}")
        if os.path.dirname(output_path):
            os.makedirs(os.path.dirname(output_path), exist_ok=True)
        document = {
            "schema": SCHEMA_VERSION,
            **provenance(config),
            "config": _jsonable(config),
            "created": datetime.now(timezone.utc).isoformat(),
            "summary": _jsonable(summary),
        }
        with open(output_path, "w", encoding="utf-8") as handle:
            json.dump(document, handle, indent=2, sort_keys=True)
            handle.write("\n")
        logger.info({"message": f"Summary written to {output_path}"})
        return output_path
    except OSError as e:
        logger.error({"error": str(e), "message": f"Failed to write {output_path}"})
        raise


def read_summary(path: str) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Return (summary, full document) of a JSON summary file."""
    with open(path, encoding="utf-8") as handle:
        document = json.load(handle)
    return document["summary"], document
