import json
import math
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from config import DB_FILE
from errors import DataValidationError, ReleaseConflictError


def read_db(db_file: str = DB_FILE) -> Dict:
    """Read the entire ledger."""
    try:
        with open(db_file, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        return {"releases": [], "run_logs": []}


def write_db(data: Dict, db_file: str = DB_FILE):
    """Write the ledger."""
    with open(db_file, "w") as f:
        json.dump(data, f, indent=2)


# =============================================================================
# JSON ARTIFACTS
# =============================================================================

def json_safe(obj: Any) -> Any:
    """Plain-JSON version of obj: numpy to python, NaN/inf to None."""
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_safe(obj.tolist())
    if isinstance(obj, np.generic):
        return json_safe(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def artifact_text(obj: Any) -> str:
    """Canonical artifact encoding; identical inputs give identical bytes."""
    return json.dumps(json_safe(obj), indent=2, sort_keys=True) + "\n"


def dump_json(path: str, obj: Any):
    with open(path, "w") as f:
        f.write(artifact_text(obj))


def write_csv_artifact(path: str, frame, meta: Dict):
    """CSV with the run metadata as a leading '#' comment line."""
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(json_safe(meta), sort_keys=True) + "\n")
        frame.to_csv(f, index=False)


def load_json(path: str) -> Dict:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataValidationError(f"file not found: {path}", path=str(path))
    except json.JSONDecodeError as e:
        raise DataValidationError(f"{path} is not valid JSON: {e.msg}", path=str(path), line=e.lineno)


# =============================================================================
# RELEASES
# =============================================================================

def get_release(receipt_path: str, db_file: str = DB_FILE) -> Optional[Dict]:
    """Get the release recorded for an output path."""
    key = str(Path(receipt_path).resolve())
    db = read_db(db_file)
    for release in db.get("releases", []):
        if release["path"] == key:
            return release
    return None


def record_release(
    receipt_path: str,
    receipt: Dict,
    db_file: str = DB_FILE,
    write: Optional[Callable[[str], None]] = None,
) -> Dict:
    """Record a release. A second release to the same path is refused.

    With `write`, the artifact is written to a temporary sibling and moved
    into place first; the ledger entry is only added once it exists, so a
    failed write leaves the ledger untouched and the release can be retried.
    """
    key = str(Path(receipt_path).resolve())
    if Path(receipt_path).exists() or get_release(receipt_path, db_file):
        raise ReleaseConflictError("statistics were already released to this path", path=key)
    if write is not None:
        tmp = Path(key).with_name(Path(key).name + ".tmp")
        try:
            write(str(tmp))
            os.replace(tmp, key)
        except BaseException:
            if tmp.exists():
                tmp.unlink()
            raise
    db = read_db(db_file)
    db.setdefault("releases", [])
    new_id = max([r["id"] for r in db["releases"]], default=0) + 1
    release = {
        "id": new_id,
        "path": key,
        "receipt": json_safe(receipt),
        "timestamp": datetime.now().isoformat(),
    }
    db["releases"].append(release)
    write_db(db, db_file)
    return release


def get_all_releases(db_file: str = DB_FILE) -> List[Dict]:
    return read_db(db_file).get("releases", [])


# =============================================================================
# RUN LOG (timestamp sidecar)
# =============================================================================

def log_run(command: str, config: Dict, outputs: List[str], db_file: str = DB_FILE) -> Dict:
    """Log a CLI run. Timestamps live here, never in the artifacts."""
    db = read_db(db_file)
    db.setdefault("run_logs", [])
    new_id = max([log["id"] for log in db["run_logs"]], default=0) + 1
    run_log = {
        "id": new_id,
        "command": command,
        "config": json_safe(config),
        "outputs": [str(p) for p in outputs],
        "timestamp": datetime.now().isoformat(),
    }
    db["run_logs"].append(run_log)
    write_db(db, db_file)
    return run_log


def get_run_logs(command: Optional[str] = None, db_file: str = DB_FILE) -> List[Dict]:
    logs = read_db(db_file).get("run_logs", [])
    if command:
        logs = [log for log in logs if log["command"] == command]
    return logs
