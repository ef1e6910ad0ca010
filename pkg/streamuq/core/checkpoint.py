"""
Checkpoint Files

Models are stored as `.npz` archives readable with `numpy.load`. Unlike
`numpy.savez` the writer pins every zip entry timestamp, so the same state
always produces the same bytes. Non-array metadata travels as a JSON
document in the `__meta__` entry.
"""

import json
import logging
import zipfile
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from core.errors import DataError, UsageError
from core.resilience import with_retry_sync

logger = logging.getLogger(__name__)

META_KEY = "__meta__"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


@with_retry_sync(max_attempts=3)
def write_npz(path: Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = dict(arrays)
    entries[META_KEY] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with zipfile.ZipFile(path, mode="w", compression=zipfile.ZIP_STORED) as archive:
        for name, value in entries.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_FIXED_DATE)
            info.external_attr = 0o644 << 16
            with archive.open(info, mode="w", force_zip64=True) as handle:
                np.lib.format.write_array(handle, np.ascontiguousarray(value), allow_pickle=False)
    logger.debug(f"💾 [Checkpoint] Wrote {len(entries)} entries to {path}")
    return path


def read_npz(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise DataError(f"unreadable checkpoint {path}: {e}") from e
    if META_KEY not in arrays:
        raise DataError(f"checkpoint {path} has no {META_KEY} entry")
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    return arrays, meta
