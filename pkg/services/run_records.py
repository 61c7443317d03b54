"""
Run Records

Append-only newline-delimited JSON artifacts:
- losses.jsonl: one LossRecord per optimization step
- manifests.jsonl: one ManifestRecord per training or evaluation run
"""

import json
import logging
import platform
import subprocess
import threading
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import torch

from config import Config
from config.contracts import FORMAT_TAG, LossRecord, ManifestRecord
from config.exceptions import CorruptRecordError
from config.schema import RunConfig, config_hash

logger = logging.getLogger(__name__)

# Manifest appends from concurrent runs in one process are serialized
_manifest_lock = threading.Lock()


class LossLogWriter:
    """Writes LossRecords as JSON lines; usable as a context manager."""

    def __init__(self, path: Union[str, Path], append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "a" if append else "w", encoding="utf-8")
        self.count = 0

    def write(self, record: LossRecord) -> None:
        self._handle.write(json.dumps(record, sort_keys=True) + "\n")
        self._handle.flush()
        self.count += 1

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def iter_records(path: Union[str, Path]) -> Iterator[Dict[str, Any]]:
    """
    Yield the JSON objects of a newline-delimited log.

    Raises:
        CorruptRecordError: On a line that is not a JSON object (offset = line number)
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorruptRecordError(path, line_no, f"invalid JSON ({e.msg})") from e
            if not isinstance(record, dict):
                raise CorruptRecordError(path, line_no, "record is not an object")
            yield record


def read_loss_log(path: Union[str, Path]) -> List[LossRecord]:
    return list(iter_records(path))


def code_hash() -> Optional[str]:
    """Commit hash of the working tree, or None outside a git checkout."""
    try:
        result = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.TimeoutExpired):
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip() or None


def environment_summary() -> Dict[str, Any]:
    summary = Config.get_summary()
    summary.update(
        python=platform.python_version(),
        torch=torch.__version__,
        platform=platform.platform(),
    )
    return summary


def start_manifest(command: str, cfg: RunConfig, seed: int) -> ManifestRecord:
    """Open (in memory) the manifest of a run; it is written once by finish_manifest."""
    return ManifestRecord(
        format=FORMAT_TAG,
        run_id=uuid.uuid4().hex[:12],
        command=command,
        config=cfg.to_dict(),
        config_hash=config_hash(cfg),
        code_hash=code_hash(),
        seed=int(seed),
        started_at=_now(),
        finished_at=None,
        status="running",
        artifacts={},
        environment=environment_summary(),
    )


def finish_manifest(manifest: ManifestRecord, out_dir: Union[str, Path], status: str = "completed",
                    artifacts: Optional[Dict[str, Union[str, Path]]] = None) -> Path:
    """
    Stamp the end time, attach artifact paths and append the manifest.

    Returns:
        Path of manifests.jsonl
    """
    manifest["finished_at"] = _now()
    manifest["status"] = status
    manifest["artifacts"].update({name: str(p) for name, p in (artifacts or {}).items()})

    path = Path(out_dir) / Config.MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with _manifest_lock:
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps(manifest, sort_keys=True) + "\n")
    logger.info(f"[Manifest] {manifest['command']} run {manifest['run_id']} {status}")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()
