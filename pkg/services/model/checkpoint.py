"""
Checkpoint Container

Layout:
    DISRO1\\n                         magic header (7 bytes)
    <8-byte big-endian length>       size of the metadata block
    <metadata JSON, UTF-8>           config, epoch, seed, config/code hash, tag
    <torch.save payload>             {"components": {name: state_dict}, "train_state": ...}

Loading verifies the header and rebuilds the bundle from the stored config, so a
checkpoint is self-describing.
"""

import io
import json
import logging
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch

from config.contracts import FORMAT_TAG
from config.exceptions import CheckpointError, ConfigurationError
from config.schema import RunConfig, config_from_dict, config_hash
from services.model.bundle import ModelBundle

logger = logging.getLogger(__name__)

MAGIC = (FORMAT_TAG + "\n").encode("ascii")
COMPONENTS = ("extractor", "encoders", "classifier", "discriminator", "reconstructor")


def save_checkpoint(path: Union[str, Path], bundle: ModelBundle, config: RunConfig, *,
                    epoch: int, tag: str = "", variant: str = "disentangle",
                    code_hash: Optional[str] = None, metrics: Optional[Dict[str, float]] = None,
                    train_state: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write a bundle (and optionally the trainer state) to a DISRO1 container.

    The file is written to a sibling temp path and renamed into place.

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    metadata = {
        "format": FORMAT_TAG,
        "tag": tag,
        "variant": variant,
        "epoch": int(epoch),
        "seed": int(config.train.seed),
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "code_hash": code_hash,
        "metrics": metrics or {},
        "has_train_state": train_state is not None,
        "saved_at": datetime.now(timezone.utc).isoformat(),
    }
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")

    payload = io.BytesIO()
    torch.save({
        "components": {name: getattr(bundle, name).state_dict() for name in COMPONENTS},
        "train_state": train_state,
    }, payload)

    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack(">Q", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(payload.getvalue())
    tmp_path.replace(path)
    logger.debug(f"Saved checkpoint {path} (epoch {epoch}, tag {tag or '-'})")
    return path


def read_metadata(path: Union[str, Path]) -> Dict[str, Any]:
    """Read only the metadata block."""
    with open(path, "rb") as f:
        metadata, _ = _read_header(f, Path(path))
    return metadata


def load_checkpoint(path: Union[str, Path], map_location: Union[str, torch.device] = "cpu"
                    ) -> Tuple[ModelBundle, Dict[str, Any], Optional[Dict[str, Any]]]:
    """
    Load a DISRO1 container.

    Returns:
        (bundle in eval mode, metadata, train_state or None)

    Raises:
        CheckpointError: Missing file, bad header, or parameter blobs that do not
            match the stored config
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")

    with open(path, "rb") as f:
        metadata, _ = _read_header(f, path)
        blob = f.read()

    try:
        config = config_from_dict(metadata["config"])
    except (ConfigurationError, KeyError) as e:
        raise CheckpointError(f"Checkpoint {path} carries an invalid config: {e}") from e

    try:
        payload = torch.load(io.BytesIO(blob), map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Checkpoint {path}: parameter payload unreadable: {e}") from e

    bundle = ModelBundle(config.model)
    try:
        for name in COMPONENTS:
            getattr(bundle, name).load_state_dict(payload["components"][name])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"Checkpoint {path}: component blobs do not match config: {e}") from e
    bundle.to(map_location)
    bundle.eval()
    return bundle, metadata, payload.get("train_state")


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """The RunConfig a checkpoint was trained with."""
    return config_from_dict(read_metadata(path)["config"])


def _read_header(f, path: Path) -> Tuple[Dict[str, Any], int]:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a {FORMAT_TAG} checkpoint (header {magic!r})")
    size_bytes = f.read(8)
    if len(size_bytes) != 8:
        raise CheckpointError(f"{path}: truncated metadata length")
    size, = struct.unpack(">Q", size_bytes)
    raw = f.read(size)
    if len(raw) != size:
        raise CheckpointError(f"{path}: truncated metadata block")
    try:
        metadata = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: metadata block is not valid JSON: {e}") from e
    if metadata.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path}: format tag {metadata.get('format')!r} != {FORMAT_TAG}")
    return metadata, len(MAGIC) + 8 + size
