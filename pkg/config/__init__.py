"""
Centralized Configuration Module
Single source of truth for environment-level settings with validation.
Run-level settings (datasets, attacks, training) live in config.schema.
"""

import os
import logging
from pathlib import Path
from typing import Optional, Dict, Any

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass  # python-dotenv not installed, rely on the process environment

logger = logging.getLogger(__name__)


# Import exceptions from dedicated module
from config.exceptions import ConfigurationError


class Config:
    """Single source of truth for environment configuration"""

    # ============================================================
    # DATA PATHS
    # ============================================================

    # Dataset root (CIFAR-10 binary batches, image folders)
    _DATA_DIR = os.getenv("DISRO_DATA_DIR") or "data"
    DATA_DIR = Path(_DATA_DIR)
    CIFAR10_DIR = DATA_DIR / "cifar-10-batches-bin"

    # Run outputs: checkpoints, logs, reports, manifests
    _OUT_DIR = os.getenv("DISRO_OUT_DIR") or "runs"
    OUT_DIR = Path(_OUT_DIR)

    # Default config shipped with the repository
    DEFAULT_CONFIG_PATH = Path(__file__).parent / "disro_config.yaml"

    # ============================================================
    # RUNTIME
    # ============================================================

    DEVICE = (os.getenv("DISRO_DEVICE") or "auto").lower()
    LOG_LEVEL = (os.getenv("DISRO_LOG_LEVEL") or "INFO").upper()

    _num_threads_raw = os.getenv("DISRO_NUM_THREADS")
    NUM_THREADS = int(_num_threads_raw) if _num_threads_raw and _num_threads_raw.isdigit() else None

    # ============================================================
    # FILE LAYOUT INSIDE A RUN DIRECTORY
    # ============================================================

    CHECKPOINT_SUBDIR = "checkpoints"
    LOSS_LOG_NAME = "losses.jsonl"
    MANIFEST_NAME = "manifests.jsonl"
    LOG_FILE_NAME = "disro.log"

    # ============================================================
    # VALIDATION
    # ============================================================

    @classmethod
    def validate(cls, out_dir: Optional[Path] = None) -> bool:
        """
        Validate environment configuration at startup.
        Raises ConfigurationError if validation fails.

        Args:
            out_dir: Run output directory override (defaults to Config.OUT_DIR)
        """
        errors = []
        warnings = []

        if cls.DEVICE not in ("auto", "cpu", "cuda"):
            errors.append(f"DISRO_DEVICE ({cls.DEVICE}) must be one of auto, cpu, cuda")
        elif cls.DEVICE == "cuda" and not _cuda_available():
            errors.append("DISRO_DEVICE=cuda but no CUDA device is available")

        if cls.LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            warnings.append(f"DISRO_LOG_LEVEL ({cls.LOG_LEVEL}) is not a standard level, using INFO")
            cls.LOG_LEVEL = "INFO"

        out_dir = Path(out_dir) if out_dir is not None else cls.OUT_DIR
        if not out_dir.exists():
            try:
                out_dir.mkdir(parents=True, exist_ok=True)
                logger.info(f"Created directory: OUT_DIR = {out_dir}")
            except Exception as e:
                errors.append(f"OUT_DIR ({out_dir}) cannot be created: {e}")

        if not cls.DATA_DIR.exists():
            warnings.append(f"DATA_DIR ({cls.DATA_DIR}) does not exist - only synthetic datasets are available")

        for warning in warnings:
            logger.warning(f"Configuration warning: {warning}")

        if errors:
            error_msg = "Configuration validation failed:\n" + "\n".join(f"  - {e}" for e in errors)
            logger.error(error_msg)
            raise ConfigurationError(error_msg)

        logger.info("Configuration validation passed")
        return True

    @classmethod
    def resolve_device(cls) -> str:
        """Return the torch device string selected by DISRO_DEVICE."""
        if cls.DEVICE == "auto":
            return "cuda" if _cuda_available() else "cpu"
        return cls.DEVICE

    @classmethod
    def get_summary(cls) -> Dict[str, Any]:
        """Get configuration summary for manifests and debugging"""
        return {
            'data_dir': str(cls.DATA_DIR),
            'out_dir': str(cls.OUT_DIR),
            'device': cls.resolve_device(),
            'log_level': cls.LOG_LEVEL,
            'num_threads': cls.NUM_THREADS,
        }


def _cuda_available() -> bool:
    try:
        import torch
        return torch.cuda.is_available()
    except ImportError:
        return False
