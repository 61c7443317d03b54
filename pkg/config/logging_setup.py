"""
Logging setup shared by the CLI and long-running jobs.
Console + file handlers with the pipe-separated format used across the project.
"""

import logging
from pathlib import Path
from typing import Optional, Union

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(message)s"


def configure_logging(level: str = "INFO", log_file: Optional[Union[str, Path]] = None) -> logging.Logger:
    """
    Configure the root logger once.

    Args:
        level: Logging level name
        log_file: Optional path of a log file (parent directory is created)

    Returns:
        The root logger
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    formatter = logging.Formatter(LOG_FORMAT)

    # Avoid duplicate handlers when called again (tests, repeated CLI invocations)
    if not any(getattr(h, "_disro", False) for h in root_logger.handlers):
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        console_handler._disro = True
        root_logger.addHandler(console_handler)

    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        target = str(log_file.resolve())
        existing = [h for h in root_logger.handlers if isinstance(h, logging.FileHandler)]
        if not any(h.baseFilename == target for h in existing):
            file_handler = logging.FileHandler(log_file, encoding="utf-8", delay=False)
            file_handler.setFormatter(formatter)
            root_logger.addHandler(file_handler)

    return root_logger
