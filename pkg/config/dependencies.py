"""
Pre-flight input checks.

Dataset loaders call these before touching any bytes so a missing CIFAR-10
batch or image folder surfaces as one DependencyError listing every problem.
"""

import logging
import os
from pathlib import Path
from typing import Iterable, List, Union

from config.exceptions import DependencyError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _file_problem(path: Path) -> Union[str, None]:
    if not path.exists():
        return f"File not found: {path}"
    if not path.is_file():
        return f"Not a regular file: {path}"
    if not os.access(path, os.R_OK):
        return f"File is not readable: {path}"
    return None


def _dir_problem(path: Path) -> Union[str, None]:
    if not path.exists():
        return f"Directory not found: {path}"
    if not path.is_dir():
        return f"Not a directory: {path}"
    return None


def require_inputs(
    operation: str,
    files: Iterable[PathLike] = (),
    directories: Iterable[PathLike] = (),
) -> None:
    """
    Check that every input file is readable and every input directory exists.

    Directories are never created here; outputs are prepared by Config.validate.

    Raises:
        DependencyError: naming the operation and each missing input.
    """
    problems: List[str] = []
    for path in map(Path, directories):
        problem = _dir_problem(path)
        if problem:
            problems.append(problem)
    for path in map(Path, files):
        problem = _file_problem(path)
        if problem:
            problems.append(problem)

    if problems:
        logger.error("%s: %d missing input(s)", operation, len(problems))
        raise DependencyError(
            f"{operation} cannot start, missing inputs:\n"
            + "\n".join(f"  - {p}" for p in problems)
        )
    logger.debug("%s: inputs present", operation)
