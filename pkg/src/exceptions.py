"""
Error hierarchy shared by the library, the CLI and the HTTP API.

Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


EXIT_SUCCESS = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4
EXIT_EMPTY_SPLIT = 5


class T2Error(Exception):
    """Base class for all detector errors."""

    exit_code: int = 1


class DataValidationError(T2Error, ValueError):
    """Input data violates a documented invariant (shape, range, geometry)."""

    exit_code = EXIT_VALIDATION


class ConfigError(T2Error, ValueError):
    """Configuration file, override or variant tag is invalid."""

    exit_code = EXIT_VALIDATION


class DecompositionLookupError(T2Error, KeyError):
    """A precomputed decomposition store has no entry for an image."""

    exit_code = EXIT_IO

    def __init__(self, image_id: str):
        super().__init__(image_id)
        self.image_id = image_id

    def __str__(self) -> str:
        return f"no precomputed illumination for image '{self.image_id}'"


class TrainingDivergenceError(T2Error):
    """The training loss became non-finite."""

    exit_code = EXIT_DIVERGENCE

    def __init__(self, message: str, step: Optional[int] = None, batch_id: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.batch_id = batch_id


class StorageError(T2Error, OSError):
    """Reading or writing a file failed."""

    exit_code = EXIT_IO

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path


class CheckpointIntegrityError(StorageError):
    """A checkpoint failed its checksum or version check."""


class EmptySplitError(T2Error):
    """An evaluation split holds no images."""

    exit_code = EXIT_EMPTY_SPLIT
