from __future__ import annotations

from typing import Optional


class BitWeightError(Exception):
    """Base for every contract violation raised by the library.

    `detail` is shown to the user; `exit_code` is what the command layer
    returns to the shell.
    """

    exit_code = 1

    def __init__(self, detail: str) -> None:
        super().__init__(detail)
        self.detail = detail


class ArgumentError(BitWeightError):
    exit_code = 2


class ConfigError(BitWeightError):
    exit_code = 2


class ShapeError(BitWeightError):
    exit_code = 3


class UsageError(BitWeightError):
    exit_code = 3


class RangeError(BitWeightError):
    exit_code = 3


class FormatError(BitWeightError):
    exit_code = 4

    def __init__(self, detail: str, offset: Optional[int] = None) -> None:
        if offset is not None:
            detail = f"{detail} (at byte offset {offset})"
        super().__init__(detail)
        self.offset = offset


class IntegrityError(BitWeightError):
    exit_code = 5


class ExportError(BitWeightError):
    exit_code = 6


class NonFiniteError(BitWeightError):
    exit_code = 7

    def __init__(self, detail: str, layer: Optional[str] = None) -> None:
        if layer is not None:
            detail = f"{detail}; first non-finite output at layer '{layer}'"
        super().__init__(detail)
        self.layer = layer
