# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

from typing import *

import logging

__all__ = [
    "__version__",
    "ArgumentError",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DegenerateVectorError",
    "EndOfEpoch",
    "Error",
    "ManifestError",
    "ParseError",
    "ShapeError",
    "TrainingDivergence",
]

__version__ = "0.1.0"  # Sync with pyproject.toml

log = logging.getLogger("embedcluster")


class EndOfEpoch(Exception):
    def __init__(self):
        super().__init__("end of epoch")


class Error(Exception):
    pass


class ShapeError(Error):
    pass


class DegenerateVectorError(Error):
    pass


class ContractError(Error):
    pass


class ArgumentError(Error):
    pass


class ConfigError(ArgumentError):
    pass


class CheckpointError(Error):
    pass


class ParseError(Error):
    pass


class ManifestError(ParseError):
    pass


class TrainingDivergence(Error):
    def __init__(self, msg: str, tensor: Optional[str] = None):
        super().__init__(msg)
        self.tensor = tensor
        self.checkpoint: Optional[str] = None
