# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

from typing import Optional


class PointLNError(Exception):
    exit_code = 1


class ConfigurationError(PointLNError, ValueError):
    exit_code = 1


class ShapeError(ConfigurationError):
    pass


class TapeMismatchError(ConfigurationError):
    pass


class DataError(PointLNError):
    exit_code = 2


class GeometryError(DataError, ValueError):
    pass


class ParseError(DataError, ValueError):

    def __init__(self, message: str, line: int) -> None:
        super().__init__('line {line}: {message}'.format(line=line, message=message))
        self.line = line


class ManifestError(DataError, ValueError):

    def __init__(self, message: str, row: Optional[int] = None) -> None:
        if row is not None:
            message = 'row {row}: {message}'.format(row=row, message=message)
        super().__init__(message)
        self.row = row


class CheckpointError(DataError):
    pass


class NumericalError(PointLNError):
    exit_code = 3
