"""
Exception types shared by every stage of the pipeline.
The CLI catches DapError and turns it into a one-line error exit.
"""

from typing import List, Optional


class DapError(Exception):
    """Base class for all pipeline errors."""


class ArgumentError(DapError, ValueError):
    """A call received arguments outside its declared domain."""


class ConfigurationError(DapError, ValueError):
    """A plug-in, run config or checkpoint does not fit the declared contract."""


class DatasetParseError(DapError, ValueError):
    """The dataset file is not valid JSON (or not readable as a record)."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None,
                 locus: Optional[str] = None):
        self.line = line
        self.column = column
        self.locus = locus
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        if locus:
            where.append(locus)
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class SchemaError(DapError, ValueError):
    """Well-formed JSON that violates the dataset schema or its invariants."""

    def __init__(self, message: str, label: Optional[str] = None, locus: Optional[str] = None):
        self.label = label
        self.locus = locus
        super().__init__(f"{message} at {locus}" if locus else message)


class DependencyError(DapError, RuntimeError):
    """A stage was asked to run without the artifacts of an upstream stage."""


class AlignmentError(DapError, ValueError):
    """Prediction and ground-truth files do not cover the same videos."""

    def __init__(self, missing: List[str], unexpected: List[str]):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        parts = []
        if self.missing:
            parts.append(f"missing predictions for {self.missing}")
        if self.unexpected:
            parts.append(f"predictions for unknown videos {self.unexpected}")
        super().__init__("Video ids do not align: " + "; ".join(parts))
