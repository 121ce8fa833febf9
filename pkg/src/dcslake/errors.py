"""Exception hierarchy for the lake."""

from __future__ import annotations


class DcsLakeError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DcsLakeError):
    """Invalid argument, record, or configuration value."""


class ConfigError(DcsLakeError):
    """Malformed or inconsistent configuration file."""


class PartitionBoundaryError(ValidationError):
    """A record's timestamp falls outside the partition day it was written to."""


class CommitConflictError(DcsLakeError):
    """A concurrent writer was detected while committing a manifest."""


class ScanError(DcsLakeError):
    """A partition file is missing or unreadable; the message names the file."""


class SourceError(DcsLakeError):
    """An upstream source is unreachable or misbehaving."""


class ParseError(SourceError):
    """A fixture file contains a malformed record.

    Carries the 1-based line number of the first offending line.
    """

    def __init__(self, message: str, line_no: int | None = None):
        super().__init__(message)
        self.line_no = line_no
