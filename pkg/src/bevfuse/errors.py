"""Exception types shared across the package.

Two error families matter for callers: configuration/validation problems
(:class:`ConfigError`) and malformed input files (:class:`ParseError`).  The
command line maps them to distinct exit codes, so library code should raise
the most specific type it can.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class ParseError(ValueError):
    """An input file or byte stream is malformed.

    Carries enough position information to point a user at the problem:
    ``path`` (or a pseudo-path like ``"<memory>"``), and either a 1-based
    ``line`` for text formats or a 0-based byte ``offset`` for binary ones.
    """

    def __init__(self, message, path=None, line=None, offset=None):
        self.path = path
        self.line = line
        self.offset = offset
        where = path if path is not None else "<input>"
        if line is not None:
            where = f"{where}:{line}"
        elif offset is not None:
            where = f"{where}@byte {offset}"
        super().__init__(f"{where}: {message}")


class GenerationError(RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names the stage that raised."""

    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")
