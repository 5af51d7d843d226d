"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so new error conditions should reuse
one of the classes below rather than raising bare ValueErrors.
"""


class CgrsError(Exception):
    """Base class for all package errors."""


class ValidationError(CgrsError):
    """Input data violates a documented invariant (bad manifest, dim
    mismatch, malformed record, missing caption under the hard policy)."""


class FormatError(ValidationError):
    """A serialized artifact could not be decoded (bad magic, truncated
    payload, malformed JSONL line). Carries the offending location."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" [{loc}]"
        super().__init__(f"{message}{loc}")
        self.path = path
        self.line = line


class ProviderError(CgrsError):
    """A caption or embedding provider failed: unreachable endpoint after
    retries, unresolvable image, or degenerate (empty) response."""

    def __init__(self, message, image_id=None):
        super().__init__(message)
        self.image_id = image_id


class ConfigError(CgrsError):
    """Pipeline configuration is missing or inconsistent."""
