"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class AuditError(Exception):
    """Base class. ``code`` is a short machine-readable reason tag."""

    exit_code = 1

    def __init__(self, code: str, message: str = "", **context):
        self.code = code
        self.message = message
        self.context = context
        text = f"{code}: {message}" if message else code
        if context:
            details = ", ".join(f"{k}={v!r}" for k, v in context.items())
            text = f"{text} ({details})"
        super().__init__(text)


class ValidationError(AuditError, ValueError):
    exit_code = 2


class AdapterError(AuditError):
    exit_code = 3


class AuditIOError(AuditError, OSError):
    exit_code = 4


class BootstrapError(AuditError):
    """A statistic raised on a bootstrap replicate."""

    exit_code = 2
