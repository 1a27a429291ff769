"""Error types shared across the package.

Every error carries a stable ``code`` so CLI consumers and tests can match on
it without parsing prose messages.
"""

from __future__ import annotations

from typing import Any


class CopilotError(Exception):
    code = "error"

    def __init__(self, message: str, **context: Any) -> None:
        super().__init__(message)
        self.context = context

    def record(self) -> dict:
        """Machine-readable form, suitable for ``--format record`` output."""
        rec = {"error": self.code, "message": str(self)}
        rec.update(self.context)
        return rec


class SpecSyntaxError(CopilotError):
    """Workflow file is not well-formed text; context carries line/column."""

    code = "syntax"


class SpecSchemaError(CopilotError):
    """Well-formed document violating the workflow schema; context names the field."""

    code = "schema"


class DuplicateNameError(CopilotError):
    code = "duplicate-name"


class DanglingEndpointError(CopilotError):
    code = "dangling-endpoint"


class DomainError(CopilotError):
    code = "domain"


class DecodeError(CopilotError):
    """Rejected wire record; ``reason`` context distinguishes failure classes."""

    code = "decode"


class StoreClosedError(CopilotError):
    code = "store-closed"


class UnknownRunError(CopilotError):
    code = "unknown-run"


class IntegrityError(CopilotError):
    """Stored event log fails structural validation (non-tail corruption, seq gaps)."""

    code = "integrity"


class TransitionError(CopilotError):
    """Illegal stage state transition; state is left unchanged."""

    code = "illegal-transition"


class LaunchError(CopilotError):
    code = "launch"


class ExecutableNotFoundError(LaunchError):
    code = "executable-not-found"


class PermissionDeniedError(LaunchError):
    code = "permission-denied"


class SpawnFailureError(LaunchError):
    code = "spawn-failure"
