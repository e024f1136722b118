"""Exception types shared across the engine, stores, and spec loaders."""

from __future__ import annotations


class TransplantError(Exception):
    """Base class for all errors raised by this package."""


class SpecError(TransplantError):
    """A structured-text document or in-memory spec failed validation.

    Carries a human-readable path into the offending document so typos
    ("postz") can be located without a debugger.
    """

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class CycleError(SpecError):
    """Dependency edges form a cycle (type-level or instance-level)."""

    def __init__(self, members, path: str = ""):
        self.members = list(members)
        chain = " -> ".join(str(m) for m in self.members)
        super().__init__(f"dependency cycle: {chain}", path)


class RootMissing(SpecError):
    """A DAG spec declares no usable root node type."""


class CompositionError(TransplantError):
    """Schema mappings cannot be composed as requested."""


class CompositionDomainError(CompositionError):
    """compose(a->b, c->d) where b != c."""


class OwnerUnresolvable(TransplantError):
    """A node's ownership attribute is null or references a missing root."""


class NotFound(TransplantError):
    """A store read, delete, or flag update targeted a missing row or entry."""


class LeaseDenied(TransplantError):
    """The user already holds an active migration lease."""


class WalSealed(TransplantError):
    """Append attempted after a commit/abort record sealed the log."""


class NotTracked(TransplantError):
    """The node has no pre-migration relationship rows; it was never migrated."""


class InjectedCrash(TransplantError):
    """Raised by the fault harness to simulate a process crash mid-migration."""

    def __init__(self, point: str):
        self.point = point
        super().__init__(f"injected crash at {point}")


class MigrationAborted(TransplantError):
    """The migration could not proceed and was rolled back."""
