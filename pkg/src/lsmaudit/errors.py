"""Exception hierarchy shared by every lsmaudit module."""

from __future__ import annotations


class LsmAuditError(Exception):
    """Base class for all errors raised by this package."""


# -- trace / event model ---------------------------------------------------


class TraceError(LsmAuditError):
    pass


class UnknownSyscall(TraceError):
    pass


class UnknownHook(TraceError):
    pass


class MissingPathDepth(TraceError):
    pass


class MissingCost(LsmAuditError):
    pass


class ParseError(TraceError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonMonotonicTimestamp(ParseError):
    pass


# -- dispatch ----------------------------------------------------------------


class DispatchError(LsmAuditError):
    pass


class MultiNotAllowed(DispatchError):
    pass


class HookMismatch(DispatchError):
    pass


class StaleHandle(DispatchError):
    pass


class UnknownTask(DispatchError):
    pass


class UnknownCgroup(DispatchError):
    pass


class SnapshotViolation(DispatchError):
    """A program list changed while a dispatch was walking it."""


# -- object store ------------------------------------------------------------


class StoreError(LsmAuditError):
    pass


class DeadObject(StoreError):
    pass


class NoStorage(StoreError):
    pass


class NoSuchObject(StoreError):
    pass


# -- provenance --------------------------------------------------------------


class ProvenanceError(LsmAuditError):
    pass


class BufferOverflow(ProvenanceError):
    pass


class StorageFailure(ProvenanceError):
    pass


class SinkError(ProvenanceError):
    pass


class DanglingEdge(ProvenanceError):
    pass


class InvalidDocument(ProvenanceError):
    pass


# -- policy ------------------------------------------------------------------


class PolicyError(LsmAuditError):
    pass


class SchemaError(PolicyError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class UnknownService(SchemaError):
    pass


class MalformedProgramGraph(PolicyError):
    pass


# -- motifs / harness ----------------------------------------------------------


class UnmodeledHook(LsmAuditError):
    pass


class UnknownWorkload(LsmAuditError):
    pass


class ScenarioError(LsmAuditError):
    pass
