"""Provenance capture: hook events in, versioned graph elements out.

Per-object capture state lives in the object's local storage under
``STATE_KEY`` as a packed record::

    version (u64) | flags (u8) | last incoming edge (i64) | last outgoing edge (i64)

Edge references index the engine's edge table.  Flags: bit 0 opaque, bit 1
the current version's node has been emitted.

Reductions (both on by default):

* version avoidance: an inflow identical to the destination's last inflow
  (same source object and version, same relation) does not create a new
  destination version;
* merging: such an inflow increments the count of the existing edge instead
  of adding a parallel one.

Filtering happens at emission time only, so the capture state evolves
identically whatever the filter, and a narrower filter always yields a
subgraph of a wider one.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass

from lsmaudit import kernels
from lsmaudit._kernels_py import CREATE, FLOW, TOUCH, U64, OPAQUE
from lsmaudit.dispatch import ALLOW, AuditProgram
from lsmaudit.events import TASK, Hook, HookEvent, KernelObjectId, Syscall, cred_of, memory_of
from lsmaudit.provenance.elements import NODE_KIND, ProvEdge, ProvElement, ProvNode
from lsmaudit.store import CONTEXT_KEY, ObjectStore
from lsmaudit.templates import OBJECT, OBJECT_MEM, RELATIONS, SUBJECT, SUBJECT_MEM, Flow, Template, Touch, template_for

ALL_NODE_KINDS = frozenset(NODE_KIND.values())


@dataclass(frozen=True)
class CaptureFilter:
    """What gets recorded.  ``None`` means no restriction."""

    recorded_relations: frozenset[str] | None = None
    recorded_object_kinds: frozenset[str] | None = None
    context_allowlist: frozenset[str] | None = None

    def __post_init__(self) -> None:
        for name in ("recorded_relations", "recorded_object_kinds", "context_allowlist"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, frozenset):
                object.__setattr__(self, name, frozenset(value))
        if self.recorded_relations is not None and not self.recorded_relations <= RELATIONS:
            raise ValueError(f"unknown relations {sorted(self.recorded_relations - RELATIONS)}")
        if self.recorded_object_kinds is not None and not self.recorded_object_kinds <= ALL_NODE_KINDS:
            raise ValueError(f"unknown node kinds {sorted(self.recorded_object_kinds - ALL_NODE_KINDS)}")

    def includes(self, other: CaptureFilter) -> bool:
        """True if everything ``other`` records is also recorded here."""

        def wider(mine, theirs):
            return mine is None or (theirs is not None and theirs <= mine)

        return (
            wider(self.recorded_relations, other.recorded_relations)
            and wider(self.recorded_object_kinds, other.recorded_object_kinds)
            and wider(self.context_allowlist, other.context_allowlist)
        )


@dataclass
class CaptureStats:
    events: int = 0
    duplicates: int = 0
    emitted: int = 0
    merged: int = 0
    avoided: int = 0
    opaque_skips: int = 0
    filtered: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


def security_context(store: ObjectStore, task_id: KernelObjectId) -> str | None:
    """Security context bound to ``task_id``'s credentials, if any."""
    rec = store.find(cred_of(task_id))
    if rec is None or rec.storage is None:
        return None
    raw = rec.storage.get(CONTEXT_KEY)
    return None if raw is None else bytes(raw).decode()


class CaptureEngine:
    """Turns hook events into provenance elements.

    ``sink`` receives each emitted element in dependency order (a node
    before any edge that references it); typically ``RingBuffer.push``.
    ``batch_sink``, if given, receives each event's elements as one list
    (``RingBuffer.push_many``).  ``backend`` picks the kernel module that
    runs the state machine (compiled by default when available).
    """

    def __init__(
        self,
        store: ObjectStore,
        sink: Callable[[ProvElement], object] | None = None,
        *,
        merge: bool = True,
        avoid_versions: bool = True,
        capture_filter: CaptureFilter | None = None,
        annotate: bool = True,
        batch_sink: Callable[[list[ProvElement]], object] | None = None,
        backend=None,
    ) -> None:
        self.store = store
        self.sink = sink
        self.batch_sink = batch_sink
        self.merge = merge
        self.avoid_versions = avoid_versions
        self.filter = capture_filter or CaptureFilter()
        self.annotate = annotate
        f = self.filter
        self._core = (backend or kernels).CaptureCore(
            store,
            NODE_KIND,
            ProvNode,
            ProvEdge,
            merge,
            avoid_versions,
            f.recorded_object_kinds,
            f.recorded_relations,
            self._annotations if annotate else None,
        )
        self._plans: dict[tuple[Hook, Syscall], tuple] = {}
        self._last_origin = None
        self._last_ordinal = -1
        self._events = 0
        self._duplicates = 0
        self._emitted = 0

    @property
    def edges(self) -> list[ProvEdge]:
        """Every edge created so far, indexed by edge id."""
        return self._core.edges

    @property
    def stats(self) -> CaptureStats:
        core = self._core
        return CaptureStats(
            self._events, self._duplicates, self._emitted, core.merged, core.avoided, core.opaque_skips, core.filtered
        )

    def _annotations(self, obj: KernelObjectId) -> dict | None:
        if obj.kind != TASK:
            return None
        ctx = security_context(self.store, obj)
        return None if ctx is None else {"security_context": ctx}

    # -- object state --------------------------------------------------------------

    def is_opaque(self, obj: KernelObjectId) -> bool:
        raw = self._core.peek(obj)
        return raw is not None and bool(raw[8] & OPAQUE)

    def version_of(self, obj: KernelObjectId) -> int | None:
        raw = self._core.peek(obj)
        return None if raw is None else U64.unpack_from(raw)[0]

    def set_opaque(self, obj: KernelObjectId, flag: bool = True) -> None:
        raw = self._core.init(obj)  # DeadObject for ended lifecycles
        if flag:
            raw[8] |= OPAQUE
        else:
            raw[8] &= ~OPAQUE & 0xFF

    def bump_version(self, obj: KernelObjectId, ts: int = 0) -> int:
        """Give ``obj`` a new version linked to the previous one."""
        core = self._core
        raw = core.init(obj)
        if raw[8] & OPAQUE:
            raise ValueError(f"{obj} is opaque")
        core.emit_ok = True
        new = core.bump(obj, raw, ts)
        self._flush()
        return new

    # -- entry points ----------------------------------------------------------------

    def template(self, hook: Hook, syscall: Syscall) -> Template:
        return template_for(hook, syscall)

    def _plan(self, hook: Hook, syscall: Syscall) -> tuple:
        ops = []
        roles: set[str] = set()
        for op in template_for(hook, syscall):
            if type(op) is Flow:
                ops.append((FLOW, op.src, op.dst, op.relation))
                roles |= {op.src, op.dst}
            elif type(op) is Touch:
                ops.append((TOUCH, op.role, None, None))
                roles.add(op.role)
            else:
                ops.append((CREATE, op.dst, tuple(op.sources), None))
                roles |= {op.dst} | {r for r, _ in op.sources}
        plan = (tuple(ops), SUBJECT_MEM in roles, OBJECT_MEM in roles)
        self._plans[(hook, syscall)] = plan
        return plan

    def capture(self, ev: HookEvent) -> list[ProvElement]:
        """Apply ``ev``'s template; returns the elements emitted."""
        origin = ev.origin
        if origin is self._last_origin and ev.ordinal == self._last_ordinal:
            # same event reached a second capture program up the hierarchy
            self._duplicates += 1
            return []
        self._last_origin = origin
        self._last_ordinal = ev.ordinal
        self._events += 1
        core = self._core
        allow = self.filter.context_allowlist
        core.emit_ok = allow is None or security_context(self.store, ev.subject) in allow
        plan = self._plans.get((ev.hook, origin.syscall)) or self._plan(ev.hook, origin.syscall)
        ops, subject_mem, object_mem = plan
        roles = {SUBJECT: ev.subject, OBJECT: ev.object}
        if subject_mem:
            roles[SUBJECT_MEM] = memory_of(ev.subject)
        if object_mem and ev.object is not None:
            roles[OBJECT_MEM] = memory_of(ev.object)
        core.apply(ops, roles, origin.timestamp)
        core.emit_ok = True
        return self._flush()

    def _flush(self) -> list[ProvElement]:
        core = self._core
        out = core.out
        if not out:
            return out
        core.out = []
        self._emitted += len(out)
        if self.batch_sink is not None:
            self.batch_sink(out)
        if self.sink is not None:
            for el in out:
                self.sink(el)
        return out

    def capture_program(self, hook: Hook, prog_id: str | None = None) -> AuditProgram:
        engine = self

        def body(ev, store, sink) -> int:
            engine.capture(ev)
            return ALLOW

        return AuditProgram(prog_id or f"capture:{hook.value}", hook, body)

    def programs(self, hooks: Iterable[Hook] = Hook) -> list[AuditProgram]:
        return [self.capture_program(h) for h in hooks]
