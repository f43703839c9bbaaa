"""cgroup tree, (cgroup, hook) program attachment and per-event dispatch.

A hook event runs the programs attached for its hook on the subject task's
cgroup first, then on each ancestor up to the root.  Inside one cgroup
programs run in attachment (FIFO) order.  The first nonzero return code
stops the walk and becomes the result of the event.

Program lists are immutable tuples replaced wholesale on attach/detach, so
a dispatch always walks a consistent snapshot of every list it reads; this
plays the role of the RCU read section around program execution (the
migrate/RCU calls themselves are no-ops here, see ``DispatchResult.markers``).
"""

from __future__ import annotations

import itertools
import threading
import time
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from typing import Any

from lsmaudit import kernels
from lsmaudit.errors import (
    HookMismatch,
    MultiNotAllowed,
    StaleHandle,
    UnknownCgroup,
    UnknownTask,
)
from lsmaudit.events import Hook, HookEvent, KernelObjectId, SyscallRecord, Syscall, task
from lsmaudit.timing import BenchRow, summarize

ALLOW = 0
EACCES = 13
EPERM = 1

ProgramBody = Callable[[HookEvent, Any, Any], int]


def is_deny(rc: int) -> bool:
    return rc != ALLOW


@dataclass(eq=False)
class AuditProgram:
    id: str
    hook: Hook
    body: ProgramBody
    # the program's own activity is hidden from provenance capture
    opaque_to_capture: bool = False

    def __repr__(self) -> str:
        return f"<AuditProgram {self.id} on {self.hook.value}>"


@dataclass(eq=False)
class Attachment:
    """Handle returned by :meth:`CgroupTree.attach`."""

    cgroup: CgroupNode
    hook: Hook
    program: AuditProgram
    detached: bool = False


class CgroupNode:
    __slots__ = ("id", "parent", "children", "progs", "handles", "allow_multi", "depth")

    def __init__(self, cg_id: str, parent: CgroupNode | None) -> None:
        self.id = cg_id
        self.parent = parent
        self.children: list[CgroupNode] = []
        # hook -> tuple of programs, replaced (never mutated) on change
        self.progs: dict[Hook, tuple[AuditProgram, ...]] = {}
        self.handles: dict[Hook, tuple[Attachment, ...]] = {}
        self.allow_multi: dict[Hook, bool] = {}
        self.depth = 0 if parent is None else parent.depth + 1

    def ancestors(self) -> Iterator[CgroupNode]:
        """This node, then its parent, ..., then the root."""
        node: CgroupNode | None = self
        while node is not None:
            yield node
            node = node.parent

    def is_descendant_of(self, other: CgroupNode) -> bool:
        return any(n is other for n in self.ancestors())

    def programs(self, hook: Hook) -> tuple[AuditProgram, ...]:
        return self.progs.get(hook, ())

    def __repr__(self) -> str:
        return f"<CgroupNode {self.id}>"


class CgroupTree:
    """Single-rooted cgroup hierarchy."""

    def __init__(self, root_id: str = "root") -> None:
        self.root = CgroupNode(root_id, None)
        self._nodes: dict[str, CgroupNode] = {root_id: self.root}
        self._lock = threading.Lock()

    def add(self, cg_id: str, parent: str | CgroupNode | None = None) -> CgroupNode:
        parent_node = self.root if parent is None else self.node(parent)
        with self._lock:
            if cg_id in self._nodes:
                raise ValueError(f"cgroup {cg_id!r} already exists")
            node = CgroupNode(cg_id, parent_node)
            parent_node.children.append(node)
            self._nodes[cg_id] = node
        return node

    def node(self, ref: str | CgroupNode) -> CgroupNode:
        if isinstance(ref, CgroupNode):
            return ref
        try:
            return self._nodes[ref]
        except KeyError:
            raise UnknownCgroup(f"no cgroup {ref!r}") from None

    def __iter__(self) -> Iterator[CgroupNode]:
        return iter(list(self._nodes.values()))

    def __len__(self) -> int:
        return len(self._nodes)

    def subtree(self, ref: str | CgroupNode) -> list[CgroupNode]:
        start = self.node(ref)
        out, stack = [], [start]
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(n.children)
        return out

    def attach(
        self,
        cg: str | CgroupNode,
        hook: Hook,
        prog: AuditProgram,
        allow_multi: bool = False,
    ) -> Attachment:
        node = self.node(cg)
        if prog.hook != hook:
            raise HookMismatch(f"{prog.id} targets {prog.hook.value}, not {hook.value}")
        with self._lock:
            current = node.handles.get(hook, ())
            if current:
                if not allow_multi or not node.allow_multi.get(hook, False):
                    raise MultiNotAllowed(
                        f"{node.id}/{hook.value} already has a program and multi-attach is off"
                    )
            else:
                node.allow_multi[hook] = allow_multi
            handle = Attachment(node, hook, prog)
            handles = current + (handle,)
            node.handles[hook] = handles
            node.progs[hook] = tuple(h.program for h in handles)
        return handle

    def detach(self, handle: Attachment) -> None:
        node, hook = handle.cgroup, handle.hook
        with self._lock:
            current = node.handles.get(hook, ())
            if handle.detached or not any(h is handle for h in current):
                raise StaleHandle(f"{handle.program.id} is not attached to {node.id}")
            handle.detached = True
            remaining = tuple(h for h in current if h is not handle)
            if remaining:
                node.handles[hook] = remaining
                node.progs[hook] = tuple(h.program for h in remaining)
            else:
                node.handles.pop(hook, None)
                node.progs.pop(hook, None)
                node.allow_multi.pop(hook, None)


class TaskCgroupMap:
    """Which cgroup each task belongs to."""

    def __init__(self, tree: CgroupTree) -> None:
        self.tree = tree
        self._map: dict[KernelObjectId, CgroupNode] = {}

    def assign(self, t: KernelObjectId, cg: str | CgroupNode | None = None) -> None:
        self._map[t] = self.tree.root if cg is None else self.tree.node(cg)

    def ensure(self, t: KernelObjectId) -> CgroupNode:
        """Cgroup of ``t``; unknown tasks start in the root cgroup."""
        node = self._map.get(t)
        if node is None:
            node = self._map[t] = self.tree.root
        return node

    def lookup(self, t: KernelObjectId) -> CgroupNode:
        try:
            return self._map[t]
        except KeyError:
            raise UnknownTask(f"{t} has no cgroup") from None

    def forget(self, t: KernelObjectId) -> None:
        self._map.pop(t, None)

    def __contains__(self, t: KernelObjectId) -> bool:
        return t in self._map

    def __len__(self) -> int:
        return len(self._map)


def migrate_task(t: KernelObjectId, to: str | CgroupNode, task_map: TaskCgroupMap) -> None:
    if t not in task_map:
        raise UnknownTask(f"{t} has no cgroup")
    task_map.assign(t, to)


@dataclass(slots=True)
class DispatchResult:
    final: int
    executed: list[tuple[str, str]]
    markers: list[str] = field(default_factory=list)

    @property
    def denied(self) -> bool:
        return self.final != ALLOW


_MARKS_IN = ["migrate_disable", "rcu_read_lock"]
_MARKS_OUT = ["rcu_read_unlock", "migrate_enable"]


class Dispatcher:
    """Runs attached programs for hook events.

    ``store`` and ``sink`` are handed to every program body unchanged.
    ``backend`` selects the kernel module (compiled or pure Python).
    """

    def __init__(self, tree: CgroupTree, store: Any = None, sink: Any = None, *, backend=None, markers: bool = False):
        self.tree = tree
        self.store = store
        self.sink = sink
        self._run = (backend or kernels).run_chain
        self.markers = markers

    def dispatch_event(self, ev: HookEvent, task_map: TaskCgroupMap) -> DispatchResult:
        leaf = task_map.lookup(ev.subject)  # resolved once per event
        executed: list[tuple[str, str]] = []
        rc = self._run(leaf, ev.hook, ev, self.store, self.sink, executed)
        if self.markers:
            return DispatchResult(rc, executed, _MARKS_IN + [f"run:{len(executed)}"] + _MARKS_OUT)
        return DispatchResult(rc, executed)


def dispatch_event(ev: HookEvent, task_map: TaskCgroupMap, store: Any = None, sink: Any = None) -> DispatchResult:
    return Dispatcher(task_map.tree, store, sink).dispatch_event(ev, task_map)


# -- benchmarking ----------------------------------------------------------------


def _noop(ev, store, sink) -> int:
    return ALLOW


def noop_program(pid: str, hook: Hook) -> AuditProgram:
    return AuditProgram(pid, hook, _noop)


def chain_tree(depth: int) -> tuple[CgroupTree, CgroupNode]:
    """A root plus a linear chain of ``depth`` descendants; returns the leaf."""
    tree = CgroupTree()
    node = tree.root
    for i in range(depth):
        node = tree.add(f"cg{i + 1}", node)
    return tree, node


def _bench_events(count: int, hook: Hook) -> list[HookEvent]:
    t = task(1)
    sock = KernelObjectId("socket", 1)
    rec = SyscallRecord(Syscall.SOCKET, t, 1, sock)
    return [HookEvent(hook, t, sock, rec, 0) for _ in range(count)]


def time_dispatch(dispatcher: Dispatcher, task_map: TaskCgroupMap, events: list[HookEvent]) -> list[float]:
    clock = time.perf_counter_ns
    out = []
    dispatch = dispatcher.dispatch_event
    for ev in events:
        t0 = clock()
        dispatch(ev, task_map)
        out.append(clock() - t0)
    return out


def bench_dispatch(
    depth: int = 8,
    programs: int = 16,
    events: int = 2000,
    *,
    hook: Hook = Hook.FILE_OPEN,
    backend=None,
) -> list[BenchRow]:
    """Per-event dispatch cost for the standard configurations.

    Rows: no programs; ``programs`` no-op programs at the leaf; at the root;
    one program per level of a depth-1 and a depth-``depth`` chain.
    """
    evs = _bench_events(events, hook)
    rows = []

    def run(name: str, tree: CgroupTree, leaf: CgroupNode) -> None:
        tmap = TaskCgroupMap(tree)
        tmap.assign(evs[0].subject, leaf)
        d = Dispatcher(tree, backend=backend)
        for ev in evs[:200]:
            d.dispatch_event(ev, tmap)
        rows.append(summarize(name, time_dispatch(d, tmap, evs), workload=hook.value))

    tree, leaf = chain_tree(1)
    run("no-programs", tree, leaf)

    tree, leaf = chain_tree(1)
    for i in range(programs):
        tree.attach(leaf, hook, noop_program(f"p{i}", hook), allow_multi=True)
    run(f"leaf-x{programs}", tree, leaf)

    tree, leaf = chain_tree(1)
    for i in range(programs):
        tree.attach(tree.root, hook, noop_program(f"p{i}", hook), allow_multi=True)
    run(f"root-x{programs}", tree, leaf)

    for d in sorted({1, depth}):
        tree, leaf = chain_tree(d)
        for node in leaf.ancestors():
            tree.attach(node, hook, noop_program(f"p-{node.id}", hook))
        run(f"chain-depth{d}", tree, leaf)
    return rows


_ids = itertools.count()


def fresh_program_id(prefix: str = "prog") -> str:
    return f"{prefix}{next(_ids)}"
