"""End-to-end replay: dispatch, capture, ring buffer, serializer."""

from __future__ import annotations

import threading
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field

from lsmaudit import kernels
from lsmaudit.dispatch import ALLOW, AuditProgram, CgroupTree, Dispatcher, TaskCgroupMap
from lsmaudit.errors import DeadObject
from lsmaudit.events import TASK, FreeRecord, SyscallRecord, Syscall, cred_of, expand_syscall, memory_of, task
from lsmaudit.harness.scenario import ROOT, Scenario
from lsmaudit.policy import CompiledProgramSet, ViolationRecord, compile_policy
from lsmaudit.provenance.document import ProvDocument, Serializer, drain
from lsmaudit.provenance.engine import CaptureEngine, CaptureFilter
from lsmaudit.provenance.ringbuf import RingBuffer
from lsmaudit.store import CONTEXT_KEY, ObjectStore

SUCCESS = 0
VIOLATION = 1


@dataclass
class RunOptions:
    merge: bool | None = None  # None: take the scenario's setting
    avoid_versions: bool | None = None
    drop_on_full: bool = False
    capacity: int = 4096
    threaded: bool = False
    seed: int | None = None


@dataclass
class RunResult:
    document: ProvDocument
    violations: list[ViolationRecord]
    stats: dict
    exit_status: int
    store: ObjectStore = field(repr=False, default=None)
    engine: CaptureEngine | None = field(repr=False, default=None)


def _fixed_program(pid: str, hook, rc: int) -> AuditProgram:
    def body(ev, store, sink) -> int:
        return rc

    return AuditProgram(pid, hook, body)


class Pipeline:
    """Wires a scenario into a dispatcher, capture engine and serializer."""

    def __init__(self, scenario: Scenario, options: RunOptions | None = None) -> None:
        opts = options or RunOptions()
        self.options = opts
        self.scenario = scenario
        self.store = ObjectStore()
        self.tree = CgroupTree(ROOT)
        for cg in scenario.cgroups:
            self.tree.add(cg.id, cg.parent)
        self.task_map = TaskCgroupMap(self.tree)
        for t in scenario.tasks:
            self.task_map.assign(task(t.pid, t.generation), t.cgroup)

        self.serializer = Serializer(strict=not opts.drop_on_full)
        self.buffer = RingBuffer(opts.capacity, drop_on_full=opts.drop_on_full)
        if not opts.threaded:
            self.buffer.on_full = lambda: drain(self.buffer, self.serializer)

        self.engine: CaptureEngine | None = None
        cap = scenario.capture
        if cap is not None:
            merge = cap.merge if opts.merge is None else opts.merge
            avoid = cap.avoid_versions if opts.avoid_versions is None else opts.avoid_versions
            filt = CaptureFilter(
                None if cap.relations is None else frozenset(cap.relations),
                None if cap.kinds is None else frozenset(cap.kinds),
                None if cap.contexts is None else frozenset(cap.contexts),
            )
            self.engine = CaptureEngine(self.store, batch_sink=self.buffer.push_many, merge=merge, avoid_versions=avoid, capture_filter=filt)

        self.policy_sets: list[CompiledProgramSet] = []
        for spec in scenario.policies:
            pset = compile_policy(spec.policy, {"id": spec.id, "cgroup": spec.cgroup})
            self.policy_sets.append(pset)
            for prog in pset.programs:
                self.tree.attach(spec.cgroup, prog.hook, prog, allow_multi=True)
            for pid in spec.bind_pids:
                t = task(pid)
                self.store.resolve(t)
                # bound the way the sidecar would: through the pid-keyed userspace path
                self.store.userspace_update("pid", pid, CONTEXT_KEY, pset.context.encode())
                self.task_map.ensure(t)

        for i, a in enumerate(scenario.attachments):
            rc = ALLOW if a.action == "allow" else a.code
            self.tree.attach(a.cgroup, a.hook, _fixed_program(a.id or f"{a.action}{i}", a.hook, rc), allow_multi=True)

        if self.engine is not None:
            for cg in cap.cgroups:
                for hook in cap.hooks:
                    self.tree.attach(cg, hook, self.engine.capture_program(hook, f"capture:{cg}:{hook.value}"), allow_multi=True)
            for obj in scenario.opaque:
                self.engine.set_opaque(obj, True)

        self.dispatcher = Dispatcher(self.tree, self.store, self.buffer)
        self._run_chain = kernels.run_chain
        self.hook_counts: Counter = Counter()
        self.records = 0
        self.syscalls = 0
        self.denied = 0
        self.programs_executed = 0
        self.freed = 0

    # -- replay ----------------------------------------------------------------------

    def _free(self, rec: FreeRecord) -> None:
        obj = rec.object
        victims = [obj]
        if obj.kind == TASK:
            victims += [cred_of(obj), memory_of(obj)]
            self.task_map.forget(obj)
        for v in victims:
            try:
                self.store.end_lifecycle(v)
            except DeadObject:
                if v is obj:
                    raise
        self.freed += 1

    def _syscall(self, rec: SyscallRecord) -> None:
        subject = rec.subject
        self.store.resolve(subject)
        # programs cannot migrate tasks, so one cgroup lookup covers the whole syscall
        leaf = self.task_map.ensure(subject)
        if rec.syscall == Syscall.FORK and rec.object not in self.task_map:
            self.task_map.assign(rec.object, leaf)
            self.store.resolve(rec.object)
        self.syscalls += 1
        run, store, sink = self._run_chain, self.store, self.buffer
        counts = self.hook_counts
        executed: list = []
        for ev in expand_syscall(rec):
            counts[ev.hook] += 1
            if run(leaf, ev.hook, ev, store, sink, executed):
                self.denied += 1
                break  # the syscall fails at the denying hook
        self.programs_executed += len(executed)

    def replay(self, trace: Sequence) -> None:
        for rec in trace:
            self.records += 1
            if type(rec) is FreeRecord:
                self._free(rec)
            else:
                self._syscall(rec)

    def run(self, trace: Sequence) -> RunResult:
        consumer = None
        if self.options.threaded:
            consumer = threading.Thread(target=self._consume, name="prov-serializer", daemon=True)
            consumer.start()
        try:
            self.replay(trace)
        finally:
            self.buffer.close()
            if consumer is not None:
                consumer.join()
        drain(self.buffer, self.serializer)
        doc = self.serializer.close()
        violations: list[ViolationRecord] = []
        for pset in self.policy_sets:
            pset.drain_violations()
            violations += pset.violation_log
        violations.sort(key=lambda v: v.timestamp)
        doc.meta = self._meta()
        stats = self.stats(violations)
        return RunResult(doc, violations, stats, VIOLATION if violations else SUCCESS, self.store, self.engine)

    def _consume(self) -> None:
        buf = self.buffer
        while True:
            buf.wait_nonempty(0.05)
            drain(buf, self.serializer)
            if buf.closed and not len(buf):
                return

    def _meta(self) -> dict:
        eng = self.engine
        return {
            "merge": None if eng is None else eng.merge,
            "avoid_versions": None if eng is None else eng.avoid_versions,
            "seed": self.options.seed,
            "opaque": [str(o) for o in self.scenario.opaque],
        }

    def stats(self, violations: Sequence[ViolationRecord] = ()) -> dict:
        eng = self.engine
        pushed = self.buffer.pushed
        return {
            "records": self.records,
            "syscalls": self.syscalls,
            "freed": self.freed,
            "hook_events": sum(self.hook_counts.values()),
            "hooks": {h.value: n for h, n in sorted(self.hook_counts.items(), key=lambda kv: kv[0].value)},
            "denied": self.denied,
            "programs_executed": self.programs_executed,
            "elements_pushed": pushed,
            "elements_serialized": self.serializer.serialized,
            "dropped": self.buffer.dropped + self.serializer.dropped,
            "buffer_high_water": self.buffer.high_water,
            "capture": None if eng is None else eng.stats.as_dict(),
            "storage": self.store.stats.as_dict(),
            "objects_holding_storage": self.store.holding_storage(),
            "violations": len(violations),
        }


def run_end_to_end(scenario: Scenario, trace: Sequence, options: RunOptions | None = None) -> RunResult:
    return Pipeline(scenario, options).run(trace)
