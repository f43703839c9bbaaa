"""Benchmark suites comparing mechanisms on identical workloads.

Every suite reports per-event timing rows plus ratios against a named
baseline.  A ratio is only ever taken between two rows of the same
workload.  Ratios use the median batch (``p50``) rather than the mean so a
single preempted batch cannot skew them; means are still reported.
"""

from __future__ import annotations

import os
import random
import time
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field

from lsmaudit import kernels
from lsmaudit.dispatch import ALLOW, AuditProgram, CgroupTree, Dispatcher, TaskCgroupMap, chain_tree
from lsmaudit.events import INCOMING, SOCKET, KernelObjectId, NetInfo, Syscall, SyscallRecord, expand_syscall, inode, task
from lsmaudit.harness.workloads import mixed
from lsmaudit.policy import RuntimeInterpreter, bind_context, compile_policy, parse_policy
from lsmaudit.store import CompositeKeyMap, ObjectStore
from lsmaudit.timing import BenchRow, summarize

SUITES = ("invocation", "storage", "policy", "kernels")

INVOCATION_SYSCALLS = (Syscall.SOCKET, Syscall.BIND, Syscall.LISTEN, Syscall.ACCEPT)

# filesystem-only sandbox used by the policy suite
FS_ONLY_POLICY = {
    "subject": "/usr/bin/app",
    "filesystem": {
        "default": {"write": "deny", "exec": "deny"},
        "allow": [
            {"path": "/a/**", "perms": ["read", "write"]},
            {"path": "/d/e/*", "perms": ["read", "write", "exec"]},
        ],
    },
}


@dataclass
class BenchReport:
    suite: str
    rows: list[BenchRow]
    baseline: str
    ratios: dict[str, dict[str, float]] = field(default_factory=dict)  # row name -> workload -> ratio
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "suite": self.suite,
            "baseline": self.baseline,
            "rows": [r.as_dict() for r in self.rows],
            "ratios": self.ratios,
            "extra": self.extra,
        }

    def to_text(self) -> str:
        lines = [f"suite {self.suite} (baseline {self.baseline})"]
        lines.append(f"{'name':<22} {'workload':<14} {'mean ns':>10} {'p50 ns':>10} {'p99 ns':>10} {'ratio':>7}")
        for r in self.rows:
            ratio = self.ratios.get(r.name, {}).get(r.workload)
            shown = "-" if ratio is None else f"{ratio:.2f}"
            lines.append(f"{r.name:<22} {r.workload:<14} {r.mean:>10.0f} {r.p50:>10.0f} {r.p99:>10.0f} {shown:>7}")
        for key, value in self.extra.items():
            lines.append(f"{key}: {value}")
        return "\n".join(lines)


def compute_ratios(rows: list[BenchRow], baseline: str) -> dict[str, dict[str, float]]:
    """``row.p50 / baseline.p50`` for every row whose workload has a baseline row."""
    base = {r.workload: r for r in rows if r.name == baseline}
    out: dict[str, dict[str, float]] = {}
    for r in rows:
        b = base.get(r.workload)
        if r.name == baseline or b is None or b.p50 <= 0:
            continue
        out.setdefault(r.name, {})[r.workload] = r.p50 / b.p50
    return out


@contextmanager
def _pinned() -> Iterator[None]:
    """Pin to a single CPU while timing, where the platform allows it."""
    try:
        before = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(before)})
    except (AttributeError, OSError):
        yield
        return
    try:
        yield
    finally:
        os.sched_setaffinity(0, before)


def _interleaved(cases: dict[tuple[str, str], Callable[[], None]], batch: int, repeats: int) -> list[BenchRow]:
    """Time every case in round-robin batches so drift hits all cases alike."""
    clock = time.perf_counter_ns
    samples: dict[tuple[str, str], list[float]] = {key: [] for key in cases}
    for fn in cases.values():  # warm-up
        fn()
    for _ in range(repeats):
        for key, fn in cases.items():
            t0 = clock()
            fn()
            samples[key].append((clock() - t0) / batch)
    rows = []
    for (name, workload), values in samples.items():
        row = summarize(name, values, workload)
        rows.append(BenchRow(row.name, row.mean, row.p50, row.p99, batch * repeats, workload))
    return rows


# -- invocation --------------------------------------------------------------------


def _audit_body(ev, store, sink) -> int:
    return ALLOW


def _socket_event(syscall: Syscall):
    net = None if syscall == Syscall.SOCKET else NetInfo(INCOMING, 8080)
    rec = SyscallRecord(syscall, task(1), 1, KernelObjectId(SOCKET, 1), net=net)
    return expand_syscall(rec)[0]


def invocation_suite(depth: int = 8, batch: int = 2000, repeats: int = 40, backend=None) -> BenchReport:
    """Direct program call vs single-program dispatch vs dispatch from depth ``depth``."""
    cases: dict[tuple[str, str], Callable[[], None]] = {}
    hierarchy = f"hierarchy-d{depth}"
    for sc in INVOCATION_SYSCALLS:
        ev = _socket_event(sc)
        hook = ev.hook
        prog = AuditProgram(f"audit:{hook.value}", hook, _audit_body)

        def direct(ev=ev, body=prog.body) -> None:
            for _ in range(batch):
                body(ev, None, None)

        single_tree = CgroupTree()
        single_tree.attach(single_tree.root, hook, prog)
        single_map = TaskCgroupMap(single_tree)
        single_map.assign(ev.subject, single_tree.root)

        deep_tree, leaf = chain_tree(depth)
        deep_tree.attach(deep_tree.root, hook, prog)
        deep_map = TaskCgroupMap(deep_tree)
        deep_map.assign(ev.subject, leaf)

        def dispatched(ev=ev, d=Dispatcher(single_tree, backend=backend), m=single_map) -> None:
            run = d.dispatch_event
            for _ in range(batch):
                run(ev, m)

        def deep(ev=ev, d=Dispatcher(deep_tree, backend=backend), m=deep_map) -> None:
            run = d.dispatch_event
            for _ in range(batch):
                run(ev, m)

        cases[("direct", sc.value)] = direct
        cases[("single", sc.value)] = dispatched
        cases[(hierarchy, sc.value)] = deep
    rows = _interleaved(cases, batch, repeats)
    ratios = compute_ratios(rows, "direct")
    return BenchReport("invocation", rows, "direct", ratios, {"depth": depth, "cv": ratio_cv(ratios)})


def ratio_cv(ratios: dict[str, dict[str, float]]) -> dict[str, float]:
    """Coefficient of variation of each mechanism's ratios across workloads."""
    out = {}
    for name, per_workload in ratios.items():
        values = list(per_workload.values())
        if len(values) < 2:
            continue
        mean = sum(values) / len(values)
        var = sum((v - mean) ** 2 for v in values) / len(values)
        out[name] = (var**0.5) / mean if mean else 0.0
    return out


# -- storage -------------------------------------------------------------------------


def storage_suite(objects: int = 4096, accesses: int = 20000, repeats: int = 30, seed: int = 0) -> BenchReport:
    """Lookup of per-object state: local storage vs a global composite-key map."""
    rng = random.Random(seed)
    store = ObjectStore()
    cmap = CompositeKeyMap()
    records = []
    for i in range(objects):
        oid = inode(f"fs{i % 4}", i) if i % 3 else task(i)
        rec = store.resolve(oid)
        store.storage_get(rec, create_if_missing=True).set("state", b"\x00" * 8)
        cmap.lookup(rec, create=True)["state"] = b"\x00" * 8
        records.append(rec)
    # hooks hand programs the object itself, so both paths start from the record
    seq = [records[rng.randrange(objects)] for _ in range(accesses)]
    get_storage = store.storage_get
    lookup = cmap.lookup

    def local() -> None:
        for rec in seq:
            get_storage(rec).get("state")

    def mapped() -> None:
        for rec in seq:
            lookup(rec)["state"]

    rows = _interleaved({("local-storage", "lookup"): local, ("composite-map", "lookup"): mapped}, accesses, repeats)
    return BenchReport("storage", rows, "composite-map", compute_ratios(rows, "composite-map"), {"objects": objects})


# -- policy ----------------------------------------------------------------------------


def _policy_replay(trace, programs, context: str, bound: list[int]) -> tuple[list[float], int, int, int]:
    store = ObjectStore()
    tree = CgroupTree()
    for prog in programs:
        tree.attach(tree.root, prog.hook, prog, allow_multi=True)
    tmap = TaskCgroupMap(tree)
    for pid in bound:
        bind_context(store, task(pid), context)
    dispatcher = Dispatcher(tree, store)
    clock = time.perf_counter_ns
    samples: list[float] = []
    executed = denied = 0
    for rec in trace:
        store.resolve(rec.subject)
        tmap.ensure(rec.subject)
        for ev in expand_syscall(rec):
            t0 = clock()
            res = dispatcher.dispatch_event(ev, tmap)
            samples.append(clock() - t0)
            executed += len(res.executed)
            if res.final:
                denied += 1
                break
    return samples, executed, len(samples), denied


def policy_suite(size: int = 20000, seed: int = 0) -> BenchReport:
    """Compiled minimal program set vs the runtime interpreter on an fs-only policy."""
    policy = parse_policy(FS_ONLY_POLICY)
    trace = mixed(size, seed, lifecycle=False)
    bound = [1, 2, 3, 4]  # the generator's initial tasks; children inherit on fork
    pset = compile_policy(policy, {"id": "bench"})
    interp = RuntimeInterpreter(policy)
    rows = []
    per_event = {}
    denials = {}
    for name, programs, ctx in (
        ("compiled", pset.programs, pset.context),
        ("interpreter", interp.programs, interp.context),
    ):
        samples, executed, events, denied = _policy_replay(trace, programs, ctx, bound)
        rows.append(summarize(name, samples, "mixed"))
        per_event[name] = executed / events if events else 0.0
        denials[name] = denied
    extra = {"programs_per_event": per_event, "denied": denials, "policy_hooks": sorted(h.value for h in pset.hooks_covered)}
    return BenchReport("policy", rows, "interpreter", compute_ratios(rows, "interpreter"), extra)


# -- kernels ---------------------------------------------------------------------------


def _random_dag(n: int, m: int, rng: random.Random) -> tuple[list[int], list[int]]:
    src, dst = [], []
    for _ in range(m):
        a, b = rng.randrange(n), rng.randrange(n)
        if a == b:
            continue
        src.append(min(a, b))
        dst.append(max(a, b))
    return src, dst


def kernels_suite(seed: int = 0, repeats: int = 15) -> BenchReport:
    """Compiled kernels vs their pure-Python fallbacks."""
    from array import array

    from lsmaudit.events import FreeRecord
    from lsmaudit.provenance.engine import CaptureEngine

    rng = random.Random(seed)
    n = 5000
    src, dst = _random_dag(n, 20000, rng)
    src_a, dst_a = array("q", src), array("q", dst)
    node_obj = array("q", [i % 60 for i in range(n)])
    latest = array("q", [n - 60 + k for k in range(60)])
    trace = mixed(3000, seed)

    def capture_replay(backend) -> None:
        store = ObjectStore()
        eng = CaptureEngine(store, backend=backend)
        for rec in trace:
            if type(rec) is FreeRecord:
                store.end_lifecycle(rec.object)
                continue
            for ev in expand_syscall(rec):
                eng.capture(ev)

    backends = [("python", kernels.python_backend)]
    if kernels.compiled_backend is not None:
        backends.append(("compiled", kernels.compiled_backend))
    cases: dict[tuple[str, str], Callable[[], None]] = {}
    for name, be in backends:
        cases[(name, "topo_order")] = lambda be=be: be.topo_order(n, src_a, dst_a)
        cases[(name, "flow_pairs")] = lambda be=be: be.flow_pairs(n, src_a, dst_a, node_obj, latest)
        cases[(name, "capture")] = lambda be=be: capture_replay(be)
    rows = _interleaved(cases, 1, repeats)
    extra = {"active_backend": kernels.BACKEND, "compiled_available": kernels.compiled_backend is not None}
    return BenchReport("kernels", rows, "python", compute_ratios(rows, "python"), extra)


def run_bench(suite: str, seed: int = 0) -> BenchReport:
    """Run one named suite on a single pinned CPU."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    with _pinned():
        if suite == "invocation":
            report = invocation_suite()
        elif suite == "storage":
            report = storage_suite(seed=seed)
        elif suite == "policy":
            report = policy_suite(seed=seed)
        else:
            report = kernels_suite(seed=seed)
    report.extra["seed"] = seed
    return report
