import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsmaudit import kernels
from lsmaudit.errors import DeadObject, StorageFailure
from lsmaudit.events import (
    Syscall,
    SyscallRecord,
    cred_of,
    expand_syscall,
    inode,
    memory_of,
    task,
)
from lsmaudit.harness.workloads import generate_trace
from lsmaudit.provenance import CaptureEngine, CaptureFilter, ProvEdge, ProvNode, is_acyclic, serialize
from lsmaudit.store import CONTEXT_KEY, ObjectStore
from oracles import AlwaysVersionCapture, document_closure

BACKENDS = [kernels.python_backend] + ([kernels.compiled_backend] if kernels.compiled_backend else [])
T, C = task(100), task(101)
F = inode("sda1", 1)


def engine(backend=None, **kw):
    out = []
    eng = CaptureEngine(ObjectStore(), out.append, backend=backend, **kw)
    return eng, out


def feed(eng, recs):
    for r in recs:
        if isinstance(r, SyscallRecord):
            for ev in expand_syscall(r):
                eng.capture(ev)


def read(ts, obj=F, subject=T):
    return SyscallRecord(Syscall.READ, subject, ts, obj)


def write(ts, obj=F, subject=T):
    return SyscallRecord(Syscall.WRITE, subject, ts, obj)


def edges(out):
    return [(e.src, e.src_version, e.dst, e.dst_version, e.relation, e.count) for e in out if isinstance(e, ProvEdge)]


@pytest.fixture(params=BACKENDS, ids=lambda b: b.__name__.rsplit(".", 1)[-1])
def backend(request):
    return request.param


def test_repeated_read_merges(backend):
    eng, out = engine(backend)
    feed(eng, [read(1), read(2), read(3)])
    assert edges(out) == [(T, 1, T, 2, "version", 1), (F, 1, T, 2, "read", 3)]
    assert eng.stats.merged == 2 and eng.stats.avoided == 2
    assert out[-1].first_ts == 1 and out[-1].last_ts == 3


def test_without_merge_keeps_parallel_edges(backend):
    eng, out = engine(backend, merge=False)
    feed(eng, [read(1), read(2)])
    assert edges(out) == [(T, 1, T, 2, "version", 1), (F, 1, T, 2, "read", 1), (F, 1, T, 2, "read", 1)]


def test_without_avoidance_versions_every_inflow(backend):
    eng, out = engine(backend, avoid_versions=False)
    feed(eng, [read(1), read(2)])
    assert eng.version_of(T) == 3
    assert sum(1 for e in edges(out) if e[4] == "read") == 2


def test_new_source_version_breaks_avoidance(backend):
    eng, out = engine(backend)
    feed(eng, [read(1), write(2, subject=C), read(3)])
    reads = [e for e in edges(out) if e[4] == "read"]
    assert [(e[1], e[3]) for e in reads] == [(1, 2), (2, 3)]


def test_fork_creates_child_and_memory(backend):
    eng, out = engine(backend)
    feed(eng, [SyscallRecord(Syscall.FORK, T, 1, C)])
    assert {(e[0], e[2], e[4]) for e in edges(out)} == {
        (T, C, "fork"),
        (T, memory_of(C), "create"),
        (memory_of(T), memory_of(C), "fork"),
    }


def test_create_on_existing_object_degrades_to_flow(backend):
    eng, out = engine(backend)
    eng.bump_version(C)
    feed(eng, [SyscallRecord(Syscall.FORK, T, 1, C)])
    assert eng.version_of(C) == 3  # 1 -> 2 by bump, 2 -> 3 by the fork flow


def test_opaque_objects_are_skipped(backend):
    eng, out = engine(backend)
    eng.set_opaque(F)
    assert eng.is_opaque(F)
    feed(eng, [read(1)])
    assert not edges(out) and eng.stats.opaque_skips == 1
    with pytest.raises(ValueError):
        eng.bump_version(F)
    eng.set_opaque(F, False)
    feed(eng, [read(2)])
    assert edges(out)


def test_relation_and_kind_filters(backend):
    eng, out = engine(backend, capture_filter=CaptureFilter(recorded_relations={"write"}))
    feed(eng, [read(1), write(2)])
    assert {e[4] for e in edges(out)} == {"write"}
    assert eng.stats.filtered == 3  # version + read, then the version edge of the write
    eng, out = engine(backend, capture_filter=CaptureFilter(recorded_object_kinds={"task"}))
    feed(eng, [read(1)])
    assert all(n.kind == "task" for n in out if isinstance(n, ProvNode))


def test_context_allowlist(backend):
    store = ObjectStore()
    out = []
    eng = CaptureEngine(store, out.append, backend=backend, capture_filter=CaptureFilter(context_allowlist={"pod"}))
    feed(eng, [read(1)])
    assert out == []
    store.storage_get(cred_of(T), create_if_missing=True).set(CONTEXT_KEY, b"pod")
    feed(eng, [read(2, obj=inode("sda1", 9))])
    assert out
    assert [n.annotations for n in out if isinstance(n, ProvNode) and n.object == T][0] == {"security_context": "pod"}


def test_filter_includes():
    wide = CaptureFilter()
    narrow = CaptureFilter(recorded_relations={"read"})
    assert wide.includes(narrow) and not narrow.includes(wide)
    with pytest.raises(ValueError):
        CaptureFilter(recorded_relations={"teleport"})


def test_duplicate_event_captured_once(backend):
    eng, out = engine(backend)
    ev = expand_syscall(write(1))[0]
    eng.capture(ev)
    assert eng.capture(ev) == []
    assert eng.stats.duplicates == 1 and eng.stats.events == 1


def test_corrupt_state_is_reported(backend):
    eng, out = engine(backend)
    eng.store.storage_get(F, create_if_missing=True).set("prov", b"short")
    with pytest.raises(StorageFailure):
        feed(eng, [read(1)])


def test_dead_objects_cannot_be_captured(backend):
    eng, out = engine(backend)
    eng.store.resolve(F)
    eng.store.end_lifecycle(F)
    with pytest.raises(DeadObject):
        feed(eng, [read(1)])


def test_event_without_object_role():
    eng, _ = engine()
    rec = SyscallRecord(Syscall.READ, T, 1, F)
    from lsmaudit.events import Hook, HookEvent

    with pytest.raises(StorageFailure):
        eng.capture(HookEvent(Hook.FILE_PERMISSION, T, None, rec, 0))


def test_program_returns_allow():
    eng, out = engine()
    prog = eng.capture_program(expand_syscall(read(1))[0].hook)
    assert prog.body(expand_syscall(read(1))[0], None, None) == 0
    assert len(eng.programs()) == 14


def capture_all(backend, trace, **kw):
    eng, out = engine(backend, **kw)
    feed(eng, trace)
    return eng, out


def fingerprint(out):
    return [
        ("n", el.object, el.version) if isinstance(el, ProvNode) else ("e", el.id, el.src, el.src_version, el.dst, el.dst_version, el.relation, el.count, el.first_ts, el.last_ts)
        for el in out
    ]


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(0, 300), st.booleans(), st.booleans())
def test_backends_agree(seed, size, merge, avoid):
    trace = generate_trace("mixed", size, seed)
    runs = [capture_all(b, trace, merge=merge, avoid_versions=avoid)[1] for b in BACKENDS]
    assert all(fingerprint(r) == fingerprint(runs[0]) for r in runs)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(0, 300), st.booleans(), st.booleans())
def test_dependency_order_acyclicity_and_closure(seed, size, merge, avoid):
    trace = generate_trace("mixed", size, seed)
    eng, out = capture_all(None, trace, merge=merge, avoid_versions=avoid)
    doc = serialize(out)  # strict: raises if an edge precedes its nodes
    assert is_acyclic(doc)
    assert document_closure(doc) == AlwaysVersionCapture().replay(trace).closure()
    assert eng.stats.emitted == len(out)
    assert sum(e.count for e in doc.edges) == len(doc.edges) + eng.stats.merged
