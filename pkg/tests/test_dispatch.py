import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsmaudit import kernels
from lsmaudit.dispatch import (
    ALLOW,
    EACCES,
    AuditProgram,
    CgroupTree,
    Dispatcher,
    TaskCgroupMap,
    bench_dispatch,
    chain_tree,
    dispatch_event,
    is_deny,
    migrate_task,
    noop_program,
)
from lsmaudit.errors import HookMismatch, MultiNotAllowed, StaleHandle, UnknownCgroup, UnknownTask
from lsmaudit.events import Hook, task
from builders import attach_all, build_tree, event, fixed, random_attachments, random_parents
from oracles import dispatch_oracle

BACKENDS = [kernels.python_backend] + ([kernels.compiled_backend] if kernels.compiled_backend else [])


def simple_tree():
    tree = CgroupTree()
    tree.add("a")
    tree.add("b", "a")
    tree.add("c")
    tm = TaskCgroupMap(tree)
    tm.assign(task(1), "b")
    tm.assign(task(2), "c")
    return tree, tm


class TestTree:
    def test_unknown_parent(self):
        with pytest.raises(UnknownCgroup):
            CgroupTree().add("x", "nope")

    def test_duplicate(self):
        tree = CgroupTree()
        tree.add("x")
        with pytest.raises(ValueError):
            tree.add("x")

    def test_subtree(self):
        tree, _ = simple_tree()
        assert {n.id for n in tree.subtree("a")} == {"a", "b"}

    def test_hook_mismatch(self):
        tree, _ = simple_tree()
        with pytest.raises(HookMismatch):
            tree.attach("a", Hook.FILE_OPEN, noop_program("x", Hook.TASK_FORK))

    def test_multi_attach_gate(self):
        tree, _ = simple_tree()
        tree.attach("a", Hook.FILE_OPEN, noop_program("x", Hook.FILE_OPEN))
        with pytest.raises(MultiNotAllowed):
            tree.attach("a", Hook.FILE_OPEN, noop_program("y", Hook.FILE_OPEN), allow_multi=True)
        tree.attach("b", Hook.FILE_OPEN, noop_program("y", Hook.FILE_OPEN), allow_multi=True)
        tree.attach("b", Hook.FILE_OPEN, noop_program("z", Hook.FILE_OPEN), allow_multi=True)
        assert [p.id for p in tree.node("b").programs(Hook.FILE_OPEN)] == ["y", "z"]

    def test_detach_and_stale_handle(self):
        tree, tm = simple_tree()
        h = tree.attach("a", Hook.FILE_OPEN, fixed("deny", Hook.FILE_OPEN, EACCES))
        assert dispatch_event(event(Hook.FILE_OPEN, 1), tm).final == EACCES
        tree.detach(h)
        assert dispatch_event(event(Hook.FILE_OPEN, 1), tm).final == ALLOW
        with pytest.raises(StaleHandle):
            tree.detach(h)

    def test_unknown_task(self):
        tree, tm = simple_tree()
        with pytest.raises(UnknownTask):
            dispatch_event(event(Hook.FILE_OPEN, 99), tm)
        with pytest.raises(UnknownTask):
            migrate_task(task(99), "a", tm)

    def test_migrate(self):
        tree, tm = simple_tree()
        tree.attach("c", Hook.FILE_OPEN, fixed("deny", Hook.FILE_OPEN, EACCES))
        assert not dispatch_event(event(Hook.FILE_OPEN, 1), tm).denied
        migrate_task(task(1), "c", tm)
        assert dispatch_event(event(Hook.FILE_OPEN, 1), tm).denied


class TestDispatch:
    def test_leaf_to_root_fifo(self):
        tree, tm = simple_tree()
        for cg, pid in [("root", "r1"), ("b", "b1"), ("a", "a1"), ("b", "b2"), ("root", "r2")]:
            tree.attach(cg, Hook.FILE_OPEN, noop_program(pid, Hook.FILE_OPEN), allow_multi=True)
        res = dispatch_event(event(Hook.FILE_OPEN, 1), tm)
        assert res.executed == [("b", "b1"), ("b", "b2"), ("a", "a1"), ("root", "r1"), ("root", "r2")]

    def test_deny_short_circuits(self):
        tree, tm = simple_tree()
        tree.attach("b", Hook.FILE_OPEN, fixed("d", Hook.FILE_OPEN, EACCES), allow_multi=True)
        tree.attach("root", Hook.FILE_OPEN, noop_program("r", Hook.FILE_OPEN), allow_multi=True)
        res = dispatch_event(event(Hook.FILE_OPEN, 1), tm)
        assert res.final == EACCES and res.executed == [("b", "d")]
        assert is_deny(res.final)

    def test_markers(self):
        tree, tm = simple_tree()
        res = Dispatcher(tree, markers=True).dispatch_event(event(Hook.FILE_OPEN, 1), tm)
        assert res.markers[:2] == ["migrate_disable", "rcu_read_lock"]
        assert res.markers[-2:] == ["rcu_read_unlock", "migrate_enable"]

    def test_snapshot_survives_concurrent_detach(self):
        # a program that detaches a later program mid-walk does not change this walk
        tree, tm = simple_tree()
        handles = {}

        def body(ev, store, sink):
            if not handles["late"].detached:
                tree.detach(handles["late"])
            return ALLOW

        tree.attach("b", Hook.FILE_OPEN, AuditProgram("first", Hook.FILE_OPEN, body), allow_multi=True)
        handles["late"] = tree.attach("b", Hook.FILE_OPEN, noop_program("late", Hook.FILE_OPEN), allow_multi=True)
        assert [p for _, p in dispatch_event(event(Hook.FILE_OPEN, 1), tm).executed] == ["first", "late"]
        assert [p for _, p in dispatch_event(event(Hook.FILE_OPEN, 1), tm).executed] == ["first"]

    def test_concurrent_attach_while_dispatching(self):
        tree, tm = simple_tree()
        stop = threading.Event()

        def writer():
            i = 0
            while not stop.is_set():
                h = tree.attach("a", Hook.FILE_OPEN, noop_program(f"w{i}", Hook.FILE_OPEN), allow_multi=True)
                tree.detach(h)
                i += 1

        tree.attach("a", Hook.FILE_OPEN, noop_program("base", Hook.FILE_OPEN), allow_multi=True)
        t = threading.Thread(target=writer)
        t.start()
        try:
            for _ in range(2000):
                ids = [p for _, p in dispatch_event(event(Hook.FILE_OPEN, 1), tm).executed]
                assert ids[0] == "base" and len(ids) <= 2
        finally:
            stop.set()
            t.join()

    @pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__.rsplit(".", 1)[-1])
    @settings(max_examples=60)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_matches_ancestor_walk(self, backend, seed):
        rng = random.Random(seed)
        parent = random_parents(rng, max_nodes=24)
        tree = build_tree(parent)
        attachments = random_attachments(rng, parent, rng.randint(0, 40), hooks=[Hook.FILE_OPEN, Hook.TASK_FORK])
        attach_all(tree, attachments)
        tm = TaskCgroupMap(tree)
        disp = Dispatcher(tree, backend=backend)
        for pid, cg in enumerate(parent, start=1):
            tm.assign(task(pid), cg)
            for hook in (Hook.FILE_OPEN, Hook.TASK_FORK):
                res = disp.dispatch_event(event(hook, pid), tm)
                assert (res.final, res.executed) == dispatch_oracle(parent, attachments, cg, hook)


def test_chain_tree_depth():
    tree, leaf = chain_tree(5)
    assert leaf.depth == 5 and len(tree) == 6


def test_bench_dispatch_shape():
    rows = bench_dispatch(depth=3, programs=4, events=300, hook=Hook.SOCKET_BIND)
    assert [r.name for r in rows] == ["no-programs", "leaf-x4", "root-x4", "chain-depth1", "chain-depth3"]
    assert all(r.p50 > 0 and r.workload == "socket_bind" for r in rows)
