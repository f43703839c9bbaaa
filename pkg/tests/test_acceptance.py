"""Exit criteria with their time budgets.

Each test carries ``criterion(n)``; the terminal summary prints one
pass/fail line per criterion.
"""

import math
import random
import time
from fractions import Fraction
from itertools import chain, combinations

import pytest

from lsmaudit import kernels
from lsmaudit.dispatch import AuditProgram, Dispatcher, TaskCgroupMap
from lsmaudit.events import (
    CostModel,
    Hook,
    KernelObjectId,
    NetInfo,
    Syscall,
    SyscallFlags,
    SyscallRecord,
    estimate_cost,
    expand_syscall,
    inode,
    path_prefixes,
    task,
)
from lsmaudit.harness.bench import SUITES, run_bench
from lsmaudit.harness.pipeline import RunOptions, run_end_to_end
from lsmaudit.harness.scenario import Scenario
from lsmaudit.harness.workloads import fig4_scenario, generate_trace, mixed
from lsmaudit.motifs import canonical_record, fold_hook_motifs, match, program_motif, syscall_motif
from lsmaudit.pairing import check_pairing
from lsmaudit.policy import compile_policy, evaluate, parse_policy
from lsmaudit.provenance import flow_closure, is_acyclic
from lsmaudit.store import ObjectStore
from builders import attach_all, build_tree, event, random_attachments, random_parents
from corpus import SANDBOX_POLICY, PAIRING_CORPUS, PATHS, PERMS
from oracles import AlwaysVersionCapture, dispatch_oracle, document_closure, enumerate_paths, policy_allows_fs, policy_allows_net

pytestmark = pytest.mark.acceptance

BACKENDS = [kernels.python_backend] + ([kernels.compiled_backend] if kernels.compiled_backend else [])


class Budget:
    def __init__(self, seconds: float) -> None:
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.2f}s, budget {self.seconds}s"


def log_uniform(rng: random.Random, hi: int) -> int:
    return min(hi, int(math.exp(rng.uniform(0, math.log(hi + 1)))))


# hooks per syscall, written out independently of the expansion table
def expected_hook_count(sc: Syscall, depth: int, creates: bool) -> int:
    if sc == Syscall.OPEN:
        return depth + 1 + (2 if creates else 0)
    if sc == Syscall.EXECVE:
        return depth + 4
    return 1


@pytest.mark.criterion(1)
def test_hook_count_model():
    rng = random.Random(1)
    with Budget(1.0):
        for sc in Syscall:
            for depth in range(17):
                for creates in (False, True):
                    rec = canonical_record(sc, depth, creates)
                    assert len(expand_syscall(rec)) == expected_hook_count(sc, depth, creates and sc == Syscall.OPEN)
        # random objects and concrete paths of the same depth
        for _ in range(2000):
            sc = rng.choice([Syscall.OPEN, Syscall.EXECVE])
            depth = rng.randint(0, 16)
            creates = sc == Syscall.OPEN and rng.random() < 0.5
            # the root directory is the first searched component
            path = "".join(f"/d{rng.randrange(5)}" for _ in range(depth - 1)) + "/leaf" if depth else None
            rec = SyscallRecord(
                sc, task(rng.randrange(1, 50)), 1, inode("sda1", rng.randrange(1, 500)), depth,
                SyscallFlags(creates_new_file=creates), path=path,
            ).validate()
            assert len(expand_syscall(rec)) == expected_hook_count(sc, depth, creates)


@pytest.mark.criterion(2)
def test_cost_law():
    with Budget(1.0):
        for c in (1, 7, Fraction(3, 7)):
            model = CostModel.uniform(c)
            for n in range(1001):
                assert estimate_cost(canonical_record(Syscall.OPEN, n), model) == c * (n + 1)


@pytest.mark.criterion(3)
def test_dispatch_scoping_and_ordering():
    rng = random.Random(3)
    hooks = [Hook.FILE_OPEN, Hook.TASK_FORK, Hook.SOCKET_BIND]
    with Budget(30.0):
        for case in range(10_000):
            parent = random_parents(rng, max_nodes=64, max_depth=6)
            tree = build_tree(parent)
            attachments = random_attachments(rng, parent, rng.randint(0, 30), hooks=hooks)
            attach_all(tree, attachments)
            leaf = rng.choice(list(parent))
            hook = rng.choice(hooks)
            tm = TaskCgroupMap(tree)
            tm.assign(task(1), leaf)
            res = Dispatcher(tree, backend=BACKENDS[case % len(BACKENDS)]).dispatch_event(event(hook), tm)
            assert (res.final, res.executed) == dispatch_oracle(parent, attachments, leaf, hook)


def _heavy(pid: str, hook: Hook, rc: int) -> AuditProgram:
    def body(ev, store, sink) -> int:
        sum(range(200))
        return rc

    return AuditProgram(pid, hook, body)


@pytest.mark.criterion(4)
def test_isolation():
    rng = random.Random(4)
    hooks = [Hook.FILE_OPEN, Hook.TASK_FORK]
    with Budget(10.0):
        for case in range(1000):
            parent = random_parents(rng, max_nodes=32)
            tree = build_tree(parent)
            attach_all(tree, random_attachments(rng, parent, rng.randint(0, 20), hooks=hooks))
            tm = TaskCgroupMap(tree)
            for pid, cg in enumerate(parent, start=1):
                tm.assign(task(pid), cg)
            disp = Dispatcher(tree, backend=BACKENDS[case % len(BACKENDS)])

            def snapshot():
                return {
                    (pid, h): (lambda r: (r.final, r.executed))(disp.dispatch_event(event(h, pid), tm))
                    for pid in range(1, len(parent) + 1)
                    for h in hooks
                }

            before = snapshot()
            g = rng.choice(list(parent))
            for i in range(rng.randint(1, 6)):
                h = rng.choice(hooks)
                tree.attach(g, h, _heavy(f"heavy{i}", h, rng.choice([0, 0, 13])), allow_multi=True)
            after = snapshot()
            inside = {n.id for n in tree.subtree(g)}
            for pid, cg in enumerate(parent, start=1):
                if cg not in inside:
                    for h in hooks:
                        assert after[(pid, h)] == before[(pid, h)]


@pytest.mark.criterion(5)
@pytest.mark.criterion(12)
def test_acyclicity_and_storage_hygiene():
    rng = random.Random(5)
    budget = 60.0
    elapsed = 0.0  # capture and checks only; generating the input traces is not timed
    for _ in range(1000):
        size = log_uniform(rng, 10_000)
        trace = mixed(size, rng.randrange(2**32), lifecycle=True)
        start = time.perf_counter()
        res = run_end_to_end(Scenario(), trace)
        assert is_acyclic(res.document)
        s = res.stats
        assert s["storage"]["live_count"] == s["objects_holding_storage"]
        elapsed += time.perf_counter() - start
    assert elapsed < budget, f"took {elapsed:.2f}s, budget {budget}s"


@pytest.mark.criterion(6)
def test_reduction_soundness():
    rng = random.Random(6)
    with Budget(120.0):
        for _ in range(500):
            size = log_uniform(rng, 2000)
            trace = generate_trace("mixed", size, seed=rng.randrange(2**32))
            reduced = run_end_to_end(Scenario(), trace).document
            full = run_end_to_end(Scenario(), trace, RunOptions(merge=False, avoid_versions=False)).document
            expected = AlwaysVersionCapture().replay(trace).closure()
            assert document_closure(reduced) == document_closure(full) == expected
            assert flow_closure(reduced) == expected


@pytest.mark.criterion(7)
def test_fig4_round_trip():
    with Budget(1.0):
        trace = fig4_scenario()
        report = match(run_end_to_end(Scenario(), trace).document, program_motif(trace))
        assert report.matched, report.mismatches


@pytest.mark.criterion(8)
def test_motif_composition():
    with Budget(5.0):
        for sc in Syscall:
            for depth in range(5):
                for creates in (False, True):
                    rec = canonical_record(sc, depth, creates)
                    assert syscall_motif(sc, depth, creates) == fold_hook_motifs(rec)


def _net_event(subject, direction: str, port: int):
    sc = Syscall.CONNECT if direction == "outgoing" else (Syscall.BIND, Syscall.LISTEN, Syscall.ACCEPT)[port % 3]
    rec = SyscallRecord(sc, subject, port, KernelObjectId("socket", port), net=NetInfo(direction, port))
    return expand_syscall(rec)[0]


def _fs_event(subject, path: str, perm: str):
    f = inode("sda1", 1 + PATHS.index(path))
    if perm == "exec":
        rec = SyscallRecord(Syscall.EXECVE, subject, 1, f, len(path_prefixes(path)), path=path)
        return next(ev for ev in expand_syscall(rec) if ev.hook == Hook.BPRM_CHECK)
    sc = Syscall.WRITE if perm == "write" else Syscall.READ
    return expand_syscall(SyscallRecord(sc, subject, 1, f, path=path))[0]


@pytest.mark.criterion(9)
def test_policy_conformance_grid():
    subject = task(100)
    with Budget(30.0):
        pset = compile_policy(parse_policy(SANDBOX_POLICY))
        policy = pset.table[pset.context]
        store = ObjectStore()
        store.resolve(subject)
        pset.bind(store, subject)

        # "map" has no modeled hook; it is decided by the compiled policy directly
        fs_points = [
            (path, perm, None if perm == "map" else _fs_event(subject, path, perm), policy_allows_fs(SANDBOX_POLICY, path, perm))
            for path in PATHS
            for perm in PERMS
        ]
        checked = 0
        for port in range(1, 1025):
            for direction in ("incoming", "outgoing"):
                net_ev = _net_event(subject, direction, port)
                net_expected = policy_allows_net(SANDBOX_POLICY, direction, port)
                for path, perm, fs_ev, fs_expected in fs_points:
                    net_ok = evaluate(net_ev, pset, store)[0] == 0
                    if fs_ev is None:
                        fs_ok = policy.decide_fs(path, perm)[0]
                    else:
                        fs_ok = evaluate(fs_ev, pset, store)[0] == 0
                    assert (net_ok, fs_ok) == (net_expected, fs_expected)
                    checked += 1
            pset.drain_violations()
            pset.violation_log.clear()
        assert checked == 1024 * 2 * len(PATHS) * len(PERMS)

        assert evaluate(_net_event(subject, "outgoing", 443), pset, store)[0] == 0
        assert evaluate(_net_event(subject, "outgoing", 22), pset, store)[0] != 0
        tmp_files = [p for p in PATHS if p.startswith("/tmp/") and len(p) > len("/tmp/")]
        assert tmp_files
        for path in tmp_files:
            assert evaluate(_fs_event(subject, path, "write"), pset, store)[0] == 0


CATEGORY_HOOKS = {
    "network": {"socket_create", "socket_connect", "socket_bind", "socket_listen", "socket_accept"},
    "filesystem": {"file_open", "file_permission", "inode_permission"},
    "exec": {"bprm_check"},
}


def _policy_for(cats: set) -> dict:
    doc: dict = {"subject": "/usr/bin/app"}
    if "network" in cats:
        doc["network"] = {"default": "deny", "allow": [{"ports": [443]}]}
    if cats & {"filesystem", "exec"}:
        doc["filesystem"] = {
            "default": {
                "write": "deny" if "filesystem" in cats else "allow",
                "exec": "deny" if "exec" in cats else "allow",
            },
            "allow": [{"path": "/tmp/**", "perms": ["read", "write"]}],
        }
    return doc


@pytest.mark.criterion(10)
def test_minimization():
    names = sorted(CATEGORY_HOOKS)
    subsets = list(chain.from_iterable(combinations(names, k) for k in range(len(names) + 1)))
    assert len(subsets) == 8
    with Budget(1.0):
        for subset in subsets:
            cats = set(subset)
            pset = compile_policy(parse_policy(_policy_for(cats)))
            hooks = {p.hook.value for p in pset.programs}
            expected = set().union(*(CATEGORY_HOOKS[c] for c in cats)) | {"task_fork"}
            assert hooks == expected
            if "network" not in cats:
                assert not hooks & CATEGORY_HOOKS["network"]
            if "filesystem" not in cats:
                assert not hooks & CATEGORY_HOOKS["filesystem"]


@pytest.mark.criterion(11)
def test_pairing_corpus():
    assert len(PAIRING_CORPUS) == 20
    with Budget(5.0):
        for name, (body, clean) in PAIRING_CORPUS.items():
            text = f"program {name}\n{body}"
            report = check_pairing(text)
            violations, paths = enumerate_paths(text)
            assert {(v.program, v.path, v.resource, v.unmatched, v.underflow) for v in report.violations} == violations
            assert report.paths_checked == paths
            assert report.ok is clean


@pytest.mark.criterion(13)
@pytest.mark.bench
@pytest.mark.parametrize("suite", SUITES)
def test_bench_shapes(suite):
    with Budget(60.0):
        report = run_bench(suite, seed=0)
    if suite == "invocation":
        cv = report.extra["cv"]
        assert cv, "no mechanism ratios"
        for mechanism, value in cv.items():
            assert value < 0.25, f"{mechanism} cv {value:.3f}"
    elif suite == "storage":
        means = {r.name: r.mean for r in report.rows}
        assert means["local-storage"] <= means["composite-map"]
    elif suite == "policy":
        per_event = report.extra["programs_per_event"]
        assert per_event["compiled"] < per_event["interpreter"]
    else:
        assert {r.name for r in report.rows} >= {"python"}
