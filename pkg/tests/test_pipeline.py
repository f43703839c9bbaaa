from hypothesis import given, settings
from hypothesis import strategies as st

from lsmaudit.events import Hook, Syscall, SyscallRecord, inode, task
from lsmaudit.harness.pipeline import RunOptions, run_end_to_end
from lsmaudit.harness.scenario import AttachmentSpec, CaptureSpec, CgroupSpec, Scenario, TaskPlacement
from lsmaudit.harness.workloads import fig4_scenario, generate_trace
from lsmaudit.motifs import match, program_motif
from lsmaudit.provenance import is_acyclic


def test_fig4_end_to_end():
    res = run_end_to_end(Scenario(), fig4_scenario())
    assert res.exit_status == 0 and not res.violations
    assert match(res.document, program_motif(fig4_scenario()))
    assert res.document.meta["merge"] is True


def test_threaded_small_buffer_matches_synchronous():
    trace = generate_trace("mixed", 1500, 4)
    a = run_end_to_end(Scenario(), trace).document
    b = run_end_to_end(Scenario(), trace, RunOptions(threaded=True, capacity=16)).document
    assert list(a.nodes) == list(b.nodes)
    assert [(e.id, e.count) for e in a.edges] == [(e.id, e.count) for e in b.edges]


def test_drop_on_full_counts_losses():
    trace = generate_trace("mixed", 800, 4)
    res = run_end_to_end(Scenario(), trace, RunOptions(drop_on_full=True, capacity=1, threaded=True))
    s = res.stats
    assert s["elements_serialized"] + s["dropped"] == s["elements_pushed"]


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(0, 400))
def test_stats_conservation_and_hygiene(seed, size):
    trace = generate_trace("mixed", size, seed)
    res = run_end_to_end(Scenario(), trace)
    s = res.stats
    assert s["records"] == len(trace) == s["syscalls"] + s["freed"]
    assert s["hook_events"] == sum(s["hooks"].values())
    assert s["elements_pushed"] == s["elements_serialized"] + s["dropped"]
    assert s["dropped"] == 0
    assert s["storage"]["live_count"] == s["objects_holding_storage"]
    assert is_acyclic(res.document)


def test_deny_attachment_stops_syscall_and_capture():
    scenario = Scenario(
        cgroups=[CgroupSpec("jail")],
        tasks=[TaskPlacement(5, "jail")],
        attachments=[AttachmentSpec("jail", Hook.FILE_PERMISSION, "deny", 13)],
    )
    trace = [SyscallRecord(Syscall.READ, task(5), 1, inode("sda1", 1))]
    res = run_end_to_end(scenario, trace)
    assert res.stats["denied"] == 1
    # capture sits at the root, above the denying program, so nothing is recorded
    assert len(res.document) == 0


def test_capture_scoped_to_cgroup():
    scenario = Scenario(
        cgroups=[CgroupSpec("pod")],
        tasks=[TaskPlacement(5, "pod")],
        capture=CaptureSpec(cgroups=["pod"]),
    )
    trace = [
        SyscallRecord(Syscall.READ, task(5), 1, inode("sda1", 1)),
        SyscallRecord(Syscall.READ, task(6), 2, inode("sda1", 2)),
    ]
    doc = run_end_to_end(scenario, trace).document
    assert task(6) not in doc.objects() and task(5) in doc.objects()


def test_forked_child_joins_parent_cgroup():
    scenario = Scenario(cgroups=[CgroupSpec("pod")], tasks=[TaskPlacement(5, "pod")], capture=CaptureSpec(cgroups=["pod"]))
    trace = [
        SyscallRecord(Syscall.FORK, task(5), 1, task(6)),
        SyscallRecord(Syscall.READ, task(6), 2, inode("sda1", 2)),
    ]
    assert inode("sda1", 2) in run_end_to_end(scenario, trace).document.objects()
