import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsmaudit.errors import InvalidDocument, UnmodeledHook
from lsmaudit.events import Hook, Syscall, expand_syscall, task
from lsmaudit.harness.pipeline import RunOptions, run_end_to_end
from lsmaudit.harness.scenario import Scenario
from lsmaudit.harness.workloads import fig4_scenario, generate_trace, FIG4_CHILD, FIG4_FILE, FIG4_PARENT, FIG4_PIPE, mixed
from lsmaudit.motifs import (
    Motif,
    compose,
    fold_hook_motifs,
    hook_motif,
    instantiate,
    match,
    program_motif,
    syscall_motif,
)
from lsmaudit.provenance import serialize
from lsmaudit.templates import bind_roles
from strategies import syscall_records


@pytest.mark.parametrize("hook", list(Hook), ids=lambda h: h.value)
def test_hook_motifs_are_small_dags(hook):
    m = hook_motif(hook, Syscall.WRITE if hook == Hook.FILE_PERMISSION else None)
    assert m.is_dag()
    assert all(v in (0, 1) for _, v in m.nodes)


def test_file_permission_direction_follows_syscall():
    r = hook_motif(Hook.FILE_PERMISSION, Syscall.READ)
    w = hook_motif(Hook.FILE_PERMISSION, Syscall.WRITE)
    assert ("object", 0) in {e.src for e in r.edges if e.relation == "read"}
    assert ("subject", 0) in {e.src for e in w.edges if e.relation == "write"}


def test_unknown_hook():
    with pytest.raises(UnmodeledHook):
        hook_motif("inode_rename")


def test_compose_rejects_recreation():
    rec = fig4_scenario()[1]  # the fork
    step = instantiate(hook_motif(Hook.TASK_FORK), bind_roles(rec.subject, rec.object))
    once = compose(Motif(), step)
    with pytest.raises(ValueError):
        compose(once, step)


@given(syscall_records(max_depth=6))
def test_fold_equals_syscall_motif(rec):
    assert fold_hook_motifs(rec) == syscall_motif(rec)


def test_fig4_motif_shape():
    m = program_motif(fig4_scenario())
    labels = {lab for lab, _ in m.nodes}
    assert {str(FIG4_PARENT), str(FIG4_CHILD), str(FIG4_PIPE), str(FIG4_FILE)} <= labels
    assert m.is_dag()


def run(trace, **kw):
    return run_end_to_end(Scenario(), trace, RunOptions(**kw)).document


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(0, 200), st.booleans(), st.booleans())
def test_capture_matches_program_motif(seed, size, merge, avoid):
    trace = generate_trace("mixed", size, seed)
    doc = run(trace, merge=merge, avoid_versions=avoid)
    assert match(doc, program_motif(trace, merge=merge, avoid_versions=avoid), search=False)


def test_mismatch_is_reported():
    trace = fig4_scenario()
    doc = run(trace)
    doc.edges.pop()
    report = match(doc, program_motif(trace))
    assert not report.matched
    assert any(line.startswith("missing edge") for line in report.mismatches)


def test_wrong_reduction_is_reported():
    trace = generate_trace("fileserver", 200, 1)
    report = match(run(trace), program_motif(trace, merge=False))
    assert not report.matched


def test_prefix_embeds_in_unreduced_capture():
    trace = mixed(120, 5, lifecycle=False)
    doc = run(trace, merge=False, avoid_versions=False)
    prefix = program_motif(trace[:60], merge=False, avoid_versions=False)
    assert match(doc, prefix, embed=True, search=False)
    assert not match(doc, prefix, search=False)


def test_structural_search_finds_renamed_objects():
    trace = fig4_scenario()
    doc = run(trace)
    ren = {FIG4_PARENT: task(500), FIG4_CHILD: task(501)}
    from lsmaudit.events import memory_of
    from lsmaudit.provenance import ProvEdge, ProvNode

    ren.update({memory_of(k): memory_of(v) for k, v in list(ren.items())})
    els = [ProvNode(ren.get(n.object, n.object), n.version) for n in doc.nodes.values()]
    for e in doc.edges:
        ne = ProvEdge(e.id, ren.get(e.src, e.src), e.src_version, ren.get(e.dst, e.dst), e.dst_version, e.relation, e.first_ts)
        ne.count = e.count
        els.append(ne)
    shifted = serialize(els)
    motif = program_motif(trace)
    assert not match(shifted, motif, search=False)
    report = match(shifted, motif)
    assert report.matched and report.witness


def test_opaque_objects_vanish_from_both_sides():
    trace = fig4_scenario()
    scenario = Scenario(opaque=[FIG4_PIPE])
    doc = run_end_to_end(scenario, trace).document
    assert all(n.object != FIG4_PIPE for n in doc.nodes.values())
    assert match(doc, program_motif(trace, opaque=[FIG4_PIPE]))


def test_match_rejects_non_documents():
    with pytest.raises(InvalidDocument):
        match({"nodes": []}, program_motif([]))


def test_expansion_drives_fold():
    rec = fig4_scenario()[0]
    assert len(expand_syscall(rec)) >= 1
    assert fold_hook_motifs(rec) == syscall_motif(rec)
