"""Graph motifs: the statically predicted shape of captured provenance.

A motif is a small labelled DAG.  Node keys are ``(label, version)`` pairs;
edges carry a relation and a predicted merge count.  Three builders:

* :func:`hook_motif` - one hook's template with *relative* versions: 0 is
  the version an object has when the hook starts, 1 the version it ends
  with if the hook changes it (or creates it);
* :func:`syscall_motif` - the hooks of one syscall instantiated on concrete
  objects, no reductions;
* :func:`program_motif` - a whole trace, with merging and version avoidance
  applied so it predicts the reduced graph.

:func:`compose` glues instantiated hook motifs along version chains; folding
it over a syscall's hooks must agree with :func:`syscall_motif`.

:func:`match` checks a captured document against a motif.
"""

from __future__ import annotations

from array import array
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import networkx as nx
from networkx.algorithms import isomorphism as iso

from lsmaudit import kernels
from lsmaudit.errors import InvalidDocument, UnmodeledHook
from lsmaudit.events import (
    SOCKET,
    Hook,
    KernelObjectId,
    NetInfo,
    Syscall,
    SyscallFlags,
    SyscallRecord,
    expand_syscall,
    inode,
    task,
)
from lsmaudit.provenance.document import ProvDocument
from lsmaudit.provenance.elements import NODE_KIND
from lsmaudit.templates import (
    OBJECT_MEM,
    SUBJECT,
    SUBJECT_MEM,
    VERSION,
    Flow,
    Touch,
    bind_roles,
    template_for,
)

Key = tuple[str, int]

ANY_KIND = "*"

_ROLE_KIND = {SUBJECT: "task", SUBJECT_MEM: "memory", OBJECT_MEM: "memory"}
_OBJECT_KIND = {
    Hook.TASK_FORK: "task",
    Hook.SOCKET_CREATE: "socket",
    Hook.SOCKET_BIND: "socket",
    Hook.SOCKET_LISTEN: "socket",
    Hook.SOCKET_ACCEPT: "socket",
    Hook.SOCKET_CONNECT: "socket",
}


@dataclass(frozen=True)
class NodeTemplate:
    kind: str
    fresh: bool = False


@dataclass
class EdgeTemplate:
    src: Key
    dst: Key
    relation: str
    count: int = 1

    def astuple(self) -> tuple:
        return (self.src, self.dst, self.relation, self.count)


@dataclass
class Motif:
    nodes: dict[Key, NodeTemplate] = field(default_factory=dict)
    edges: list[EdgeTemplate] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def add_node(self, key: Key, kind: str, fresh: bool = False) -> None:
        if key not in self.nodes:
            self.nodes[key] = NodeTemplate(kind, fresh)

    def canonical(self) -> tuple:
        nodes = tuple(sorted((k, n.kind, n.fresh) for k, n in self.nodes.items()))
        edges = tuple(sorted(e.astuple() for e in self.edges))
        return nodes, edges

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Motif):
            return NotImplemented
        return self.canonical() == other.canonical()

    def latest(self, label: str) -> int:
        return max((v for (lab, v) in self.nodes if lab == label), default=0)

    def is_dag(self) -> bool:
        index = {k: i for i, k in enumerate(self.nodes)}
        src = array("q", (index[e.src] for e in self.edges))
        dst = array("q", (index[e.dst] for e in self.edges))
        return kernels.topo_order(len(index), src, dst) is not None

    def to_graph(self) -> nx.MultiDiGraph:
        g = nx.MultiDiGraph()
        for key, n in self.nodes.items():
            g.add_node(key, kind=n.kind)
        for e in self.edges:
            g.add_edge(e.src, e.dst, relation=e.relation, count=e.count)
        return g


# -- per-hook motifs --------------------------------------------------------------


def _role_kind(hook: Hook, role: str) -> str:
    if role in _ROLE_KIND:
        return _ROLE_KIND[role]
    return _OBJECT_KIND.get(hook, "file")


def hook_motif(hook: Hook | str, syscall: Syscall | None = None) -> Motif:
    """Relative motif for ``hook``; ``syscall`` picks the file_permission direction."""
    try:
        hook = Hook(hook)
    except ValueError:
        raise UnmodeledHook(f"no motif for hook {hook!r}") from None
    tpl = template_for(hook, syscall)
    m = Motif(params={"hook": hook.value})
    state: dict[str, int] = {}  # role -> relative version reached so far
    created: set[str] = set()

    def ref(role: str) -> Key:
        if role not in state:
            state[role] = 0
            m.add_node((role, 0), _role_kind(hook, role))
        return (role, state[role])

    def bump(role: str) -> Key:
        old = ref(role)
        state[role] += 1
        new = (role, state[role])
        m.add_node(new, _role_kind(hook, role), fresh=True)
        m.edges.append(EdgeTemplate(old, new, VERSION))
        return new

    for op in tpl:
        if isinstance(op, Touch):
            ref(op.role)
        elif isinstance(op, Flow):
            src = ref(op.src)
            m.edges.append(EdgeTemplate(src, bump(op.dst), op.relation))
        else:
            # created objects start at relative version 1 with no predecessor
            if op.dst in state:
                raise UnmodeledHook(f"{hook.value} creates an object it already references")
            state[op.dst] = 1
            created.add(op.dst)
            dst = (op.dst, 1)
            m.add_node(dst, _role_kind(hook, op.dst), fresh=True)
            for src_role, rel in op.sources:
                m.edges.append(EdgeTemplate(ref(src_role), dst, rel))
    m.params["created"] = sorted(created)
    return m


def instantiate(motif: Motif, binding: Mapping[str, KernelObjectId]) -> Motif:
    """Replace role labels by object labels, and wildcard kinds by the objects' kinds."""
    out = Motif(params=dict(motif.params))
    ren = {}
    for (role, v), n in motif.nodes.items():
        obj = binding[role]
        key = (str(obj), v)
        ren[(role, v)] = key
        out.nodes[key] = NodeTemplate(NODE_KIND[obj.kind], n.fresh)
    out.edges = [EdgeTemplate(ren[e.src], ren[e.dst], e.relation, e.count) for e in motif.edges]
    out.params["created"] = [str(binding[r]) for r in motif.params.get("created", [])]
    return out


def compose(base: Motif, step: Motif) -> Motif:
    """Append ``step`` (relative versions, object labels) after ``base``.

    Relative version ``k`` of a label maps to ``latest(base) + k``; a label
    not yet in ``base`` starts at version 1.  Objects created by ``step``
    must not already exist in ``base``.
    """
    out = Motif(dict(base.nodes), list(base.edges), dict(base.params))
    created = set(step.params.get("created", []))
    offset: dict[str, int] = {}
    for label, _ in step.nodes:
        if label in offset:
            continue
        cur = base.latest(label)
        if label in created:
            if cur:
                raise ValueError(f"{label} is created but already exists")
            offset[label] = 0
        else:
            offset[label] = cur or 1
    ren = {}
    for (label, v), n in step.nodes.items():
        key = (label, v + offset[label]) if label not in created else (label, v)
        ren[(label, v)] = key
        if key not in out.nodes:
            out.nodes[key] = n
    out.edges += [EdgeTemplate(ren[e.src], ren[e.dst], e.relation, e.count) for e in step.edges]
    out.params.pop("created", None)
    out.params.pop("hook", None)
    return out


def fold_hook_motifs(rec: SyscallRecord) -> Motif:
    """Compose the hook motifs of ``rec``'s expansion, hook by hook."""
    m = Motif()
    for ev in expand_syscall(rec):
        step = instantiate(hook_motif(ev.hook, rec.syscall), bind_roles(ev.subject, ev.object))
        m = compose(m, step)
    return m


# -- symbolic capture -----------------------------------------------------------------


class _Symbolic:
    """Replays templates over object labels, tracking versions and last inflows."""

    def __init__(self, merge: bool, avoid: bool, opaque: Iterable[KernelObjectId] = ()) -> None:
        self.m = Motif()
        self.merge = merge
        self.avoid = avoid
        self.opaque = set(opaque)
        self.cur: dict[KernelObjectId, int] = {}
        self.last_in: dict[KernelObjectId, EdgeTemplate] = {}

    def ref(self, obj: KernelObjectId) -> Key:
        if obj not in self.cur:
            self.cur[obj] = 1
            self.m.add_node((str(obj), 1), NODE_KIND[obj.kind])
        return (str(obj), self.cur[obj])

    def flow(self, src: KernelObjectId, dst: KernelObjectId, rel: str) -> None:
        if src == dst or src in self.opaque or dst in self.opaque:
            return
        s = self.ref(src)
        d = self.ref(dst)
        last = self.last_in.get(dst)
        if self.avoid and last is not None and last.src == s and last.relation == rel:
            if self.merge:
                last.count += 1
            else:
                e = EdgeTemplate(s, d, rel)
                self.m.edges.append(e)
                self.last_in[dst] = e
            return
        self.cur[dst] += 1
        new = (str(dst), self.cur[dst])
        self.m.add_node(new, NODE_KIND[dst.kind], fresh=True)
        self.m.edges.append(EdgeTemplate(d, new, VERSION))
        e = EdgeTemplate(s, new, rel)
        self.m.edges.append(e)
        self.last_in[dst] = e

    def create(self, dst: KernelObjectId, sources: list[tuple[KernelObjectId, str]]) -> None:
        if dst in self.opaque or any(s in self.opaque for s, _ in sources):
            return
        if dst in self.cur:
            for s, rel in sources:
                self.flow(s, dst, rel)
            return
        self.cur[dst] = 1
        d = (str(dst), 1)
        self.m.add_node(d, NODE_KIND[dst.kind], fresh=True)
        for s, rel in sources:
            if s == dst:
                continue
            e = EdgeTemplate(self.ref(s), d, rel)
            self.m.edges.append(e)
            self.last_in[dst] = e

    def touch(self, obj: KernelObjectId) -> None:
        if obj not in self.opaque:
            self.ref(obj)

    def record(self, rec: SyscallRecord) -> None:
        for ev in expand_syscall(rec):
            roles = bind_roles(ev.subject, ev.object)
            for op in template_for(ev.hook, rec.syscall):
                if isinstance(op, Touch):
                    self.touch(roles[op.role])
                elif isinstance(op, Flow):
                    self.flow(roles[op.src], roles[op.dst], op.relation)
                else:
                    self.create(roles[op.dst], [(roles[r], rel) for r, rel in op.sources])


def canonical_record(syscall: Syscall | str, path_depth: int = 0, creates_new_file: bool = False) -> SyscallRecord:
    """A representative record for ``syscall`` on fixed object identities."""
    sc = Syscall.parse(syscall) if isinstance(syscall, str) else syscall
    subject = task(1)
    if sc == Syscall.FORK:
        obj = task(2)
    elif sc in (Syscall.SOCKET, Syscall.BIND, Syscall.LISTEN, Syscall.ACCEPT, Syscall.CONNECT):
        obj = KernelObjectId(SOCKET, 1)
    else:
        obj = inode("fs0", 1)
    depth = path_depth if sc in (Syscall.OPEN, Syscall.EXECVE) else None
    net = NetInfo("outgoing", 80) if sc in (Syscall.BIND, Syscall.LISTEN, Syscall.ACCEPT, Syscall.CONNECT) else None
    flags = SyscallFlags(creates_new_file=creates_new_file and sc == Syscall.OPEN)
    return SyscallRecord(sc, subject, 1, obj, depth, flags, net).validate()


def syscall_motif(syscall: Syscall | str | SyscallRecord, path_depth: int = 0, creates_new_file: bool = False) -> Motif:
    """Unreduced motif of one syscall."""
    rec = syscall if isinstance(syscall, SyscallRecord) else canonical_record(syscall, path_depth, creates_new_file)
    sym = _Symbolic(merge=False, avoid=False)
    sym.record(rec)
    sym.m.params = {"syscall": rec.syscall.value, "path_depth": rec.path_depth}
    return sym.m


def program_motif(
    trace: Sequence,
    *,
    merge: bool = True,
    avoid_versions: bool = True,
    opaque: Iterable[KernelObjectId] = (),
) -> Motif:
    """Predicted (reduced) graph for a whole trace; lifecycle records are ignored."""
    sym = _Symbolic(merge, avoid_versions, opaque)
    for rec in trace:
        if isinstance(rec, SyscallRecord):
            sym.record(rec)
    sym.m.params = {"merge": merge, "avoid_versions": avoid_versions}
    return sym.m


# -- matching -------------------------------------------------------------------------------


@dataclass
class MatchReport:
    matched: bool
    witness: dict[Key, str] = field(default_factory=dict)
    mismatches: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.matched


def _doc_graph(doc: ProvDocument) -> nx.MultiDiGraph:
    g = nx.MultiDiGraph()
    for nid, n in doc.nodes.items():
        g.add_node(nid, kind=n.kind)
    for e in doc.edges:
        g.add_edge(e.src_id, e.dst_id, relation=e.relation, count=e.count)
    return g


def _label_id(key: Key) -> str:
    return f"{key[0]}#v{key[1]}"


def _edge_bag(edges) -> dict[tuple[str, str, str], list[int]]:
    bag: dict[tuple[str, str, str], list[int]] = {}
    for src, dst, rel, count in edges:
        bag.setdefault((src, dst, rel), []).append(count)
    for counts in bag.values():
        counts.sort()
    return bag


def _hint_diff(doc: ProvDocument, motif: Motif, embed: bool) -> list[str]:
    """Differences under the identity alignment motif label == object id."""
    diffs: list[str] = []
    want_nodes = {_label_id(k): n.kind for k, n in motif.nodes.items()}
    have_nodes = {nid: n.kind for nid, n in doc.nodes.items()}
    for nid, kind in want_nodes.items():
        if nid not in have_nodes:
            diffs.append(f"missing node {nid}")
        elif kind != ANY_KIND and have_nodes[nid] != kind:
            diffs.append(f"node {nid}: kind {have_nodes[nid]} != expected {kind}")
    if not embed:
        diffs += [f"extra node {nid}" for nid in have_nodes if nid not in want_nodes]
    want = _edge_bag((_label_id(e.src), _label_id(e.dst), e.relation, e.count) for e in motif.edges)
    have = _edge_bag((e.src_id, e.dst_id, e.relation, e.count) for e in doc.edges)
    for key, counts in want.items():
        src, dst, rel = key
        got = have.get(key)
        if got is None:
            diffs.append(f"missing edge {src} -{rel}-> {dst}")
        elif got != counts and not (embed and not (Counter(counts) - Counter(got))):
            diffs.append(f"edge {src} -{rel}-> {dst}: multiplicity {got} != expected {counts}")
    if not embed:
        for key in have:
            if key not in want:
                src, dst, rel = key
                diffs.append(f"extra edge {src} -{rel}-> {dst}")
    return diffs


def _edge_match(embed: bool):
    def same(g_attrs, m_attrs) -> bool:
        g = Counter((a["relation"], a["count"]) for a in g_attrs.values())
        m = Counter((a["relation"], a["count"]) for a in m_attrs.values())
        return not (m - g) if embed else g == m

    return same


def _node_match(g_attrs, m_attrs) -> bool:
    return m_attrs["kind"] == ANY_KIND or g_attrs["kind"] == m_attrs["kind"]


def match(doc: ProvDocument, motif: Motif, embed: bool = False, search: bool = True) -> MatchReport:
    """Check ``doc`` against ``motif``.

    Exact mode requires an isomorphism respecting node kinds, relations and
    merge counts; ``embed`` only requires the motif to occur as a subgraph.
    The identity alignment (motif labels are object ids) is tried first;
    otherwise, when ``search`` is set, a structural search runs.
    """
    if not isinstance(doc, ProvDocument):
        raise InvalidDocument("match expects a ProvDocument")
    for e in doc.edges:
        if e.src_id not in doc.nodes or e.dst_id not in doc.nodes:
            raise InvalidDocument(f"edge {e.id} references a missing node")
    diffs = _hint_diff(doc, motif, embed)
    if not diffs:
        return MatchReport(True, {k: _label_id(k) for k in motif.nodes})
    if search and (embed or len(doc.nodes) == len(motif.nodes)):
        g, m = _doc_graph(doc), motif.to_graph()
        matcher = iso.MultiDiGraphMatcher(g, m, node_match=_node_match, edge_match=_edge_match(embed))
        found = matcher.subgraph_is_monomorphic() if embed else matcher.is_isomorphic()
        if found:
            return MatchReport(True, {mk: gk for gk, mk in matcher.mapping.items()})
    return MatchReport(False, {}, diffs)
