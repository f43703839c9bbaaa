"""Pure-Python implementations of the hot kernels.

Mirrors ``_kernels.pyx`` function for function; used when the compiled
extension is unavailable or ``LSMAUDIT_PURE=1`` is set.
"""

from __future__ import annotations

import struct
from collections.abc import Sequence

from lsmaudit.errors import StorageFailure


def run_chain(leaf, hook, ev, store, sink, executed: list) -> int:
    """Walk ``leaf`` up to the root and run the programs attached for ``hook``.

    Every level's program tuple is snapshotted before anything runs; the
    first nonzero return code stops the walk and is returned.
    """
    levels = []
    node = leaf
    while node is not None:
        progs = node.progs.get(hook)
        if progs:
            levels.append((node.id, progs))
        node = node.parent
    for cg_id, progs in levels:
        for prog in progs:
            executed.append((cg_id, prog.id))
            rc = prog.body(ev, store, sink)
            if rc:
                return rc
    return 0


def _csr(n: int, src: Sequence[int], dst: Sequence[int]):
    indeg = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    if len(src) != len(dst):
        raise ValueError("src/dst length mismatch")
    for u, v in zip(src, dst):
        if not (0 <= u < n and 0 <= v < n):
            raise IndexError("edge endpoint out of range")
        succ[u].append(v)
        indeg[v] += 1
    return succ, indeg


def topo_order(n: int, src: Sequence[int], dst: Sequence[int]) -> list[int] | None:
    """Kahn's algorithm; None if the graph has a cycle."""
    succ, indeg = _csr(n, src, dst)
    order = [v for v in range(n) if indeg[v] == 0]
    head = 0
    while head < len(order):
        u = order[head]
        head += 1
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                order.append(v)
    return order if len(order) == n else None


def flow_pairs(
    n: int,
    src: Sequence[int],
    dst: Sequence[int],
    node_obj: Sequence[int],
    latest: Sequence[int],
) -> set[tuple[int, int]] | None:
    """Object pairs (a, b), a != b, where some node of ``a`` reaches ``latest[b]``.

    ``latest[b]`` is the node index of object ``b``'s newest version (or -1).
    Returns None if the graph is cyclic.
    """
    succ, indeg = _csr(n, src, dst)
    stack = [v for v in range(n) if indeg[v] == 0]
    anc = [0] * n
    seen = 0
    while stack:
        u = stack.pop()
        seen += 1
        carry = anc[u] | (1 << node_obj[u])
        for v in succ[u]:
            anc[v] |= carry
            indeg[v] -= 1
            if indeg[v] == 0:
                stack.append(v)
    if seen != n:
        return None
    pairs: set[tuple[int, int]] = set()
    for b, node in enumerate(latest):
        if node < 0:
            continue
        bits = anc[node] & ~(1 << b)
        while bits:
            low = bits & -bits
            pairs.add((low.bit_length() - 1, b))
            bits ^= low
    return pairs


# -- capture state machine -----------------------------------------------------
#
# Per-object state is a packed little-endian record in the object's local
# storage: version u64 | flags u8 | last inflow edge i64 | last outflow edge i64.

STATE_KEY = "prov"
OPAQUE = 1
EMITTED = 2
LAST_IN = 9
LAST_OUT = 17
FRESH_STATE = struct.pack("<QBqq", 1, 0, -1, -1)
U64 = struct.Struct("<Q")
I64 = struct.Struct("<q")

# template op codes
FLOW = 0
TOUCH = 1
CREATE = 2


def check_state(raw) -> None:
    """Reject a state slot that is not a mutable record of the right size."""
    if type(raw) is not bytearray or len(raw) != len(FRESH_STATE):
        raise StorageFailure(f"corrupt capture state {raw!r}")


class CaptureCore:
    """Versioning, opacity and reduction rules over packed per-object state.

    ``make_node(obj, version, annotations)`` and ``make_edge(id, src, sv,
    dst, dv, relation, ts)`` build the emitted elements; ``annotate(obj)``
    (optional) returns annotations for task nodes.  Emitted elements are
    appended to ``out``; every edge ever created is kept in ``edges``.
    """

    def __init__(self, store, node_kind, make_node, make_edge, merge=True, avoid_versions=True,
                 kinds=None, relations=None, annotate=None):
        self.store = store
        self.live = store.records
        self.node_kind = node_kind
        self.make_node = make_node
        self.make_edge = make_edge
        self.merge = merge
        self.avoid_versions = avoid_versions
        self.kinds = kinds
        self.relations = relations
        self.annotate = annotate
        self.edges = []
        self.out = []
        self.emit_ok = True
        self.avoided = 0
        self.merged = 0
        self.opaque_skips = 0
        self.filtered = 0

    # state access

    def peek(self, obj):
        rec = self.live.get(obj)
        st = rec.storage if rec is not None else self.store.storage_get(obj)
        if st is None:
            return None
        raw = st.get(STATE_KEY)
        if raw is not None and (type(raw) is not bytearray or len(raw) != 25):
            check_state(raw)
        return raw

    def init(self, obj):
        st = self.store.storage_get(obj, create_if_missing=True)
        raw = st.get(STATE_KEY)
        if raw is None:
            raw = bytearray(FRESH_STATE)
            st.set(STATE_KEY, raw)
        else:
            check_state(raw)
        return raw

    # emission

    def _kind_ok(self, obj):
        return self.kinds is None or self.node_kind[obj.kind] in self.kinds

    def emit_node(self, obj, version, raw):
        if not self.emit_ok or not self._kind_ok(obj):
            return
        annotations = None
        if self.annotate is not None:
            annotations = self.annotate(obj)
        self.out.append(self.make_node(obj, version, annotations))
        raw[8] |= EMITTED

    def _ensure_node(self, obj, raw):
        if not raw[8] & EMITTED:
            self.emit_node(obj, U64.unpack_from(raw)[0], raw)

    def new_edge(self, src, sv, dst, dv, relation, ts):
        edge = self.make_edge(len(self.edges), src, sv, dst, dv, relation, ts)
        self.edges.append(edge)
        if (
            self.emit_ok
            and (self.relations is None or relation in self.relations)
            and self._kind_ok(src)
            and self._kind_ok(dst)
        ):
            self.out.append(edge)
        else:
            self.filtered += 1
        return edge

    # transitions

    def bump(self, obj, raw, ts):
        version = U64.unpack_from(raw)[0]
        self._ensure_node(obj, raw)
        new = version + 1
        U64.pack_into(raw, 0, new)
        raw[8] &= ~EMITTED & 0xFF
        I64.pack_into(raw, LAST_IN, -1)  # the new version has no inflow yet
        self.emit_node(obj, new, raw)
        self.new_edge(obj, version, obj, new, "version", ts)
        return new

    def flow(self, src, dst, relation, ts):
        if src == dst:
            return
        s_raw = self.peek(src)
        d_raw = self.peek(dst)
        if (s_raw is not None and s_raw[8] & OPAQUE) or (d_raw is not None and d_raw[8] & OPAQUE):
            self.opaque_skips += 1
            return
        if s_raw is None:
            s_raw = self.init(src)
        if d_raw is None:
            d_raw = self.init(dst)
        self._ensure_node(src, s_raw)
        self._ensure_node(dst, d_raw)
        sv = U64.unpack_from(s_raw)[0]
        if self.avoid_versions:
            d_in = I64.unpack_from(d_raw, LAST_IN)[0]
            if d_in >= 0:
                last = self.edges[d_in]
                if last.src_version == sv and last.relation == relation and last.src == src:
                    self.avoided += 1
                    if self.merge:
                        last.count += 1
                        last.last_ts = ts
                        self.merged += 1
                        edge = last
                    else:
                        edge = self.new_edge(src, sv, dst, last.dst_version, relation, ts)
                        I64.pack_into(d_raw, LAST_IN, edge.id)
                    I64.pack_into(s_raw, LAST_OUT, edge.id)
                    return
        dv = self.bump(dst, d_raw, ts)
        edge = self.new_edge(src, sv, dst, dv, relation, ts)
        I64.pack_into(d_raw, LAST_IN, edge.id)
        I64.pack_into(s_raw, LAST_OUT, edge.id)

    def create(self, dst, sources, ts):
        """``sources`` is a list of (object, relation)."""
        d_raw = self.peek(dst)
        if d_raw is not None:
            if d_raw[8] & OPAQUE:
                self.opaque_skips += 1
                return
            for src, rel in sources:
                self.flow(src, dst, rel, ts)
            return
        for src, _ in sources:
            s_raw = self.peek(src)
            if s_raw is not None and s_raw[8] & OPAQUE:
                self.opaque_skips += 1
                return
        d_raw = self.init(dst)
        self._ensure_node(dst, d_raw)
        last = -1
        for src, rel in sources:
            if src == dst:
                continue
            s_raw = self.init(src)
            self._ensure_node(src, s_raw)
            sv = U64.unpack_from(s_raw)[0]
            edge = self.new_edge(src, sv, dst, 1, rel, ts)
            I64.pack_into(s_raw, LAST_OUT, edge.id)
            last = edge.id
        I64.pack_into(d_raw, LAST_IN, last)

    def touch(self, obj):
        raw = self.peek(obj)
        if raw is None:
            raw = self.init(obj)
        elif raw[8] & OPAQUE:
            self.opaque_skips += 1
            return
        self._ensure_node(obj, raw)

    def apply(self, ops, roles, ts):
        """Run compiled template ``ops`` with ``roles`` bound to objects."""
        for code, a, b, relation in ops:
            if code == FLOW:
                self.flow(_bound(roles, a), _bound(roles, b), relation, ts)
            elif code == TOUCH:
                self.touch(_bound(roles, a))
            else:
                self.create(_bound(roles, a), [(_bound(roles, r), rel) for r, rel in b], ts)


def _bound(roles, role):
    obj = roles.get(role)
    if obj is None:
        raise StorageFailure(f"event has no {role}")
    return obj
