# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: dispatch chain walk and graph closure.

Same signatures and results as ``_kernels_py``.
"""

from libc.stdlib cimport calloc, free, malloc
from libc.stdint cimport int64_t, uint64_t
from cpython.array cimport array

import array as _array


def run_chain(leaf, hook, ev, store, sink, list executed):
    cdef object cg_id, progs, prog, rc, node = leaf
    cdef list levels = []
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


cdef int _build(Py_ssize_t n, int64_t[:] src, int64_t[:] dst,
                int64_t* offs, int64_t* adj, int64_t* indeg) except -1:
    cdef Py_ssize_t m = src.shape[0], i
    for i in range(n + 1):
        offs[i] = 0
    for i in range(n):
        indeg[i] = 0
    for i in range(m):
        if src[i] < 0 or src[i] >= n or dst[i] < 0 or dst[i] >= n:
            raise IndexError("edge endpoint out of range")
        offs[src[i] + 1] += 1
        indeg[dst[i]] += 1
    for i in range(n):
        offs[i + 1] += offs[i]
    cdef int64_t* fill = <int64_t*>malloc((n + 1) * sizeof(int64_t))
    if fill == NULL:
        raise MemoryError()
    for i in range(n + 1):
        fill[i] = offs[i]
    for i in range(m):
        adj[fill[src[i]]] = dst[i]
        fill[src[i]] += 1
    free(fill)
    return 0


cdef Py_ssize_t _kahn(Py_ssize_t n, int64_t* offs, int64_t* adj, int64_t* indeg,
                      int64_t* order) nogil:
    cdef Py_ssize_t top = 0, head = 0, k, v, u
    # order doubles as the work stack: [head, top) are pending
    for v in range(n):
        if indeg[v] == 0:
            order[top] = v
            top += 1
    while head < top:
        u = order[head]
        head += 1
        for k in range(offs[u], offs[u + 1]):
            v = adj[k]
            indeg[v] -= 1
            if indeg[v] == 0:
                order[top] = v
                top += 1
    return top


def _as_i64(seq):
    if isinstance(seq, array) and seq.typecode == "q":
        return seq
    return _array.array("q", seq)


def topo_order(Py_ssize_t n, src, dst):
    cdef int64_t[:] s = _as_i64(src)
    cdef int64_t[:] d = _as_i64(dst)
    if s.shape[0] != d.shape[0]:
        raise ValueError("src/dst length mismatch")
    cdef Py_ssize_t m = s.shape[0], i, got
    cdef int64_t* offs = <int64_t*>malloc((n + 1) * sizeof(int64_t))
    cdef int64_t* adj = <int64_t*>malloc((m + 1) * sizeof(int64_t))
    cdef int64_t* indeg = <int64_t*>malloc((n + 1) * sizeof(int64_t))
    cdef int64_t* order = <int64_t*>malloc((n + 1) * sizeof(int64_t))
    if offs == NULL or adj == NULL or indeg == NULL or order == NULL:
        free(offs); free(adj); free(indeg); free(order)
        raise MemoryError()
    try:
        _build(n, s, d, offs, adj, indeg)
        got = _kahn(n, offs, adj, indeg, order)
        if got != n:
            return None
        return [order[i] for i in range(n)]
    finally:
        free(offs); free(adj); free(indeg); free(order)


def flow_pairs(Py_ssize_t n, src, dst, node_obj, latest):
    cdef int64_t[:] s = _as_i64(src)
    cdef int64_t[:] d = _as_i64(dst)
    cdef int64_t[:] obj = _as_i64(node_obj)
    cdef int64_t[:] lat = _as_i64(latest)
    if s.shape[0] != d.shape[0] or obj.shape[0] != n:
        raise ValueError("length mismatch")
    cdef Py_ssize_t m = s.shape[0], nobj = lat.shape[0]
    cdef Py_ssize_t words = (nobj + 63) // 64
    if words == 0:
        words = 1
    cdef Py_ssize_t i, k, u, v, w, got, b, a
    cdef uint64_t bits
    cdef int64_t* offs = <int64_t*>malloc((n + 1) * sizeof(int64_t))
    cdef int64_t* adj = <int64_t*>malloc((m + 1) * sizeof(int64_t))
    cdef int64_t* indeg = <int64_t*>malloc((n + 1) * sizeof(int64_t))
    cdef int64_t* order = <int64_t*>malloc((n + 1) * sizeof(int64_t))
    cdef uint64_t* anc = <uint64_t*>calloc(n * words + 1, sizeof(uint64_t))
    cdef uint64_t* carry = <uint64_t*>calloc(words, sizeof(uint64_t))
    if offs == NULL or adj == NULL or indeg == NULL or order == NULL or anc == NULL or carry == NULL:
        free(offs); free(adj); free(indeg); free(order); free(anc); free(carry)
        raise MemoryError()
    try:
        for i in range(n):
            if obj[i] < 0 or obj[i] >= nobj:
                raise IndexError("node object index out of range")
        _build(n, s, d, offs, adj, indeg)
        got = _kahn(n, offs, adj, indeg, order)
        if got != n:
            return None
        with nogil:
            for i in range(n):
                u = order[i]
                for w in range(words):
                    carry[w] = anc[u * words + w]
                carry[obj[u] >> 6] |= (<uint64_t>1) << (obj[u] & 63)
                for k in range(offs[u], offs[u + 1]):
                    v = adj[k]
                    for w in range(words):
                        anc[v * words + w] |= carry[w]
        pairs = set()
        for b in range(nobj):
            u = lat[b]
            if u < 0:
                continue
            for w in range(words):
                bits = anc[u * words + w]
                while bits:
                    k = 0
                    while not (bits >> k) & 1:
                        k += 1
                    a = w * 64 + k
                    if a != b:
                        pairs.add((a, b))
                    bits &= bits - 1
        return pairs
    finally:
        free(offs); free(adj); free(indeg); free(order); free(anc); free(carry)


# -- capture state machine -----------------------------------------------------

from cpython.bytearray cimport PyByteArray_AS_STRING, PyByteArray_GET_SIZE

from lsmaudit._kernels_py import FRESH_STATE, STATE_KEY, check_state
from lsmaudit.errors import StorageFailure

cdef enum:
    OPAQUE = 1
    EMITTED = 2
    LAST_IN = 9
    LAST_OUT = 17
    FLOW = 0
    TOUCH = 1


cdef inline uint64_t _get_u64(bytearray raw, Py_ssize_t off):
    cdef unsigned char* p = <unsigned char*>PyByteArray_AS_STRING(raw)
    cdef uint64_t v = 0
    cdef int i
    for i in range(7, -1, -1):
        v = (v << 8) | p[off + i]
    return v


cdef inline void _put_u64(bytearray raw, Py_ssize_t off, uint64_t v):
    cdef unsigned char* p = <unsigned char*>PyByteArray_AS_STRING(raw)
    cdef int i
    for i in range(8):
        p[off + i] = v & 0xFF
        v >>= 8


cdef inline unsigned char* _flags(bytearray raw):
    return <unsigned char*>PyByteArray_AS_STRING(raw) + 8


cdef inline object _bound(dict roles, object role):
    obj = roles.get(role)
    if obj is None:
        raise StorageFailure(f"event has no {role}")
    return obj


cdef class CaptureCore:
    """Compiled twin of ``_kernels_py.CaptureCore``."""

    cdef public object store, node_kind, make_node, make_edge, kinds, relations, annotate
    cdef public dict live
    cdef public bint merge, avoid_versions, emit_ok
    cdef public list edges, out
    cdef public Py_ssize_t avoided, merged, opaque_skips, filtered

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

    cpdef object peek(self, obj):
        rec = self.live.get(obj)
        st = rec.storage if rec is not None else self.store.storage_get(obj)
        if st is None:
            return None
        raw = st.get(STATE_KEY)
        if raw is not None and (type(raw) is not bytearray or PyByteArray_GET_SIZE(raw) != 25):
            check_state(raw)
        return raw

    cpdef bytearray init(self, obj):
        st = self.store.storage_get(obj, create_if_missing=True)
        raw = st.get(STATE_KEY)
        if raw is None:
            raw = bytearray(FRESH_STATE)
            st.set(STATE_KEY, raw)
        else:
            check_state(raw)
        return raw

    cdef bint _kind_ok(self, obj):
        return self.kinds is None or self.node_kind[obj.kind] in self.kinds

    cpdef emit_node(self, obj, uint64_t version, bytearray raw):
        if not self.emit_ok or not self._kind_ok(obj):
            return
        annotations = None
        if self.annotate is not None:
            annotations = self.annotate(obj)
        self.out.append(self.make_node(obj, version, annotations))
        _flags(raw)[0] |= EMITTED

    cdef inline void _ensure_node(self, obj, bytearray raw) except *:
        if not _flags(raw)[0] & EMITTED:
            self.emit_node(obj, _get_u64(raw, 0), raw)

    cpdef object new_edge(self, src, sv, dst, dv, relation, ts):
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

    cpdef uint64_t bump(self, obj, bytearray raw, ts) except? 0:
        cdef uint64_t version = _get_u64(raw, 0)
        self._ensure_node(obj, raw)
        cdef uint64_t new = version + 1
        _put_u64(raw, 0, new)
        _flags(raw)[0] &= ~EMITTED & 0xFF
        _put_u64(raw, LAST_IN, <uint64_t>-1)  # the new version has no inflow yet
        self.emit_node(obj, new, raw)
        self.new_edge(obj, version, obj, new, "version", ts)
        return new

    cpdef flow(self, src, dst, relation, ts):
        if src == dst:
            return
        s_obj = self.peek(src)
        d_obj = self.peek(dst)
        if (s_obj is not None and _flags(s_obj)[0] & OPAQUE) or (d_obj is not None and _flags(d_obj)[0] & OPAQUE):
            self.opaque_skips += 1
            return
        cdef bytearray s_raw = s_obj if s_obj is not None else self.init(src)
        cdef bytearray d_raw = d_obj if d_obj is not None else self.init(dst)
        self._ensure_node(src, s_raw)
        self._ensure_node(dst, d_raw)
        cdef uint64_t sv = _get_u64(s_raw, 0)
        cdef int64_t d_in, edge_id
        if self.avoid_versions:
            d_in = <int64_t>_get_u64(d_raw, LAST_IN)
            if d_in >= 0:
                last = self.edges[d_in]
                if last.src_version == sv and last.relation == relation and last.src == src:
                    self.avoided += 1
                    if self.merge:
                        last.count += 1
                        last.last_ts = ts
                        self.merged += 1
                        edge_id = last.id
                    else:
                        edge_id = self.new_edge(src, sv, dst, last.dst_version, relation, ts).id
                        _put_u64(d_raw, LAST_IN, <uint64_t>edge_id)
                    _put_u64(s_raw, LAST_OUT, <uint64_t>edge_id)
                    return
        cdef uint64_t dv = self.bump(dst, d_raw, ts)
        edge_id = self.new_edge(src, sv, dst, dv, relation, ts).id
        _put_u64(d_raw, LAST_IN, <uint64_t>edge_id)
        _put_u64(s_raw, LAST_OUT, <uint64_t>edge_id)

    cpdef create(self, dst, list sources, ts):
        """``sources`` is a list of (object, relation)."""
        d_obj = self.peek(dst)
        if d_obj is not None:
            if _flags(d_obj)[0] & OPAQUE:
                self.opaque_skips += 1
                return
            for src, rel in sources:
                self.flow(src, dst, rel, ts)
            return
        for src, _ in sources:
            s_obj = self.peek(src)
            if s_obj is not None and _flags(s_obj)[0] & OPAQUE:
                self.opaque_skips += 1
                return
        cdef bytearray d_raw = self.init(dst)
        cdef bytearray s_raw
        self._ensure_node(dst, d_raw)
        cdef int64_t last = -1
        for src, rel in sources:
            if src == dst:
                continue
            s_raw = self.init(src)
            self._ensure_node(src, s_raw)
            edge = self.new_edge(src, _get_u64(s_raw, 0), dst, 1, rel, ts)
            last = edge.id
            _put_u64(s_raw, LAST_OUT, <uint64_t>last)
        _put_u64(d_raw, LAST_IN, <uint64_t>last)

    cpdef touch(self, obj):
        raw = self.peek(obj)
        if raw is None:
            raw = self.init(obj)
        elif _flags(raw)[0] & OPAQUE:
            self.opaque_skips += 1
            return
        self._ensure_node(obj, raw)

    def apply(self, tuple ops, dict roles, ts):
        """Run compiled template ``ops`` with ``roles`` bound to objects."""
        cdef tuple op
        cdef long code
        for op in ops:
            code = op[0]
            if code == FLOW:
                self.flow(_bound(roles, op[1]), _bound(roles, op[2]), op[3], ts)
            elif code == TOUCH:
                self.touch(_bound(roles, op[1]))
            else:
                self.create(_bound(roles, op[1]), [(_bound(roles, r), rel) for r, rel in op[2]], ts)
