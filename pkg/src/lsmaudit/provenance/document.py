"""Serializer daemon side: ring buffer drain, PROV-style documents, graph checks.

Mapping from edge relation to PROV record (``src`` -> ``dst`` is the
direction of information flow):

==========  ==========================================  =====================
relation    record                                      roles (dst, src)
==========  ==========================================  =====================
read        used                                        activity, entity
exec        used                                        activity, entity
write       wasGeneratedBy                              entity, activity
create      wasGeneratedBy + wasAssociatedWith          entity, activity
fork        wasGeneratedBy + wasAssociatedWith          entity, activity
version     wasDerivedFrom                              generatedEntity, usedEntity
connect     wasInformedBy                               informed, informant
==========  ==========================================  =====================

Tasks are activities; every other node kind is an entity.  Every record
also carries ``lsm:relation``, ``lsm:count``, ``lsm:first_ts``,
``lsm:last_ts`` and ``lsm:edge`` so a document loads back losslessly.
"""

from __future__ import annotations

import io
import json
import os
from array import array
from collections.abc import Iterable, Iterator
from typing import IO, Any

from lsmaudit import kernels
from lsmaudit.errors import DanglingEdge, InvalidDocument, SinkError
from lsmaudit.events import KernelObjectId
from lsmaudit.provenance.elements import ProvEdge, ProvElement, ProvNode, node_id
from lsmaudit.provenance.ringbuf import RingBuffer
from lsmaudit.templates import RELATIONS

PREFIXES = {"prov": "http://www.w3.org/ns/prov#", "lsm": "urn:lsmaudit:"}

# relation -> (record type, dst role, src role)
RELATION_RECORDS: dict[str, tuple[str, str, str]] = {
    "read": ("used", "prov:activity", "prov:entity"),
    "exec": ("used", "prov:activity", "prov:entity"),
    "write": ("wasGeneratedBy", "prov:entity", "prov:activity"),
    "create": ("wasGeneratedBy", "prov:entity", "prov:activity"),
    "fork": ("wasGeneratedBy", "prov:entity", "prov:activity"),
    "version": ("wasDerivedFrom", "prov:generatedEntity", "prov:usedEntity"),
    "connect": ("wasInformedBy", "prov:informed", "prov:informant"),
}
ASSOCIATED = frozenset({"create", "fork"})
RECORD_TYPES = ("used", "wasGeneratedBy", "wasDerivedFrom", "wasAssociatedWith", "wasInformedBy")


class ProvDocument:
    """Nodes and edges in serialization order."""

    def __init__(self, meta: dict | None = None) -> None:
        self.nodes: dict[str, ProvNode] = {}
        self.edges: list[ProvEdge] = []
        self.meta: dict = dict(meta or {})

    def __len__(self) -> int:
        return len(self.nodes) + len(self.edges)

    def objects(self) -> set[KernelObjectId]:
        return {n.object for n in self.nodes.values()}

    # -- PROV-JSON ---------------------------------------------------------------

    def to_prov_json(self) -> dict:
        doc: dict[str, Any] = {"prefix": dict(PREFIXES), "entity": {}, "activity": {}}
        for rt in RECORD_TYPES:
            doc[rt] = {}
        for seq, (nid, node) in enumerate(self.nodes.items()):
            rec = {
                "prov:type": f"lsm:{node.kind}",
                "lsm:kind": node.kind,
                "lsm:object": str(node.object),
                "lsm:version": node.version,
                "lsm:seq": seq,
            }
            for key, value in (node.annotations or {}).items():
                rec[f"lsm:{key}"] = value
            doc["activity" if node.kind == "task" else "entity"][nid] = rec
        for e in self.edges:
            rtype, dst_role, src_role = RELATION_RECORDS[e.relation]
            attrs = {
                "lsm:relation": e.relation,
                "lsm:count": e.count,
                "lsm:first_ts": e.first_ts,
                "lsm:last_ts": e.last_ts,
                "lsm:edge": e.id,
            }
            doc[rtype][f"e{e.id}"] = {dst_role: e.dst_id, src_role: e.src_id, **attrs}
            if e.relation in ASSOCIATED:
                doc["wasAssociatedWith"][f"e{e.id}.assoc"] = {
                    "prov:activity": e.dst_id,
                    "prov:agent": e.src_id,
                    **attrs,
                }
        if self.meta:
            doc["lsm:meta"] = self.meta
        return doc

    @classmethod
    def from_prov_json(cls, data: Any) -> ProvDocument:
        if not isinstance(data, dict) or "entity" not in data or "activity" not in data:
            raise InvalidDocument("not a provenance document")
        doc = cls(data.get("lsm:meta"))
        try:
            records = [(nid, rec) for section in ("entity", "activity") for nid, rec in data[section].items()]
            # lsm:seq restores serialization order across the two sections
            records.sort(key=lambda item: item[1].get("lsm:seq", 0))
            for nid, rec in records:
                node = ProvNode(KernelObjectId.parse(rec["lsm:object"]), int(rec["lsm:version"]))
                ann = {k[4:]: v for k, v in rec.items() if k == "lsm:security_context"}
                node.annotations = ann or None
                if node.id != nid:
                    raise InvalidDocument(f"node id {nid} does not match its attributes")
                if node.kind != rec["lsm:kind"]:
                    raise InvalidDocument(f"node {nid} kind mismatch")
                doc.nodes[nid] = node
            edges: dict[int, ProvEdge] = {}
            for rtype in RECORD_TYPES:
                if rtype == "wasAssociatedWith":
                    continue
                for rid, rec in data.get(rtype, {}).items():
                    rel = rec["lsm:relation"]
                    if rel not in RELATION_RECORDS or RELATION_RECORDS[rel][0] != rtype:
                        raise InvalidDocument(f"record {rid}: relation {rel!r} in {rtype}")
                    _, dst_role, src_role = RELATION_RECORDS[rel]
                    edges[int(rec["lsm:edge"])] = _edge_from(rec, rec[src_role], rec[dst_role], doc.nodes)
        except (KeyError, ValueError, TypeError, AttributeError) as exc:
            raise InvalidDocument(f"malformed document: {exc!r}") from None
        doc.edges = [edges[k] for k in sorted(edges)]
        return doc

    # -- line-delimited stream ------------------------------------------------------

    def iter_stream(self) -> Iterator[dict]:
        if self.meta:
            yield {"type": "meta", **self.meta}
        for node in self.nodes.values():
            rec = {"type": "node", "id": node.id, "object": str(node.object), "version": node.version, "kind": node.kind}
            if node.annotations:
                rec["annotations"] = node.annotations
            yield rec
        for e in self.edges:
            yield {
                "type": "edge",
                "id": e.id,
                "src": e.src_id,
                "dst": e.dst_id,
                "relation": e.relation,
                "count": e.count,
                "first_ts": e.first_ts,
                "last_ts": e.last_ts,
            }

    def write_stream(self, out: IO[str]) -> None:
        for rec in self.iter_stream():
            out.write(json.dumps(rec, separators=(",", ":")))
            out.write("\n")

    @classmethod
    def from_stream(cls, lines: Iterable[str]) -> ProvDocument:
        doc = cls()
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if rec["type"] == "meta":
                    doc.meta.update({k: v for k, v in rec.items() if k != "type"})
                elif rec["type"] == "node":
                    node = ProvNode(KernelObjectId.parse(rec["object"]), int(rec["version"]), rec.get("annotations"))
                    doc.nodes[node.id] = node
                elif rec["type"] == "edge":
                    e = _edge_from(
                        {
                            "lsm:edge": rec["id"],
                            "lsm:relation": rec["relation"],
                            "lsm:count": rec["count"],
                            "lsm:first_ts": rec["first_ts"],
                            "lsm:last_ts": rec["last_ts"],
                        },
                        rec["src"],
                        rec["dst"],
                        doc.nodes,
                    )
                    doc.edges.append(e)
                else:
                    raise InvalidDocument(f"line {lineno}: unknown element type")
            except InvalidDocument:
                raise
            except (KeyError, ValueError, TypeError) as exc:
                raise InvalidDocument(f"line {lineno}: {exc!r}") from None
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_prov_json(), indent=1)


def _edge_from(rec: dict, src_id: str, dst_id: str, nodes: dict[str, ProvNode]) -> ProvEdge:
    for nid in (src_id, dst_id):
        if nid not in nodes:
            raise InvalidDocument(f"edge {rec['lsm:edge']} references unknown node {nid}")
    if rec["lsm:relation"] not in RELATIONS:
        raise InvalidDocument(f"unknown relation {rec['lsm:relation']!r}")
    src, dst = nodes[src_id], nodes[dst_id]
    e = ProvEdge(int(rec["lsm:edge"]), src.object, src.version, dst.object, dst.version, rec["lsm:relation"], int(rec["lsm:first_ts"]))
    e.count = int(rec["lsm:count"])
    e.last_ts = int(rec["lsm:last_ts"])
    return e


def load_document(source: str | os.PathLike | IO[str]) -> ProvDocument:
    """Load a consolidated PROV-JSON document or a line-delimited stream."""
    if isinstance(source, (str, os.PathLike)):
        with open(source) as fh:
            text = fh.read()
    else:
        text = source.read()
    stripped = text.lstrip()
    if not stripped:
        return ProvDocument()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        return ProvDocument.from_stream(io.StringIO(text))
    if isinstance(data, dict) and data.get("type") in ("meta", "node", "edge"):
        return ProvDocument.from_stream(io.StringIO(text))
    return ProvDocument.from_prov_json(data)


class Serializer:
    """Consumes graph elements into a :class:`ProvDocument`.

    In strict mode an edge whose endpoints were never serialized raises
    :class:`DanglingEdge`; in lenient mode it is counted in ``dropped``
    (which happens when the buffer dropped one of its nodes).
    """

    def __init__(self, strict: bool = True, meta: dict | None = None) -> None:
        self.document = ProvDocument(meta)
        self.strict = strict
        self.serialized = 0
        self.dropped = 0
        self.closed = False
        self._keys: set = set()

    def add(self, el: ProvElement) -> bool:
        if self.closed:
            raise SinkError("serializer is closed")
        doc = self.document
        if type(el) is ProvNode:
            doc.nodes[node_id(el.object, el.version)] = el
            self._keys.add((el.object, el.version))
        else:
            keys = self._keys
            if (el.src, el.src_version) not in keys or (el.dst, el.dst_version) not in keys:
                if self.strict:
                    raise DanglingEdge(f"edge {el.id} references an unserialized node")
                self.dropped += 1
                return False
            doc.edges.append(el)
        self.serialized += 1
        return True

    def close(self) -> ProvDocument:
        self.closed = True
        return self.document


def drain(buffer: RingBuffer, serializer: Serializer) -> int:
    """Move every pending element into ``serializer``; returns how many were serialized."""
    count = 0
    for el in buffer.pop_all():
        if serializer.add(el):
            count += 1
    return count


def serialize(elements: Iterable[ProvElement], strict: bool = True) -> ProvDocument:
    s = Serializer(strict=strict)
    for el in elements:
        s.add(el)
    return s.close()


# -- graph checks --------------------------------------------------------------------


def _index(doc: ProvDocument):
    # keyed by (object, version) tuples: cheaper than formatting string ids
    ids = {(n.object, n.version): i for i, n in enumerate(doc.nodes.values())}
    try:
        src = array("q", [ids[e.src, e.src_version] for e in doc.edges])
        dst = array("q", [ids[e.dst, e.dst_version] for e in doc.edges])
    except KeyError as exc:
        raise InvalidDocument(f"edge references unknown node {exc.args[0]}") from None
    return ids, src, dst


def topological_order(doc: ProvDocument) -> list[str] | None:
    """Node ids in a topological order, or None if the graph has a cycle."""
    ids, src, dst = _index(doc)
    order = kernels.topo_order(len(ids), src, dst)
    if order is None:
        return None
    names = list(doc.nodes)
    return [names[i] for i in order]


def is_acyclic(doc: ProvDocument) -> bool:
    ids, src, dst = _index(doc)
    return kernels.topo_order(len(ids), src, dst) is not None


def latest_versions(doc: ProvDocument) -> dict[KernelObjectId, int]:
    out: dict[KernelObjectId, int] = {}
    for node in doc.nodes.values():
        if node.version > out.get(node.object, 0):
            out[node.object] = node.version
    return out


def flow_closure(doc: ProvDocument) -> set[tuple[KernelObjectId, KernelObjectId]]:
    """Pairs (a, b), a != b, such that some version of ``a`` reaches b's latest version."""
    ids, src, dst = _index(doc)
    objects: dict[KernelObjectId, int] = {}
    node_obj = array("q")
    for node in doc.nodes.values():
        node_obj.append(objects.setdefault(node.object, len(objects)))
    latest = array("q", [-1] * len(objects))
    best = [0] * len(objects)
    for i, node in enumerate(doc.nodes.values()):
        k = node_obj[i]
        if node.version > best[k]:
            best[k] = node.version
            latest[k] = i
    pairs = kernels.flow_pairs(len(ids), src, dst, node_obj, latest)
    if pairs is None:
        raise InvalidDocument("provenance graph has a cycle")
    names = list(objects)
    return {(names[a], names[b]) for a, b in pairs}
