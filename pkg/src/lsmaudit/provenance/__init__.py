"""Provenance capture engine, ring buffer and document serialization."""

from lsmaudit.provenance.document import (
    ProvDocument,
    Serializer,
    drain,
    flow_closure,
    is_acyclic,
    load_document,
    serialize,
)
from lsmaudit.provenance.elements import ProvEdge, ProvElement, ProvNode, node_id
from lsmaudit.provenance.engine import CaptureEngine, CaptureFilter, CaptureStats
from lsmaudit.provenance.ringbuf import RingBuffer

__all__ = [
    "CaptureEngine",
    "CaptureFilter",
    "CaptureStats",
    "ProvDocument",
    "ProvEdge",
    "ProvElement",
    "ProvNode",
    "RingBuffer",
    "Serializer",
    "drain",
    "flow_closure",
    "is_acyclic",
    "load_document",
    "node_id",
    "serialize",
]
