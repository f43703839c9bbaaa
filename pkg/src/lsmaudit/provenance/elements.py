"""Provenance graph elements streamed from capture to serialization."""

from __future__ import annotations

from typing import Union

from lsmaudit.events import (
    CRED,
    FILE,
    INODE,
    MEMORY,
    MSG,
    PIPE,
    SOCKET,
    SUPERBLOCK,
    TASK,
    KernelObjectId,
)

# object kind -> provenance node kind
NODE_KIND = {
    TASK: "task",
    MEMORY: "memory",
    INODE: "file",
    FILE: "file",
    SUPERBLOCK: "file",
    PIPE: "pipe",
    SOCKET: "socket",
    MSG: "msg",
    CRED: "cred",
}


def node_id(obj: KernelObjectId, version: int) -> str:
    return f"{obj}#v{version}"


class ProvNode:
    __slots__ = ("object", "version", "kind", "annotations")

    def __init__(self, obj: KernelObjectId, version: int, annotations: dict | None = None) -> None:
        self.object = obj
        self.version = version
        self.kind = NODE_KIND[obj.kind]
        self.annotations = annotations

    @property
    def id(self) -> str:
        return node_id(self.object, self.version)

    @property
    def key(self) -> tuple[KernelObjectId, int]:
        return (self.object, self.version)

    def __repr__(self) -> str:
        return f"<ProvNode {self.id}>"


class ProvEdge:
    """An information flow between two object versions.

    ``count`` is the number of merged consecutive events; it may grow after
    the edge was pushed, up to the moment the document is finalized.
    """

    __slots__ = ("id", "src", "src_version", "dst", "dst_version", "relation", "count", "first_ts", "last_ts")

    def __init__(
        self,
        edge_id: int,
        src: KernelObjectId,
        src_version: int,
        dst: KernelObjectId,
        dst_version: int,
        relation: str,
        ts: int,
    ) -> None:
        self.id = edge_id
        self.src = src
        self.src_version = src_version
        self.dst = dst
        self.dst_version = dst_version
        self.relation = relation
        self.count = 1
        self.first_ts = ts
        self.last_ts = ts

    @property
    def src_id(self) -> str:
        return node_id(self.src, self.src_version)

    @property
    def dst_id(self) -> str:
        return node_id(self.dst, self.dst_version)

    def __repr__(self) -> str:
        return f"<ProvEdge {self.id} {self.src_id} -{self.relation}x{self.count}-> {self.dst_id}>"


ProvElement = Union[ProvNode, ProvEdge]
