"""Per-object local storage with automatic reclamation.

Storage lives on the object record itself, so a program that already holds
the object reaches its storage with one attribute load.  When an object's
lifecycle ends the storage is dropped with it; callers never have to clean
up.  :class:`CompositeKeyMap` is the map-with-hand-built-keys alternative,
kept for benchmarking.
"""

from __future__ import annotations

import threading
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from typing import Union

from lsmaudit.errors import DeadObject, NoStorage, NoSuchObject
from lsmaudit.events import CRED, TASK, KernelObjectId, cred_of

Value = Union[bytes, bytearray]

# credential storage slot holding a task's security context label
CONTEXT_KEY = "secctx"


class LocalStorage:
    """Key/value slots bound to one kernel object."""

    __slots__ = ("owner", "_slots", "live", "_lock")

    def __init__(self, owner: KernelObjectId) -> None:
        self.owner = owner
        self._slots: dict[str, Value] = {}
        self.live = True
        self._lock = threading.Lock()

    def _check(self) -> None:
        if not self.live:
            raise DeadObject(f"storage of {self.owner} was reclaimed")

    def get(self, key: str, default: Value | None = None) -> Value | None:
        self._check()
        return self._slots.get(key, default)

    def __getitem__(self, key: str) -> Value:
        self._check()
        return self._slots[key]

    def __contains__(self, key: str) -> bool:
        return self.live and key in self._slots

    def set(self, key: str, value: Value) -> None:
        if not isinstance(value, (bytes, bytearray)):
            raise TypeError("storage values are byte strings")
        with self._lock:
            self._check()
            self._slots[key] = value

    __setitem__ = set

    def pop(self, key: str, default: Value | None = None) -> Value | None:
        with self._lock:
            self._check()
            return self._slots.pop(key, default)

    def keys(self) -> list[str]:
        self._check()
        return list(self._slots)

    def _reclaim(self) -> None:
        with self._lock:
            self.live = False
            self._slots.clear()

    def __repr__(self) -> str:
        state = "live" if self.live else "dead"
        return f"<LocalStorage {self.owner} {state} keys={sorted(self._slots)}>"


class KernelObject:
    """A live object record; ``storage`` is its local storage or None."""

    __slots__ = ("id", "storage", "live")

    def __init__(self, oid: KernelObjectId) -> None:
        self.id = oid
        self.storage: LocalStorage | None = None
        self.live = True


@dataclass
class StorageStats:
    live_count: int = 0
    created_total: int = 0
    reclaimed_total: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "live_count": self.live_count,
            "created_total": self.created_total,
            "reclaimed_total": self.reclaimed_total,
        }


ObjRef = Union[KernelObjectId, KernelObject]


class ObjectStore:
    """Registry of live kernel objects and their local storages.

    Objects come to life the first time they are observed.  Ending an
    object's lifecycle reclaims its storage; a dead identity can never be
    revived (reuse of a local id needs a new generation).
    """

    def __init__(self) -> None:
        self._objects: dict[KernelObjectId, KernelObject] = {}
        self._dead: set[KernelObjectId] = set()
        self._tasks_by_pid: dict[int, KernelObject] = {}
        self.stats = StorageStats()
        self._lock = threading.RLock()

    # -- registry --------------------------------------------------------

    def resolve(self, oid: KernelObjectId) -> KernelObject:
        """Return the live record for ``oid``, registering it on first sight."""
        obj = self._objects.get(oid)
        if obj is not None:
            return obj
        with self._lock:
            obj = self._objects.get(oid)
            if obj is not None:
                return obj
            if oid in self._dead:
                raise DeadObject(f"{oid} has ended its lifecycle")
            obj = KernelObject(oid)
            self._objects[oid] = obj
            if oid.kind == TASK:
                self._tasks_by_pid[oid.local_id] = obj
            return obj

    observe = resolve

    def find(self, oid: KernelObjectId) -> KernelObject | None:
        """The live record for ``oid`` without registering it."""
        return self._objects.get(oid)

    @property
    def records(self) -> Mapping[KernelObjectId, KernelObject]:
        """Live records by id (read-only view for hot paths)."""
        return self._objects

    def is_live(self, oid: KernelObjectId) -> bool:
        return oid in self._objects

    def live_objects(self) -> Iterator[KernelObjectId]:
        return iter(list(self._objects))

    def holding_storage(self) -> int:
        """Live objects that currently hold a storage (leak check)."""
        return sum(1 for o in list(self._objects.values()) if o.storage is not None)

    # -- storage helpers ---------------------------------------------------

    def storage_get(self, ref: ObjRef, create_if_missing: bool = False) -> LocalStorage | None:
        obj = ref if isinstance(ref, KernelObject) else self.resolve(ref)
        st = obj.storage
        if st is not None:
            return st
        if not obj.live:
            raise DeadObject(f"{obj.id} has ended its lifecycle")
        if not create_if_missing:
            return None
        with self._lock:
            if not obj.live:
                raise DeadObject(f"{obj.id} has ended its lifecycle")
            if obj.storage is None:
                obj.storage = LocalStorage(obj.id)
                self.stats.created_total += 1
                self.stats.live_count += 1
            return obj.storage

    def storage_delete(self, ref: ObjRef) -> None:
        obj = ref if isinstance(ref, KernelObject) else self._objects.get(ref)
        with self._lock:
            if obj is None or obj.storage is None:
                if obj is None and ref in self._dead:
                    raise DeadObject(f"{ref} has ended its lifecycle")
                raise NoStorage(f"{getattr(obj, 'id', ref)} has no storage")
            obj.storage._reclaim()
            obj.storage = None
            self.stats.reclaimed_total += 1
            self.stats.live_count -= 1

    def end_lifecycle(self, oid: KernelObjectId) -> None:
        with self._lock:
            if oid in self._dead:
                raise DeadObject(f"{oid} already ended its lifecycle")
            obj = self._objects.pop(oid, None)
            self._dead.add(oid)
            if obj is None:
                return
            obj.live = False
            if oid.kind == TASK and self._tasks_by_pid.get(oid.local_id) is obj:
                del self._tasks_by_pid[oid.local_id]
            if obj.storage is not None:
                obj.storage._reclaim()
                obj.storage = None
                self.stats.reclaimed_total += 1
                self.stats.live_count -= 1

    # -- userspace access ---------------------------------------------------

    def _select(self, kind: str, selector: object) -> KernelObject:
        if kind in ("pid", CRED):
            task_obj = self._tasks_by_pid.get(selector)  # type: ignore[arg-type]
            if task_obj is None:
                raise NoSuchObject(f"no live task with pid {selector}")
            # resolved on every call: the task's current cred
            return self.resolve(cred_of(task_obj.id))
        if kind == TASK:
            task_obj = self._tasks_by_pid.get(selector)  # type: ignore[arg-type]
            if task_obj is None:
                raise NoSuchObject(f"no live task with pid {selector}")
            return task_obj
        if isinstance(selector, KernelObjectId):
            obj = self._objects.get(selector)
            if obj is None:
                raise NoSuchObject(f"{selector} is not live")
            return obj
        raise NoSuchObject(f"cannot select {kind!r} by {selector!r}")

    def userspace_lookup(self, kind: str, selector: object, key: str) -> Value | None:
        """Read ``key`` from the storage selected by an external identifier.

        ``kind="pid"`` (or ``"cred"``) addresses the credential storage of the
        live task with that PID; ``kind="task"`` the task's own storage.
        """
        st = self.storage_get(self._select(kind, selector))
        return None if st is None else st.get(key)

    def userspace_update(self, kind: str, selector: object, key: str, value: Value) -> None:
        st = self.storage_get(self._select(kind, selector), create_if_missing=True)
        assert st is not None
        st.set(key, value)

    def userspace_delete(self, kind: str, selector: object, key: str) -> None:
        st = self.storage_get(self._select(kind, selector))
        if st is None or key not in st:
            raise NoStorage(f"no {key!r} for {kind} {selector}")
        st.pop(key)


class CompositeKeyMap:
    """Global map keyed by hand-assembled identity tuples.

    This is the pattern local storage replaces: every access rebuilds the key
    from the object's fields, and entries must be removed explicitly.
    """

    def __init__(self) -> None:
        self._entries: dict[tuple, dict[str, Value]] = {}

    @staticmethod
    def key_of(obj: KernelObject | KernelObjectId) -> tuple:
        oid = obj.id if isinstance(obj, KernelObject) else obj
        return (oid.kind, oid.fs_uuid, oid.local_id, oid.generation)

    def lookup(self, obj: KernelObject | KernelObjectId, create: bool = False) -> dict[str, Value] | None:
        key = self.key_of(obj)
        entry = self._entries.get(key)
        if entry is None and create:
            entry = self._entries[key] = {}
        return entry

    def remove(self, obj: KernelObject | KernelObjectId) -> None:
        self._entries.pop(self.key_of(obj), None)

    def __len__(self) -> int:
        return len(self._entries)
