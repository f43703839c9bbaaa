"""Kernel objects, syscalls, LSM hooks and the syscall -> hook expansion.

A trace is a line-delimited JSON stream.  Each line is either a syscall
record::

    {"ts": 3, "syscall": "open",
     "subject": {"kind": "task", "id": 100},
     "object": {"kind": "inode", "fs": "sda1", "id": 12},
     "path_depth": 2, "path": "/tmp/x",
     "flags": {"creates_new_file": true, "outcome": "success"}}

or an object lifecycle record ``{"ts": 4, "free": {"kind": "task", "id": 100}}``
marking the end of an object's life (its local storage is reclaimed).

See ``docs/trace-format.md`` for the complete schema.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from numbers import Real
from typing import IO, NamedTuple, Union

from lsmaudit.errors import (
    MissingCost,
    MissingPathDepth,
    NonMonotonicTimestamp,
    ParseError,
    TraceError,
    UnknownHook,
    UnknownSyscall,
)

# Object kinds are plain strings so that KernelObjectId hashes at C speed.
TASK = "task"
INODE = "inode"
FILE = "file"
CRED = "cred"
SOCKET = "socket"
PIPE = "pipe"
MSG = "msg"
SUPERBLOCK = "superblock"
MEMORY = "memory"

OBJECT_KINDS = frozenset({TASK, INODE, FILE, CRED, SOCKET, PIPE, MSG, SUPERBLOCK, MEMORY})

# Directory inodes synthesized for path walks live above the 32-bit inode range.
DIR_ID_BASE = 1 << 32


class KernelObjectId(NamedTuple):
    """Collision-safe identity of a simulated kernel object.

    Inodes are only unique per file system, so an inode identity always
    carries ``fs_uuid``.  ``generation`` separates successive lifecycles that
    reuse the same ``local_id``.
    """

    kind: str
    local_id: int
    fs_uuid: str | None = None
    generation: int = 0

    def check(self) -> KernelObjectId:
        if self.kind not in OBJECT_KINDS:
            raise TraceError(f"unknown object kind {self.kind!r}")
        if self.kind == INODE and not self.fs_uuid:
            raise TraceError("inode identity requires fs_uuid")
        if self.local_id < 0 or self.generation < 0:
            raise TraceError("object ids must be unsigned")
        return self

    def __str__(self) -> str:
        fs = self.fs_uuid or "-"
        return f"{self.kind}:{fs}:{self.local_id}:{self.generation}"

    @classmethod
    def parse(cls, text: str) -> KernelObjectId:
        kind, fs, local, gen = text.split(":")
        return cls(kind, int(local), None if fs == "-" else fs, int(gen)).check()


def task(pid: int, generation: int = 0) -> KernelObjectId:
    return KernelObjectId(TASK, pid, None, generation)


def inode(fs_uuid: str, ino: int, generation: int = 0) -> KernelObjectId:
    return KernelObjectId(INODE, ino, fs_uuid, generation)


def cred_of(t: KernelObjectId) -> KernelObjectId:
    """The credential object owned by task ``t``."""
    return KernelObjectId(CRED, t.local_id, None, t.generation)


def memory_of(t: KernelObjectId) -> KernelObjectId:
    """The address space owned by task ``t``."""
    return KernelObjectId(MEMORY, t.local_id, None, t.generation)


class Hook(str, Enum):
    FILE_OPEN = "file_open"
    INODE_CREATE = "inode_create"
    INODE_PERMISSION = "inode_permission"
    INODE_SETATTR = "inode_setattr"
    INODE_POST_SETXATTR = "inode_post_setxattr"
    FILE_PERMISSION = "file_permission"
    BPRM_CHECK = "bprm_check"
    BPRM_SET_CREDS = "bprm_set_creds"
    SOCKET_CREATE = "socket_create"
    SOCKET_BIND = "socket_bind"
    SOCKET_LISTEN = "socket_listen"
    SOCKET_ACCEPT = "socket_accept"
    SOCKET_CONNECT = "socket_connect"
    TASK_FORK = "task_fork"

    @classmethod
    def parse(cls, name: str) -> Hook:
        try:
            return cls(name)
        except ValueError:
            raise UnknownHook(f"unknown LSM hook {name!r}") from None


class Syscall(str, Enum):
    OPEN = "open"
    READ = "read"
    WRITE = "write"
    EXECVE = "execve"
    FORK = "fork"
    SOCKET = "socket"
    BIND = "bind"
    LISTEN = "listen"
    ACCEPT = "accept"
    CONNECT = "connect"

    @classmethod
    def parse(cls, name: str) -> Syscall:
        try:
            return cls(name)
        except ValueError:
            raise UnknownSyscall(f"unknown syscall {name!r}") from None


PATH_SYSCALLS = frozenset({Syscall.OPEN, Syscall.EXECVE})
NET_SYSCALLS = frozenset({Syscall.BIND, Syscall.LISTEN, Syscall.ACCEPT, Syscall.CONNECT})
OBJECT_SYSCALLS = frozenset(Syscall) - {Syscall.FORK}

SUCCESS = "success"
FAILURE = "failure"
INCOMING = "incoming"
OUTGOING = "outgoing"


@dataclass(frozen=True, slots=True)
class SyscallFlags:
    creates_new_file: bool = False
    outcome: str = SUCCESS
    # ordinal of the hook that fails; the sequence stops after it
    fail_at_ordinal: int | None = None
    # request inode_post_setxattr on open (xattr-setting variants)
    sets_xattr: bool = False


NO_FLAGS = SyscallFlags()


@dataclass(frozen=True, slots=True)
class NetInfo:
    direction: str
    port: int


@dataclass(frozen=True, slots=True)
class SyscallRecord:
    syscall: Syscall
    subject: KernelObjectId
    timestamp: int
    object: KernelObjectId | None = None
    path_depth: int | None = None
    flags: SyscallFlags = field(default_factory=lambda: NO_FLAGS)
    net: NetInfo | None = None
    path: str | None = None

    def validate(self) -> SyscallRecord:
        if not isinstance(self.syscall, Syscall):
            raise UnknownSyscall(f"unknown syscall {self.syscall!r}")
        if self.subject.kind != TASK:
            raise TraceError("subject must be a task")
        self.subject.check()
        if self.syscall in PATH_SYSCALLS:
            if self.path_depth is None:
                raise MissingPathDepth(f"{self.syscall.value} requires path_depth")
            if self.path_depth < 0:
                raise TraceError("path_depth must be unsigned")
            if self.path is not None and len(path_prefixes(self.path)) != self.path_depth:
                raise TraceError(f"path {self.path!r} does not have depth {self.path_depth}")
        elif self.path_depth is not None:
            raise TraceError(f"path_depth is only valid for open/execve, not {self.syscall.value}")
        if self.object is None:
            raise TraceError(f"{self.syscall.value} requires an object")
        self.object.check()
        if self.syscall == Syscall.FORK and self.object.kind != TASK:
            raise TraceError("fork object must be the child task")
        if self.object == self.subject:
            raise TraceError("subject and object must differ")
        if self.syscall in NET_SYSCALLS and self.net is None:
            raise TraceError(f"{self.syscall.value} requires net")
        if self.net is not None:
            if self.net.direction not in (INCOMING, OUTGOING):
                raise TraceError(f"bad direction {self.net.direction!r}")
            if not 0 <= self.net.port <= 0xFFFF:
                raise TraceError(f"port {self.net.port} out of range")
        f = self.flags
        if f.outcome not in (SUCCESS, FAILURE):
            raise TraceError(f"bad outcome {f.outcome!r}")
        if f.outcome == FAILURE:
            if f.fail_at_ordinal is None or f.fail_at_ordinal < 0:
                raise TraceError("failure outcome requires fail_at_ordinal")
        elif f.fail_at_ordinal is not None:
            raise TraceError("fail_at_ordinal is only valid for failed syscalls")
        return self


@dataclass(frozen=True, slots=True)
class FreeRecord:
    """End of an object's lifecycle."""

    object: KernelObjectId
    timestamp: int


TraceRecord = Union[SyscallRecord, FreeRecord]


class HookEvent(NamedTuple):
    hook: Hook
    subject: KernelObjectId
    object: KernelObjectId | None
    origin: SyscallRecord
    ordinal: int


# -- path walks ----------------------------------------------------------------


def path_prefixes(path: str) -> list[str]:
    """Directories resolved while walking ``path`` ("/a/b/c" -> ["/", "/a", "/a/b"])."""
    if not path.startswith("/"):
        raise TraceError(f"path must be absolute: {path!r}")
    parts = [p for p in path.split("/") if p]
    if not parts:
        return []
    return ["/"] + ["/" + "/".join(parts[:i]) for i in range(1, len(parts))]


@lru_cache(maxsize=65536)
def _dir_local_id(key: str) -> int:
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return DIR_ID_BASE + int.from_bytes(digest, "little")


def directory_ids(rec: SyscallRecord) -> list[KernelObjectId]:
    """Directory inodes searched by an open/execve, outermost first."""
    depth = rec.path_depth or 0
    fs = (rec.object.fs_uuid if rec.object is not None else None) or "rootfs"
    if rec.path is not None:
        keys = path_prefixes(rec.path)
    else:
        keys = [f"#{i}" for i in range(depth)]
    return [KernelObjectId(INODE, _dir_local_id(k), fs, 0) for k in keys]


# -- expansion -----------------------------------------------------------------

_SOCKET_HOOK = {
    Syscall.SOCKET: Hook.SOCKET_CREATE,
    Syscall.BIND: Hook.SOCKET_BIND,
    Syscall.LISTEN: Hook.SOCKET_LISTEN,
    Syscall.ACCEPT: Hook.SOCKET_ACCEPT,
    Syscall.CONNECT: Hook.SOCKET_CONNECT,
}


def hook_sequence(rec: SyscallRecord) -> list[tuple[Hook, KernelObjectId | None]]:
    """(hook, object) pairs a successful ``rec`` triggers, before truncation."""
    sc = rec.syscall
    obj = rec.object
    if sc in (Syscall.READ, Syscall.WRITE):
        return [(Hook.FILE_PERMISSION, obj)]
    if sc == Syscall.OPEN:
        if rec.path_depth is None:
            raise MissingPathDepth("open requires path_depth")
        seq: list[tuple[Hook, KernelObjectId | None]] = [
            (Hook.INODE_PERMISSION, d) for d in directory_ids(rec)
        ]
        if rec.flags.creates_new_file:
            seq.append((Hook.INODE_CREATE, obj))
            seq.append((Hook.INODE_SETATTR, obj))
        if rec.flags.sets_xattr:
            seq.append((Hook.INODE_POST_SETXATTR, obj))
        seq.append((Hook.FILE_OPEN, obj))
        return seq
    if sc == Syscall.EXECVE:
        if rec.path_depth is None:
            raise MissingPathDepth("execve requires path_depth")
        seq = [(Hook.INODE_PERMISSION, d) for d in directory_ids(rec)]
        seq += [
            (Hook.FILE_OPEN, obj),
            (Hook.BPRM_CHECK, obj),
            (Hook.BPRM_SET_CREDS, obj),
            (Hook.FILE_PERMISSION, obj),
        ]
        return seq
    if sc == Syscall.FORK:
        return [(Hook.TASK_FORK, obj)]
    hook = _SOCKET_HOOK.get(sc)
    if hook is None:
        raise UnknownSyscall(f"unknown syscall {sc!r}")
    return [(hook, obj)]


def expand_syscall(rec: SyscallRecord) -> list[HookEvent]:
    """Ordered LSM hook events triggered by ``rec``.

    Failed syscalls stop after the hook at ``flags.fail_at_ordinal``.
    """
    if not isinstance(rec.syscall, Syscall):
        raise UnknownSyscall(f"unknown syscall {rec.syscall!r}")
    seq = hook_sequence(rec)
    if rec.flags.outcome == FAILURE and rec.flags.fail_at_ordinal is not None:
        seq = seq[: rec.flags.fail_at_ordinal + 1]
    subject = rec.subject
    return [HookEvent(h, subject, o, rec, i) for i, (h, o) in enumerate(seq)]


# -- cost model ------------------------------------------------------------------


Cost = Union[int, Fraction]


@dataclass(frozen=True)
class CostModel:
    per_hook_cost: Mapping[Hook, Cost]

    def __post_init__(self) -> None:
        for hook, cost in self.per_hook_cost.items():
            if isinstance(cost, bool) or not isinstance(cost, Real):
                raise ValueError(f"cost for {hook} must be a number, got {cost!r}")
            if not math.isfinite(cost) or cost < 0:
                raise ValueError(f"cost for {hook} must be finite and nonnegative, got {cost!r}")

    @classmethod
    def uniform(cls, cost: Cost, hooks: Iterable[Hook] = Hook) -> CostModel:
        return cls({h: cost for h in hooks})

    def scaled(self, factor: Cost) -> CostModel:
        return CostModel({h: c * factor for h, c in self.per_hook_cost.items()})


def expanded_hooks(rec: SyscallRecord) -> Counter:
    """Hook -> invocation count for ``rec``, without building object ids."""
    sc = rec.syscall
    if not isinstance(sc, Syscall):
        raise UnknownSyscall(f"unknown syscall {sc!r}")
    if sc in (Syscall.OPEN, Syscall.EXECVE):
        if rec.path_depth is None:
            raise MissingPathDepth(f"{sc.value} requires path_depth")
        walk = len(path_prefixes(rec.path)) if rec.path is not None else rec.path_depth
        if rec.flags.outcome == FAILURE and rec.flags.fail_at_ordinal is not None:
            # truncation may land inside the directory walk
            return Counter(ev.hook for ev in expand_syscall(rec))
        tail = [h for h, _ in hook_sequence(replace(rec, path_depth=0, path=None))]
        counts = Counter(tail)
        if walk:
            counts[Hook.INODE_PERMISSION] += walk
        return counts
    return Counter(ev.hook for ev in expand_syscall(rec))


def estimate_cost(rec: SyscallRecord, model: CostModel) -> Cost:
    total: Cost = 0
    for hook, n in expanded_hooks(rec).items():
        try:
            total += model.per_hook_cost[hook] * n
        except KeyError:
            raise MissingCost(f"no cost for hook {hook.value}") from None
    return total


# -- trace codec -------------------------------------------------------------------

_RECORD_KEYS = frozenset({"ts", "syscall", "subject", "object", "path_depth", "flags", "net", "path"})
_FLAG_KEYS = frozenset({"creates_new_file", "outcome", "fail_at_ordinal", "sets_xattr"})
_NET_KEYS = frozenset({"direction", "port"})
_OBJ_KEYS = frozenset({"kind", "id", "fs", "gen"})


def object_to_json(obj: KernelObjectId) -> dict:
    out: dict = {"kind": obj.kind, "id": obj.local_id}
    if obj.fs_uuid is not None:
        out["fs"] = obj.fs_uuid
    if obj.generation:
        out["gen"] = obj.generation
    return out


def object_from_json(data: object) -> KernelObjectId:
    if not isinstance(data, dict):
        raise TraceError("object must be a JSON object")
    extra = set(data) - _OBJ_KEYS
    if extra:
        raise TraceError(f"unknown object keys {sorted(extra)}")
    try:
        kind, local_id = data["kind"], data["id"]
    except KeyError as exc:
        raise TraceError(f"object missing {exc.args[0]!r}") from None
    fs, gen = data.get("fs"), data.get("gen", 0)
    if not isinstance(local_id, int) or not isinstance(gen, int):
        raise TraceError("object id/gen must be integers")
    if fs is not None and not isinstance(fs, str):
        raise TraceError("fs must be a string")
    return KernelObjectId(kind, local_id, fs, gen).check()


def record_to_json(rec: TraceRecord) -> dict:
    if isinstance(rec, FreeRecord):
        return {"ts": rec.timestamp, "free": object_to_json(rec.object)}
    out: dict = {
        "ts": rec.timestamp,
        "syscall": rec.syscall.value,
        "subject": object_to_json(rec.subject),
    }
    if rec.object is not None:
        out["object"] = object_to_json(rec.object)
    if rec.path_depth is not None:
        out["path_depth"] = rec.path_depth
    if rec.path is not None:
        out["path"] = rec.path
    f = rec.flags
    flags: dict = {"creates_new_file": f.creates_new_file, "outcome": f.outcome}
    if f.fail_at_ordinal is not None:
        flags["fail_at_ordinal"] = f.fail_at_ordinal
    if f.sets_xattr:
        flags["sets_xattr"] = True
    out["flags"] = flags
    if rec.net is not None:
        out["net"] = {"direction": rec.net.direction, "port": rec.net.port}
    return out


def record_from_json(data: object) -> TraceRecord:
    if not isinstance(data, dict):
        raise TraceError("record must be a JSON object")
    ts = data.get("ts")
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise TraceError("ts must be an integer")
    if "free" in data:
        if set(data) != {"ts", "free"}:
            raise TraceError("free record takes only ts and free")
        return FreeRecord(object_from_json(data["free"]), ts)
    extra = set(data) - _RECORD_KEYS
    if extra:
        raise TraceError(f"unknown keys {sorted(extra)}")
    if "syscall" not in data or "subject" not in data:
        raise TraceError("record requires syscall and subject")
    syscall = Syscall.parse(data["syscall"])
    flags_raw = data.get("flags", {})
    if not isinstance(flags_raw, dict) or set(flags_raw) - _FLAG_KEYS:
        raise TraceError(f"bad flags {flags_raw!r}")
    flags = SyscallFlags(
        creates_new_file=bool(flags_raw.get("creates_new_file", False)),
        outcome=flags_raw.get("outcome", SUCCESS),
        fail_at_ordinal=flags_raw.get("fail_at_ordinal"),
        sets_xattr=bool(flags_raw.get("sets_xattr", False)),
    )
    net = None
    if "net" in data:
        raw = data["net"]
        if not isinstance(raw, dict) or set(raw) != _NET_KEYS:
            raise TraceError(f"bad net record {raw!r}")
        if not isinstance(raw["port"], int):
            raise TraceError("port must be an integer")
        net = NetInfo(raw["direction"], raw["port"])
    depth = data.get("path_depth")
    if depth is not None and (not isinstance(depth, int) or isinstance(depth, bool)):
        raise TraceError("path_depth must be an integer")
    rec = SyscallRecord(
        syscall=syscall,
        subject=object_from_json(data["subject"]),
        timestamp=ts,
        object=object_from_json(data["object"]) if "object" in data else None,
        path_depth=depth,
        flags=flags,
        net=net,
        path=data.get("path"),
    )
    return rec.validate()


def _lines(stream: bytes | str | IO) -> Iterator[str]:
    if isinstance(stream, bytes):
        stream = stream.decode()
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    for line in stream:
        yield line.decode() if isinstance(line, bytes) else line


def parse_trace(stream: bytes | str | IO) -> list[TraceRecord]:
    """Parse a line-delimited trace; blank lines are ignored."""
    records: list[TraceRecord] = []
    last_ts: int | None = None
    for lineno, line in enumerate(_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            rec = record_from_json(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, f"invalid JSON: {exc.msg}") from None
        except TraceError as exc:
            raise ParseError(lineno, str(exc)) from exc
        if last_ts is not None and rec.timestamp <= last_ts:
            raise NonMonotonicTimestamp(lineno, f"timestamp {rec.timestamp} <= {last_ts}")
        last_ts = rec.timestamp
        records.append(rec)
    return records


def dump_trace(records: Sequence[TraceRecord], out: IO[str]) -> None:
    for rec in records:
        out.write(json.dumps(record_to_json(rec), separators=(",", ":"), sort_keys=True))
        out.write("\n")


def dumps_trace(records: Sequence[TraceRecord]) -> str:
    buf = io.StringIO()
    dump_trace(records, buf)
    return buf.getvalue()
