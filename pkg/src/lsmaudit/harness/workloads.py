"""Built-in, seeded trace generators."""

from __future__ import annotations

import random
from collections.abc import Callable

from lsmaudit.errors import UnknownWorkload
from lsmaudit.events import (
    FAILURE,
    INCOMING,
    OUTGOING,
    PIPE,
    SOCKET,
    FreeRecord,
    KernelObjectId,
    NetInfo,
    Syscall,
    SyscallFlags,
    SyscallRecord,
    TraceRecord,
    hook_sequence,
    inode,
    task,
)

FIG4_PARENT = task(100)
FIG4_CHILD = task(101)
FIG4_PIPE = KernelObjectId(PIPE, 1)
FIG4_FILE = inode("sda1", 42)


class _Clock:
    def __init__(self) -> None:
        self.ts = 0

    def __call__(self) -> int:
        self.ts += 1
        return self.ts


def fig4_scenario(size: int = 0, seed: int = 0) -> list[TraceRecord]:
    """T creates pipe P and forks T'; T' reads file F and writes P; T reads P."""
    T, C, P, F = FIG4_PARENT, FIG4_CHILD, FIG4_PIPE, FIG4_FILE
    return [
        SyscallRecord(Syscall.OPEN, T, 1, P, 0, SyscallFlags(creates_new_file=True)),
        SyscallRecord(Syscall.FORK, T, 2, C),
        SyscallRecord(Syscall.OPEN, C, 3, F, 0),
        SyscallRecord(Syscall.READ, C, 4, F),
        SyscallRecord(Syscall.WRITE, C, 5, P),
        SyscallRecord(Syscall.READ, T, 6, P),
    ]


def _path(rng: random.Random, dirs: list[str], leaf: str) -> tuple[str, int]:
    base = rng.choice(dirs)
    path = f"{base}/{leaf}" if base != "/" else f"/{leaf}"
    return path, path.count("/")


def fileserver(size: int, seed: int = 0) -> list[TraceRecord]:
    """Worker tasks opening, reading and writing files under a few directories."""
    rng = random.Random(seed)
    clock = _Clock()
    dirs = ["/srv", "/srv/data", "/srv/data/www", "/tmp", "/var/log"]
    workers = [task(200 + i) for i in range(4)]
    files = [(inode("sda1", 1000 + i), f"f{i}") for i in range(24)]
    paths = {obj: _path(rng, dirs, leaf) for obj, leaf in files}
    out: list[TraceRecord] = []
    while len(out) < size:
        t = rng.choice(workers)
        obj, _ = rng.choice(files)
        path, depth = paths[obj]
        r = rng.random()
        if r < 0.3:
            out.append(SyscallRecord(Syscall.OPEN, t, clock(), obj, depth, SyscallFlags(creates_new_file=rng.random() < 0.1), path=path))
        elif r < 0.75:
            out.append(SyscallRecord(Syscall.READ, t, clock(), obj))
        else:
            out.append(SyscallRecord(Syscall.WRITE, t, clock(), obj))
    return out[:size]


def webserver(size: int, seed: int = 0) -> list[TraceRecord]:
    """A listener accepting connections, forking workers that serve files and call a backend."""
    rng = random.Random(seed)
    clock = _Clock()
    master = task(300)
    out: list[TraceRecord] = []
    listen = KernelObjectId(SOCKET, 1)
    port = rng.choice([80, 443])
    setup = [
        SyscallRecord(Syscall.SOCKET, master, 0, listen),
        SyscallRecord(Syscall.BIND, master, 0, listen, net=NetInfo(INCOMING, port)),
        SyscallRecord(Syscall.LISTEN, master, 0, listen, net=NetInfo(INCOMING, port)),
    ]
    for rec in setup:
        out.append(_restamp(rec, clock()))
    next_pid, next_sock = 301, 2
    pages = [(inode("sda1", 5000 + i), f"/var/www/p{i}.html") for i in range(8)]
    while len(out) < size:
        worker = task(next_pid)
        next_pid += 1
        out.append(SyscallRecord(Syscall.FORK, master, clock(), worker))
        out.append(SyscallRecord(Syscall.ACCEPT, worker, clock(), listen, net=NetInfo(INCOMING, port)))
        for _ in range(rng.randint(1, 3)):
            obj, path = rng.choice(pages)
            out.append(SyscallRecord(Syscall.OPEN, worker, clock(), obj, path.count("/"), path=path))
            out.append(SyscallRecord(Syscall.READ, worker, clock(), obj))
        if rng.random() < 0.5:
            sock = KernelObjectId(SOCKET, next_sock)
            next_sock += 1
            out.append(SyscallRecord(Syscall.SOCKET, worker, clock(), sock))
            out.append(SyscallRecord(Syscall.CONNECT, worker, clock(), sock, net=NetInfo(OUTGOING, rng.choice([80, 443, 5432]))))
            out.append(SyscallRecord(Syscall.WRITE, worker, clock(), sock))
        out.append(FreeRecord(worker, clock()))
    return out[:size]


def fork_tree(size: int, seed: int = 0) -> list[TraceRecord]:
    """Breadth-first fork tree; every new task reads a shared file."""
    rng = random.Random(seed)
    clock = _Clock()
    shared = inode("sda1", 7)
    frontier = [task(400)]
    next_pid = 401
    out: list[TraceRecord] = []
    while len(out) < size:
        parent = frontier.pop(0)
        for _ in range(rng.randint(1, 3)):
            child = task(next_pid)
            next_pid += 1
            out.append(SyscallRecord(Syscall.FORK, parent, clock(), child))
            out.append(SyscallRecord(Syscall.READ, child, clock(), shared))
            frontier.append(child)
    return out[:size]


def _restamp(rec: SyscallRecord, ts: int) -> SyscallRecord:
    return SyscallRecord(rec.syscall, rec.subject, ts, rec.object, rec.path_depth, rec.flags, rec.net, rec.path)


def mixed(size: int, seed: int = 0, lifecycle: bool = True, failures: bool = True) -> list[TraceRecord]:
    """Random mix of every modeled syscall over a small object universe.

    With ``lifecycle`` set, objects are freed along the way and their local
    ids reused under a new generation; freed objects are never referenced
    again.  Inode numbers deliberately collide across the two file systems.
    """
    rng = random.Random(seed)
    rand = rng.random  # index draws via random() are much cheaper than choice()
    clock = _Clock()
    gen: dict[tuple[str, str | None, int], int] = {}

    def obj(kind: str, local: int, fs: str | None = None) -> KernelObjectId:
        return KernelObjectId(kind, local, fs, gen.get((kind, fs, local), 0))

    def free(o: KernelObjectId) -> None:
        out.append(FreeRecord(o, clock()))
        gen[(o.kind, o.fs_uuid, o.local_id)] = o.generation + 1

    filesystems = ("sda1", "sdb1")
    pids = list(range(1, 5))
    next_pid = 5
    dirs = ("/", "/a", "/a/b", "/a/b/c", "/d", "/d/e")
    ports = (22, 80, 443, 8080)
    no_flags = SyscallFlags()
    out: list[TraceRecord] = []
    syscalls = list(Syscall)
    n_sys = len(syscalls)
    while len(out) < size:
        subject = obj("task", pids[int(rand() * len(pids))])
        sc = syscalls[int(rand() * n_sys)]
        if sc == Syscall.FORK:
            child = obj("task", next_pid)
            pids.append(next_pid)
            next_pid += 1
            out.append(SyscallRecord(sc, subject, clock(), child))
        elif sc in (Syscall.OPEN, Syscall.EXECVE, Syscall.READ, Syscall.WRITE):
            if sc != Syscall.EXECVE and rand() < 0.15:
                target = obj(PIPE, 1 + int(rand() * 3))
            else:
                target = obj("inode", 1 + int(rand() * 6), filesystems[rand() < 0.5])
            if sc in (Syscall.OPEN, Syscall.EXECVE):
                path = f"{dirs[int(rand() * len(dirs))].rstrip('/')}/n{target.local_id}"
                flags = no_flags
                if sc == Syscall.OPEN:
                    flags = SyscallFlags(creates_new_file=rand() < 0.2, sets_xattr=rand() < 0.05)
                rec = SyscallRecord(sc, subject, clock(), target, path.count("/"), flags, path=path)
            else:
                rec = SyscallRecord(sc, subject, clock(), target)
            out.append(_maybe_fail(rng, rec) if failures else rec)
        else:
            sock = obj(SOCKET, 1 + int(rand() * 4))
            net = None
            if sc != Syscall.SOCKET:
                direction = OUTGOING if sc == Syscall.CONNECT else INCOMING
                net = NetInfo(direction, ports[int(rand() * 4)])
            out.append(SyscallRecord(sc, subject, clock(), sock, net=net))
        if lifecycle and rand() < 0.03 and len(out) < size:
            r = rand()
            if r < 0.4 and len(pids) > 1:
                free(obj("task", pids.pop(int(rand() * len(pids)))))
            elif r < 0.8:
                free(obj("inode", 1 + int(rand() * 6), filesystems[rand() < 0.5]))
            else:
                free(obj(SOCKET, 1 + int(rand() * 4)))
    return out[:size]


def _maybe_fail(rng: random.Random, rec: SyscallRecord) -> SyscallRecord:
    if rng.random() >= 0.05:
        return rec
    n = len(hook_sequence(rec))
    flags = SyscallFlags(rec.flags.creates_new_file, FAILURE, rng.randrange(n), rec.flags.sets_xattr)
    return SyscallRecord(rec.syscall, rec.subject, rec.timestamp, rec.object, rec.path_depth, flags, rec.net, rec.path)


WORKLOADS: dict[str, Callable[..., list[TraceRecord]]] = {
    "fileserver": fileserver,
    "webserver": webserver,
    "fork-tree": fork_tree,
    "fig4-scenario": fig4_scenario,
    "mixed": mixed,
}


def generate_trace(workload: str, size: int = 100, seed: int = 0) -> list[TraceRecord]:
    """Deterministic trace for a named workload."""
    try:
        gen = WORKLOADS[workload]
    except KeyError:
        raise UnknownWorkload(f"unknown workload {workload!r}; choose from {sorted(WORKLOADS)}") from None
    if size < 0:
        raise ValueError("size must be nonnegative")
    records = gen(size, seed)
    for rec in records:
        if isinstance(rec, SyscallRecord):
            rec.validate()
    return records
