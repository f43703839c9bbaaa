"""Per-hook provenance templates.

This table is the single description of what each LSM hook contributes to
the provenance graph.  The capture engine executes it; the motif verifier
turns it into graph motifs.

Roles name the objects a template talks about:

``subject``      the acting task
``object``       the event's object (file, directory, socket, child task, ...)
``subject_mem``  the acting task's address space
``object_mem``   the address space of ``object`` (fork only)

Operations:

``Touch(role)``
    the object is referenced; its current version node must exist.
``Flow(src, dst, relation)``
    information flows from ``src`` into ``dst``.  ``dst`` gets a new version
    unless version avoidance applies.
``Create(dst, sources)``
    ``dst`` comes into existence at version 1 with one edge per
    ``(src, relation)``.  On an object that already has capture state it
    degrades into one ``Flow`` per source.
"""

from __future__ import annotations

from typing import NamedTuple, Union

from lsmaudit.errors import UnmodeledHook
from lsmaudit.events import Hook, KernelObjectId, Syscall, memory_of

SUBJECT = "subject"
OBJECT = "object"
SUBJECT_MEM = "subject_mem"
OBJECT_MEM = "object_mem"

READ = "read"
WRITE = "write"
CREATE = "create"
FORK = "fork"
VERSION = "version"
EXEC = "exec"
CONNECT = "connect"

RELATIONS = frozenset({READ, WRITE, CREATE, FORK, VERSION, EXEC, CONNECT})


class Touch(NamedTuple):
    role: str


class Flow(NamedTuple):
    src: str
    dst: str
    relation: str


class Create(NamedTuple):
    dst: str
    sources: tuple[tuple[str, str], ...]


Op = Union[Touch, Flow, Create]
Template = tuple[Op, ...]

_TABLE: dict[Hook, Template] = {
    Hook.INODE_PERMISSION: (Flow(OBJECT, SUBJECT, READ),),
    Hook.FILE_OPEN: (Touch(OBJECT),),
    Hook.INODE_CREATE: (Create(OBJECT, ((SUBJECT, CREATE),)),),
    Hook.INODE_SETATTR: (Flow(SUBJECT, OBJECT, WRITE),),
    Hook.INODE_POST_SETXATTR: (Flow(SUBJECT, OBJECT, WRITE),),
    Hook.BPRM_CHECK: (Flow(OBJECT, SUBJECT, EXEC),),
    Hook.BPRM_SET_CREDS: (Flow(OBJECT, SUBJECT, EXEC),),
    Hook.SOCKET_CREATE: (Create(OBJECT, ((SUBJECT, CREATE),)),),
    Hook.SOCKET_BIND: (Flow(SUBJECT, OBJECT, WRITE),),
    Hook.SOCKET_LISTEN: (Flow(SUBJECT, OBJECT, WRITE),),
    Hook.SOCKET_CONNECT: (Flow(SUBJECT, OBJECT, CONNECT),),
    Hook.SOCKET_ACCEPT: (Flow(OBJECT, SUBJECT, CONNECT),),
    Hook.TASK_FORK: (
        Create(OBJECT, ((SUBJECT, FORK),)),
        Create(OBJECT_MEM, ((SUBJECT, CREATE), (SUBJECT_MEM, FORK))),
    ),
}

# file_permission direction depends on the syscall that triggered it
_FILE_PERMISSION: dict[Syscall, Template] = {
    Syscall.READ: (Flow(OBJECT, SUBJECT, READ),),
    Syscall.WRITE: (Flow(SUBJECT, OBJECT, WRITE),),
    Syscall.EXECVE: (Flow(OBJECT, SUBJECT, READ),),
}


def template_for(hook: Hook | str, syscall: Syscall | None = None) -> Template:
    """Template for ``hook``; ``syscall`` selects the file_permission direction."""
    try:
        hook = Hook(hook)
    except ValueError:
        raise UnmodeledHook(f"no template for hook {hook!r}") from None
    if hook == Hook.FILE_PERMISSION:
        return _FILE_PERMISSION.get(syscall, _FILE_PERMISSION[Syscall.READ])
    try:
        return _TABLE[hook]
    except KeyError:
        raise UnmodeledHook(f"no template for hook {hook.value}") from None


def bind_roles(subject: KernelObjectId, obj: KernelObjectId | None) -> dict[str, KernelObjectId]:
    roles = {SUBJECT: subject, SUBJECT_MEM: memory_of(subject)}
    if obj is not None:
        roles[OBJECT] = obj
        roles[OBJECT_MEM] = memory_of(obj)
    return roles


def roles_of(template: Template) -> list[str]:
    """Roles referenced by ``template`` in first-use order."""
    seen: dict[str, None] = {}
    for op in template:
        if isinstance(op, Touch):
            seen.setdefault(op.role)
        elif isinstance(op, Flow):
            seen.setdefault(op.src)
            seen.setdefault(op.dst)
        else:
            for src, _ in op.sources:
                seen.setdefault(src)
            seen.setdefault(op.dst)
    return list(seen)
