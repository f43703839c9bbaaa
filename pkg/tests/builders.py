"""Random cgroup scenarios for the dispatch tests."""

from __future__ import annotations

import random

from lsmaudit.dispatch import AuditProgram, CgroupTree
from lsmaudit.events import Hook, HookEvent, Syscall, SyscallRecord, inode, task

HOOKS = list(Hook)


def random_parents(rng: random.Random, max_nodes: int = 64, max_depth: int = 6) -> dict:
    """cgroup id -> parent id (root maps to None)."""
    parent = {"root": None}
    depth = {"root": 0}
    for i in range(rng.randint(0, max_nodes - 1)):
        choices = [c for c in parent if depth[c] < max_depth]
        p = rng.choice(choices)
        cid = f"cg{i}"
        parent[cid] = p
        depth[cid] = depth[p] + 1
    return parent


def build_tree(parent: dict) -> CgroupTree:
    tree = CgroupTree("root")
    for cid, p in parent.items():  # insertion order puts parents first
        if p is not None:
            tree.add(cid, p)
    return tree


def fixed(pid: str, hook: Hook, rc: int) -> AuditProgram:
    return AuditProgram(pid, hook, lambda ev, store, sink: rc)


def random_attachments(rng: random.Random, parent: dict, count: int, hooks=HOOKS, deny_rate: float = 0.15) -> list:
    out = []
    for i in range(count):
        rc = rng.choice([1, 13]) if rng.random() < deny_rate else 0
        out.append((rng.choice(list(parent)), rng.choice(hooks), f"p{i}", rc))
    return out


def attach_all(tree: CgroupTree, attachments: list) -> None:
    for cg, hook, pid, rc in attachments:
        tree.attach(cg, hook, fixed(pid, hook, rc), allow_multi=True)


def event(hook: Hook, pid: int = 1) -> HookEvent:
    rec = SyscallRecord(Syscall.READ, task(pid), 1, inode("sda1", 1))
    return HookEvent(hook, task(pid), inode("sda1", 1), rec, 0)
