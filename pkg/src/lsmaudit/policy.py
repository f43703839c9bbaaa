"""JSON sandbox policies: parsing, minimal compilation and event-time decisions.

Document shape::

    {
      "subject": "/usr/bin/foo",
      "network": {
        "default": "deny",
        "allow": [{"direction": "outgoing", "ports": ["http", "https"]}]
      },
      "filesystem": {
        "default": {"write": "deny", "exec": "deny"},
        "allow": [
          {"path": "/tmp/**", "perms": ["read", "write"]},
          {"path": "/usr/lib/**", "perms": ["map"]}
        ]
      }
    }

A missing section leaves that category unmediated.  Inside a present
section, missing defaults are ``deny``.  Reads are never mediated; ``map``
falls under the exec default.

Compilation emits one enforcement program per hook of each *active* family
(a category whose default is deny), plus the fork-inheritance program.
Constraints live in a table keyed by security context; tasks carry their
context in their credentials' local storage.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Any

from lsmaudit.dispatch import ALLOW, EACCES, AuditProgram
from lsmaudit.errors import SchemaError, UnknownService
from lsmaudit.events import (
    INCOMING,
    OUTGOING,
    Hook,
    HookEvent,
    KernelObjectId,
    Syscall,
    cred_of,
)
from lsmaudit.provenance.ringbuf import RingBuffer
from lsmaudit.store import CONTEXT_KEY, ObjectStore

SERVICES = {"http": 80, "https": 443}
PERMS = frozenset({"read", "write", "exec", "map"})
DIRECTIONS = frozenset({INCOMING, OUTGOING})
DEFAULTS = frozenset({"deny", "allow"})

# storage slot on an inode recording the path it was opened under
PATH_KEY = "path"

FS_HOOKS = (Hook.FILE_OPEN, Hook.FILE_PERMISSION, Hook.INODE_PERMISSION)
NET_HOOKS = (Hook.SOCKET_CREATE, Hook.SOCKET_CONNECT, Hook.SOCKET_BIND, Hook.SOCKET_LISTEN, Hook.SOCKET_ACCEPT)
EXEC_HOOKS = (Hook.BPRM_CHECK,)
FORK_HOOKS = (Hook.TASK_FORK,)

FAMILIES = {"filesystem": FS_HOOKS, "network": NET_HOOKS, "exec": EXEC_HOOKS, "fork": FORK_HOOKS}


# -- globs ---------------------------------------------------------------------------


def glob_to_regex(pattern: str) -> re.Pattern[str]:
    """``*`` and ``?`` stay inside one path component; ``**`` crosses them.

    ``/**/`` also matches a single ``/`` so ``/a/**/b`` matches ``/a/b``.
    """
    out = []
    i, n = 0, len(pattern)
    while i < n:
        if pattern.startswith("/**/", i):
            out.append("/(?:.*/)?")
            i += 4
        elif pattern.startswith("**", i):
            out.append(".*")
            i += 2
        elif pattern[i] == "*":
            out.append("[^/]*")
            i += 1
        elif pattern[i] == "?":
            out.append("[^/]")
            i += 1
        else:
            out.append(re.escape(pattern[i]))
            i += 1
    return re.compile("".join(out) + r"\Z")


def specificity(pattern: str) -> int:
    """Literal characters in ``pattern``; more literal means more specific."""
    return len(pattern.replace("**", "").replace("*", "").replace("?", ""))


# -- policy model -----------------------------------------------------------------------


@dataclass(frozen=True)
class NetRule:
    id: str
    direction: str
    ports: frozenset[int]


@dataclass(frozen=True)
class FsRule:
    id: str
    path_pattern: str
    perms: frozenset[str]
    order: int = 0

    @property
    def regex(self) -> re.Pattern[str]:
        return _regex_cache(self.path_pattern)


_REGEXES: dict[str, re.Pattern[str]] = {}


def _regex_cache(pattern: str) -> re.Pattern[str]:
    rx = _REGEXES.get(pattern)
    if rx is None:
        rx = _REGEXES[pattern] = glob_to_regex(pattern)
    return rx


@dataclass(frozen=True)
class NetPolicy:
    default: str = "deny"
    allow_rules: tuple[NetRule, ...] = ()


@dataclass(frozen=True)
class FsPolicy:
    default_write: str = "deny"
    default_exec: str = "deny"
    allow_rules: tuple[FsRule, ...] = ()


@dataclass(frozen=True)
class Policy:
    subject_path: str | None
    net: NetPolicy | None
    fs: FsPolicy | None
    source_hash: str = ""

    @property
    def categories(self) -> frozenset[str]:
        """Mediated categories: those whose default is deny."""
        cats = set()
        if self.net is not None and self.net.default == "deny":
            cats.add("network")
        if self.fs is not None and self.fs.default_write == "deny":
            cats.add("filesystem")
        if self.fs is not None and self.fs.default_exec == "deny":
            cats.add("exec")
        return frozenset(cats)

    # -- decisions ---------------------------------------------------------------------

    def fs_rule_for(self, path: str | None, perm: str) -> FsRule | None:
        """Most specific rule granting ``perm`` on ``path`` (ties: document order)."""
        if self.fs is None or path is None:
            return None
        best = None
        for rule in self.fs.allow_rules:
            if perm in rule.perms and rule.regex.match(path):
                if best is None or specificity(rule.path_pattern) > specificity(best.path_pattern):
                    best = rule
        return best

    def decide_fs(self, path: str | None, perm: str) -> tuple[bool, str | None]:
        """(allowed, deciding rule id or None for the default)."""
        if perm not in PERMS:
            raise ValueError(f"unknown permission {perm!r}")
        if self.fs is None or perm == "read":
            return True, None
        default = self.fs.default_write if perm == "write" else self.fs.default_exec
        if default == "allow":
            return True, None
        rule = self.fs_rule_for(path, perm)
        return (True, rule.id) if rule is not None else (False, None)

    def decide_net(self, direction: str, port: int) -> tuple[bool, str | None]:
        if self.net is None or self.net.default == "allow":
            return True, None
        for rule in self.net.allow_rules:
            if rule.direction == direction and port in rule.ports:
                return True, rule.id
        return False, None

    def may_create_socket(self) -> bool:
        return self.net is None or self.net.default == "allow" or bool(self.net.allow_rules)


# -- parsing ---------------------------------------------------------------------------------


def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise SchemaError(path, msg)


def _check_keys(obj: dict, allowed: set[str], path: str) -> None:
    extra = set(obj) - allowed
    _expect(not extra, path, f"unknown keys {sorted(extra)}")


def resolve_port(value: Any, path: str) -> int:
    if isinstance(value, bool):
        raise SchemaError(path, "port must be a number or service name")
    if isinstance(value, int):
        _expect(1 <= value <= 0xFFFF, path, f"port {value} out of range")
        return value
    if isinstance(value, str):
        if value.isdigit():
            return resolve_port(int(value), path)
        try:
            return SERVICES[value]
        except KeyError:
            raise UnknownService(path, f"unknown service {value!r}") from None
    raise SchemaError(path, "port must be a number or service name")


def _default(value: Any, path: str) -> str:
    _expect(value in DEFAULTS, path, f"default must be 'deny' or 'allow', got {value!r}")
    return value


def _parse_net(raw: Any) -> NetPolicy:
    _expect(isinstance(raw, dict), "network", "must be an object")
    _check_keys(raw, {"default", "allow"}, "network")
    default = _default(raw.get("default", "deny"), "network.default")
    rules_raw = raw.get("allow", [])
    _expect(isinstance(rules_raw, list), "network.allow", "must be a list")
    rules = []
    for i, r in enumerate(rules_raw):
        p = f"network.allow[{i}]"
        _expect(isinstance(r, dict), p, "must be an object")
        _check_keys(r, {"id", "direction", "ports"}, p)
        direction = r.get("direction", OUTGOING)
        _expect(direction in DIRECTIONS, f"{p}.direction", f"bad direction {direction!r}")
        ports_raw = r.get("ports")
        _expect(isinstance(ports_raw, list) and ports_raw, f"{p}.ports", "must be a nonempty list")
        ports = frozenset(resolve_port(v, f"{p}.ports[{j}]") for j, v in enumerate(ports_raw))
        rid = r.get("id", p)
        _expect(isinstance(rid, str), f"{p}.id", "must be a string")
        rules.append(NetRule(rid, direction, ports))
    return NetPolicy(default, tuple(rules))


def _parse_fs(raw: Any) -> FsPolicy:
    _expect(isinstance(raw, dict), "filesystem", "must be an object")
    _check_keys(raw, {"default", "allow"}, "filesystem")
    defaults = raw.get("default", {})
    if isinstance(defaults, str):
        defaults = {"write": defaults, "exec": defaults}
    _expect(isinstance(defaults, dict), "filesystem.default", "must be an object or 'deny'/'allow'")
    _check_keys(defaults, {"write", "exec"}, "filesystem.default")
    d_write = _default(defaults.get("write", "deny"), "filesystem.default.write")
    d_exec = _default(defaults.get("exec", "deny"), "filesystem.default.exec")
    rules_raw = raw.get("allow", [])
    _expect(isinstance(rules_raw, list), "filesystem.allow", "must be a list")
    rules = []
    for i, r in enumerate(rules_raw):
        p = f"filesystem.allow[{i}]"
        _expect(isinstance(r, dict), p, "must be an object")
        _check_keys(r, {"id", "path", "perms"}, p)
        pattern = r.get("path")
        _expect(isinstance(pattern, str) and pattern.startswith("/"), f"{p}.path", "must be an absolute glob")
        perms = r.get("perms")
        _expect(isinstance(perms, list) and perms, f"{p}.perms", "must be a nonempty list")
        for j, perm in enumerate(perms):
            _expect(perm in PERMS, f"{p}.perms[{j}]", f"unknown permission {perm!r}")
        rid = r.get("id", p)
        _expect(isinstance(rid, str), f"{p}.id", "must be a string")
        rules.append(FsRule(rid, pattern, frozenset(perms), i))
    return FsPolicy(d_write, d_exec, tuple(rules))


def parse_policy(document: bytes | str | dict) -> Policy:
    """Parse and validate a policy document."""
    if isinstance(document, dict):
        raw = document
    else:
        if isinstance(document, bytes):
            document = document.decode()
        try:
            raw = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc.msg}") from None
    _expect(isinstance(raw, dict), "$", "policy must be a JSON object")
    _check_keys(raw, {"subject", "network", "filesystem"}, "$")
    subject = raw.get("subject")
    _expect(subject is None or (isinstance(subject, str) and subject.startswith("/")), "subject", "must be an absolute path")
    net = _parse_net(raw["network"]) if "network" in raw else None
    fs = _parse_fs(raw["filesystem"]) if "filesystem" in raw else None
    digest = hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    return Policy(subject, net, fs, digest)


# -- evaluation ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class ViolationRecord:
    timestamp: int
    hook: str
    subject: str
    object: str | None
    action: str
    rule: str | None
    decision: str = "deny"

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def context_of(store: ObjectStore, subject: KernelObjectId) -> str | None:
    rec = store.find(cred_of(subject))
    if rec is None or rec.storage is None:
        return None
    raw = rec.storage.get(CONTEXT_KEY)
    return None if raw is None else bytes(raw).decode()


def bind_context(store: ObjectStore, subject: KernelObjectId, context: str) -> None:
    store.resolve(subject)
    store.storage_get(cred_of(subject), create_if_missing=True).set(CONTEXT_KEY, context.encode())


def inherit_on_fork(parent: KernelObjectId, child: KernelObjectId, store: ObjectStore) -> None:
    """Copy the parent's security context to the child's credentials."""
    ctx = context_of(store, parent)
    if ctx is not None:
        bind_context(store, child, ctx)


def _path_of(ev: HookEvent, store: ObjectStore) -> str | None:
    obj = ev.object
    if obj is not None:
        rec = store.find(obj)
        if rec is not None and rec.storage is not None:
            raw = rec.storage.get(PATH_KEY)
            if raw is not None:
                return bytes(raw).decode()
    return ev.origin.path


def decide_event(policy: Policy, ev: HookEvent, store: ObjectStore) -> tuple[bool, str | None, str]:
    """(allowed, rule id, action description) for ``ev`` under ``policy``."""
    hook = ev.hook
    rec = ev.origin
    if hook == Hook.FILE_OPEN:
        path = rec.path
        if ev.object is not None and path is not None:
            store.storage_get(ev.object, create_if_missing=True).set(PATH_KEY, path.encode())
        if rec.flags.creates_new_file:
            ok, rule = policy.decide_fs(path, "write")
            return ok, rule, f"create {path}"
        return True, None, f"open {path}"
    if hook == Hook.FILE_PERMISSION:
        path = _path_of(ev, store)
        perm = "write" if rec.syscall == Syscall.WRITE else "read"
        ok, rule = policy.decide_fs(path, perm)
        return ok, rule, f"{perm} {path}"
    if hook == Hook.INODE_PERMISSION:
        return True, None, "search"
    if hook == Hook.BPRM_CHECK:
        path = _path_of(ev, store)
        ok, rule = policy.decide_fs(path, "exec")
        return ok, rule, f"exec {path}"
    if hook == Hook.SOCKET_CREATE:
        return policy.may_create_socket(), None, "socket"
    if hook in (Hook.SOCKET_CONNECT, Hook.SOCKET_BIND, Hook.SOCKET_LISTEN, Hook.SOCKET_ACCEPT):
        net = rec.net
        if net is None:
            return policy.decide_net(OUTGOING, 0) + (hook.value,)
        ok, rule = policy.decide_net(net.direction, net.port)
        return ok, rule, f"{hook.value.removeprefix('socket_')} {net.direction} {net.port}"
    if hook == Hook.TASK_FORK:
        inherit_on_fork(ev.subject, ev.object, store)
        return True, None, "fork"
    return True, None, hook.value


@dataclass
class CompiledProgramSet:
    programs: list[AuditProgram]
    hooks_covered: frozenset[Hook]
    provenance: dict
    table: dict[str, Policy]
    context: str
    rules_by_hook: dict[Hook, list[str]] = field(default_factory=dict)
    violations: RingBuffer = field(default_factory=lambda: RingBuffer(1024))
    violation_log: list[ViolationRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.violations.on_full = self.drain_violations

    def drain_violations(self) -> list[ViolationRecord]:
        got = self.violations.pop_all()
        self.violation_log.extend(got)
        return got

    def bind(self, store: ObjectStore, subject: KernelObjectId) -> None:
        bind_context(store, subject, self.context)

    def plan(self) -> dict:
        return {
            "policy": self.provenance["source_policy_hash"],
            "context": self.context,
            "options": self.provenance["options"],
            "hooks_covered": sorted(h.value for h in self.hooks_covered),
            "programs": [
                {"id": p.id, "hook": p.hook.value, "rules": self.rules_by_hook.get(p.hook, [])}
                for p in self.programs
            ],
        }

    def explain(self) -> str:
        lines = []
        for p in self.programs:
            rules = self.rules_by_hook.get(p.hook, [])
            lines.append(f"{p.hook.value:<16} {p.id:<28} {', '.join(rules) or '-'}")
        return "\n".join(lines)


def evaluate(ev: HookEvent, pset: CompiledProgramSet, store: ObjectStore) -> tuple[int, ViolationRecord | None]:
    """Decision for ``ev``; a deny also pushes a violation record."""
    ctx = context_of(store, ev.subject)
    policy = pset.table.get(ctx) if ctx is not None else None
    if policy is None:
        # tasks without a bound context are not constrained by this set
        return ALLOW, None
    ok, rule, action = decide_event(policy, ev, store)
    if ok:
        return ALLOW, None
    v = ViolationRecord(
        ev.origin.timestamp,
        ev.hook.value,
        str(ev.subject),
        None if ev.object is None else str(ev.object),
        action,
        rule,
    )
    pset.violations.push(v)
    return EACCES, v


def _family_rules(policy: Policy, family: str) -> list[str]:
    if family == "network" and policy.net is not None:
        return [r.id for r in policy.net.allow_rules] or ["network.default"]
    if family == "filesystem" and policy.fs is not None:
        return [r.id for r in policy.fs.allow_rules if "write" in r.perms] or ["filesystem.default.write"]
    if family == "exec" and policy.fs is not None:
        return [r.id for r in policy.fs.allow_rules if r.perms & {"exec", "map"}] or ["filesystem.default.exec"]
    return ["inherit"]


def compile_policy(policy: Policy, options: dict | None = None) -> CompiledProgramSet:
    """Minimal enforcement program set for ``policy``."""
    families = sorted(policy.categories) + ["fork"]
    context = f"policy:{policy.source_hash[:16]}"
    hooks: list[Hook] = []
    rules_by_hook: dict[Hook, list[str]] = {}
    for fam in families:
        for h in FAMILIES[fam]:
            if h not in rules_by_hook:
                hooks.append(h)
                rules_by_hook[h] = _family_rules(policy, fam)
    pset = CompiledProgramSet(
        programs=[],
        hooks_covered=frozenset(hooks),
        provenance={"source_policy_hash": policy.source_hash, "options": dict(options or {})},
        table={context: policy},
        context=context,
        rules_by_hook=rules_by_hook,
    )

    def body(ev, store, sink) -> int:
        return evaluate(ev, pset, store)[0]

    pset.programs = [AuditProgram(f"enforce:{h.value}", h, body, opaque_to_capture=True) for h in hooks]
    return pset


compile = compile_policy  # noqa: A001 - public name of the operation


class RuntimeInterpreter:
    """Monolithic alternative: one program on every hook scanning raw rules per event.

    Same decisions as the compiled set, but nothing is specialized ahead of
    time, so every hook pays for a program run.
    """

    def __init__(self, policy: Policy, hooks: Iterable[Hook] = Hook) -> None:
        self.policy = policy
        self.raw_rules = list(policy.fs.allow_rules if policy.fs else ()) + list(policy.net.allow_rules if policy.net else ())
        self.context = f"policy:{policy.source_hash[:16]}"
        self.violation_log: list[ViolationRecord] = []
        self.programs = [AuditProgram(f"interp:{h.value}", h, self._body) for h in hooks]

    def _body(self, ev: HookEvent, store: ObjectStore, sink) -> int:
        if context_of(store, ev.subject) != self.context:
            return ALLOW
        ok, rule, action = decide_event(self.policy, ev, store)
        if ok:
            return ALLOW
        self.violation_log.append(
            ViolationRecord(ev.origin.timestamp, ev.hook.value, str(ev.subject), None if ev.object is None else str(ev.object), action, rule)
        )
        return EACCES
