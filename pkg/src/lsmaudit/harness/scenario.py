"""Declarative scenario files.

Example::

    {
      "cgroups": [{"id": "pod", "parent": "root"}, {"id": "child", "parent": "pod"}],
      "tasks": [{"pid": 100, "cgroup": "pod"}],
      "capture": {"cgroups": ["root"], "hooks": "all", "merge": true,
                  "avoid_versions": true,
                  "filter": {"relations": ["read", "write"], "kinds": ["task", "file"]}},
      "policies": [{"id": "foo", "file": "policy.json", "cgroup": "pod", "bind_pids": [100]}],
      "attachments": [{"cgroup": "child", "hook": "file_open", "action": "deny", "code": 13}],
      "opaque": [{"kind": "task", "id": 7}]
    }

Every section is optional.  The root cgroup is always called ``root``;
tasks not listed start there.  Relative policy file paths resolve against
the scenario file's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

from lsmaudit.errors import ScenarioError, SchemaError, TraceError, UnknownHook
from lsmaudit.events import Hook, KernelObjectId, object_from_json
from lsmaudit.policy import Policy, parse_policy

ROOT = "root"


@dataclass
class CgroupSpec:
    id: str
    parent: str = ROOT


@dataclass
class TaskPlacement:
    pid: int
    cgroup: str = ROOT
    generation: int = 0


@dataclass
class CaptureSpec:
    cgroups: list[str] = field(default_factory=lambda: [ROOT])
    hooks: list[Hook] = field(default_factory=lambda: list(Hook))
    merge: bool = True
    avoid_versions: bool = True
    relations: list[str] | None = None
    kinds: list[str] | None = None
    contexts: list[str] | None = None


@dataclass
class PolicySpec:
    id: str
    policy: Policy
    cgroup: str = ROOT
    bind_pids: list[int] = field(default_factory=list)


@dataclass
class AttachmentSpec:
    cgroup: str
    hook: Hook
    action: str = "allow"
    code: int = 13
    id: str | None = None


@dataclass
class Scenario:
    cgroups: list[CgroupSpec] = field(default_factory=list)
    tasks: list[TaskPlacement] = field(default_factory=list)
    capture: CaptureSpec | None = field(default_factory=CaptureSpec)
    policies: list[PolicySpec] = field(default_factory=list)
    attachments: list[AttachmentSpec] = field(default_factory=list)
    opaque: list[KernelObjectId] = field(default_factory=list)

    def validate(self) -> Scenario:
        known = {ROOT}
        for cg in self.cgroups:
            if cg.id in known:
                raise ScenarioError(f"duplicate cgroup {cg.id!r}")
            if cg.parent not in known:
                raise ScenarioError(f"cgroup {cg.id!r} has unknown parent {cg.parent!r} (parents must come first)")
            known.add(cg.id)

        def need(cg: str, what: str) -> None:
            if cg not in known:
                raise ScenarioError(f"{what} references unknown cgroup {cg!r}")

        for t in self.tasks:
            need(t.cgroup, f"task {t.pid}")
        if self.capture is not None:
            for cg in self.capture.cgroups:
                need(cg, "capture")
        for p in self.policies:
            need(p.cgroup, f"policy {p.id}")
        for a in self.attachments:
            need(a.cgroup, "attachment")
            if a.action not in ("allow", "deny"):
                raise ScenarioError(f"attachment action must be allow or deny, got {a.action!r}")
        return self


def _hooks(raw: Any) -> list[Hook]:
    if raw in (None, "all"):
        return list(Hook)
    if not isinstance(raw, list):
        raise ScenarioError("capture.hooks must be 'all' or a list")
    try:
        return [Hook.parse(h) for h in raw]
    except UnknownHook as exc:
        raise ScenarioError(str(exc)) from None


def scenario_from_json(raw: Any, base_dir: str = ".") -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a JSON object")
    extra = set(raw) - {"cgroups", "tasks", "capture", "policies", "attachments", "opaque"}
    if extra:
        raise ScenarioError(f"unknown scenario keys {sorted(extra)}")
    try:
        cgroups = [CgroupSpec(c["id"], c.get("parent", ROOT)) for c in raw.get("cgroups", [])]
        tasks = [TaskPlacement(int(t["pid"]), t.get("cgroup", ROOT), int(t.get("gen", 0))) for t in raw.get("tasks", [])]
        capture = None
        if raw.get("capture", {}) is not None:
            c = raw.get("capture", {})
            filt = c.get("filter", {})
            capture = CaptureSpec(
                cgroups=list(c.get("cgroups", [ROOT])),
                hooks=_hooks(c.get("hooks")),
                merge=bool(c.get("merge", True)),
                avoid_versions=bool(c.get("avoid_versions", True)),
                relations=filt.get("relations"),
                kinds=filt.get("kinds"),
                contexts=filt.get("contexts"),
            )
        policies = []
        for i, p in enumerate(raw.get("policies", [])):
            if "inline" in p:
                pol = parse_policy(p["inline"])
            elif "file" in p:
                path = p["file"] if os.path.isabs(p["file"]) else os.path.join(base_dir, p["file"])
                with open(path, "rb") as fh:
                    pol = parse_policy(fh.read())
            else:
                raise ScenarioError(f"policy {i} needs 'file' or 'inline'")
            policies.append(PolicySpec(p.get("id", f"policy{i}"), pol, p.get("cgroup", ROOT), [int(x) for x in p.get("bind_pids", [])]))
        attachments = []
        for a in raw.get("attachments", []):
            attachments.append(AttachmentSpec(a["cgroup"], Hook.parse(a["hook"]), a.get("action", "allow"), int(a.get("code", 13)), a.get("id")))
        opaque = [object_from_json(o) for o in raw.get("opaque", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from None
    except (TraceError, SchemaError) as exc:
        raise ScenarioError(str(exc)) from None
    except OSError as exc:
        raise ScenarioError(f"cannot read policy: {exc}") from None
    return Scenario(cgroups, tasks, capture, policies, attachments, opaque).validate()


def load_scenario(path: str | os.PathLike) -> Scenario:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON: {exc.msg}") from None
    return scenario_from_json(raw, os.path.dirname(os.path.abspath(path)))
