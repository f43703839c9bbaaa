"""Acquire/release pairing check over a small program-graph language.

Each program is a list of statements, one per line::

    program lookup
    acquire dentry        # take a reference
    branch hit miss       # continue at either label
    label hit
    release dentry
    exit
    label miss
    exit

Statements: ``program <id>``, ``acquire [res]``, ``release [res]``,
``branch <label>...``, ``goto <label>``, ``label <name>``, ``exit``.  Any
other statement is an opaque operation and ignored.  ``#`` starts a
comment.  Falling off the end of a program is an implicit ``exit``.  The
resource defaults to ``dentry``.

Every path from the entry to an exit must release each resource exactly as
many times as it acquires it, and never release more than it holds.
Programs with loops are rejected.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field

from lsmaudit.errors import MalformedProgramGraph

DEFAULT_RESOURCE = "dentry"


@dataclass(frozen=True)
class Stmt:
    op: str
    args: tuple[str, ...] = ()
    line: int = 0


@dataclass
class Program:
    id: str
    body: list[Stmt] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class Violation:
    program: str
    path: str
    resource: str
    unmatched: int  # acquisitions minus releases at exit
    underflow: bool = False  # a release happened with nothing held

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PairingCheckReport:
    violations: list[Violation] = field(default_factory=list)
    paths_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def parse_programs(text: str) -> list[Program]:
    programs: list[Program] = []
    current: Program | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        op, *args = line.split()
        if op == "program":
            if len(args) != 1:
                raise MalformedProgramGraph(f"line {lineno}: program takes one id")
            current = Program(args[0])
            programs.append(current)
            continue
        if current is None:
            current = Program("main")
            programs.append(current)
        if op == "label":
            if len(args) != 1:
                raise MalformedProgramGraph(f"line {lineno}: label takes one name")
            if args[0] in current.labels:
                raise MalformedProgramGraph(f"line {lineno}: duplicate label {args[0]!r}")
            current.labels[args[0]] = len(current.body)
        elif op in ("acquire", "release"):
            if len(args) > 1:
                raise MalformedProgramGraph(f"line {lineno}: {op} takes at most one resource")
        elif op in ("branch", "goto"):
            if not args or (op == "goto" and len(args) != 1):
                raise MalformedProgramGraph(f"line {lineno}: {op} needs target label(s)")
        current.body.append(Stmt(op, tuple(args), lineno))
    for prog in programs:
        for st in prog.body:
            if st.op in ("branch", "goto"):
                for target in st.args:
                    if target not in prog.labels:
                        raise MalformedProgramGraph(f"{prog.id} line {st.line}: unknown label {target!r}")
    return programs


def _check_one(prog: Program, report: PairingCheckReport) -> None:
    # depth-first over (pc, held counts, underflowed resources, path, visited labels)
    stack = [(0, {}, frozenset(), "entry", frozenset())]
    body = prog.body
    label_at: dict[int, list[str]] = {}
    for name, pos in prog.labels.items():
        label_at.setdefault(pos, []).append(name)
    while stack:
        pc, held, under, path, seen = stack.pop()
        while True:
            for name in label_at.get(pc, ()):
                if name in seen:
                    raise MalformedProgramGraph(f"{prog.id}: loop through label {name!r}")
                seen = seen | {name}
            if pc >= len(body):
                st = Stmt("exit")
            else:
                st = body[pc]
            if st.op == "exit":
                report.paths_checked += 1
                for res in sorted(set(held) | under):
                    if held.get(res, 0) != 0 or res in under:
                        report.violations.append(Violation(prog.id, path, res, held.get(res, 0), res in under))
                break
            if st.op == "acquire" or st.op == "release":
                res = st.args[0] if st.args else DEFAULT_RESOURCE
                n = held.get(res, 0) + (1 if st.op == "acquire" else -1)
                held = {**held, res: n}
                if n < 0:
                    under = under | {res}
                pc += 1
            elif st.op in ("branch", "goto"):
                for target in reversed(st.args):
                    suffix = f"/{target}" if st.op == "branch" else ""
                    stack.append((prog.labels[target], held, under, path + suffix, seen))
                break
            else:
                pc += 1


def check_pairing(program: str | Program | Iterable[Program]) -> PairingCheckReport:
    """Check every entry-to-exit path of every program."""
    if isinstance(program, str):
        programs = parse_programs(program)
    elif isinstance(program, Program):
        programs = [program]
    else:
        programs = list(program)
    report = PairingCheckReport()
    for prog in programs:
        _check_one(prog, report)
    return report
