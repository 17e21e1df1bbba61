"""Agent-style traces: generation, JSON-lines I/O, and replay against the engine
under a clone strategy, optionally cross-checked against the eager oracle."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from .engine import Branch, BranchStatus, Engine
from .oracle import EagerOracle
from .strategies import TCLONE, CloneStrategy, CostModel, clone, footprint
from .workspace import (
    ConnKind,
    MemoryClass,
    WorkspaceSpec,
    WorkspaceState,
    build_workspace,
    diff,
)

ACTIONS = ("record", "fork", "write", "fs_read", "fs_write", "gui_write", "send", "rollback",
           "discard", "promote", "model_call", "external")


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    step: int
    action: str
    args: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"step": self.step, "action": self.action, "args": self.args}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> TraceEvent:
        try:
            step = int(d["step"])
            action = d["action"]
        except KeyError as exc:
            raise TraceError(f"trace event missing {exc}") from None
        args = d.get("args", {})
        if action not in ACTIONS:
            raise TraceError(f"unknown trace action {action!r}")
        if not isinstance(args, dict):
            raise TraceError(f"step {step}: args must be an object")
        return cls(step, action, dict(args))


@dataclass
class Trace:
    workspace: WorkspaceSpec
    seed: int
    events: list[TraceEvent]
    kind: str = "random"

    def dumps(self) -> str:
        head = {"header": {"workspace": self.workspace.to_json(), "seed": self.seed, "kind": self.kind}}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(e.to_json(), sort_keys=True) for e in self.events]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> Trace:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise TraceError("empty trace")
        try:
            head = json.loads(lines[0])["header"]
            spec = WorkspaceSpec.from_json(head["workspace"])
            events = [TraceEvent.from_json(json.loads(ln)) for ln in lines[1:]]
        except (KeyError, json.JSONDecodeError, TypeError) as exc:
            raise TraceError(f"malformed trace: {exc}") from None
        return cls(spec, int(head.get("seed", 0)), events, head.get("kind", "random"))

    @classmethod
    def load(cls, path: str | Path) -> Trace:
        return cls.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

SMALL_SPEC = WorkspaceSpec(
    processes=3,
    tree_seed=11,
    anon_pages=48,
    vmas_per_process=2,
    shared_pages=4,
    file_manifest=[{"path": "/home/user/doc.txt", "size": 70 * 4096},
                   {"path": "/etc/app.conf", "size": 2 * 4096}],
    file_maps=1,
    conn_mix={"internal": 2, "external": 1},
    gui_buffers=[2 * 4096],
    touched_fraction=0.75,
)


class _Shape:
    """Addressable targets of a workspace, for generating valid events."""

    def __init__(self, state: WorkspaceState) -> None:
        self.regions = [(r.local_pid, r.vma_id, r.length) for r in state.regions if r.length]
        self.anon = [(r.local_pid, r.vma_id, r.length) for r in state.regions
                     if r.length and r.mem_class is MemoryClass.ANONYMOUS]
        self.files = sorted((p, len(pages)) for p, pages in state.fs.files.items() if pages)
        self.gui = [len(g.contents) for g in state.gui_buffers]
        self.internal = [c.conn_id for c in state.connections if c.kind is ConnKind.INTERNAL]


def random_trace(length: int, seed: int, spec: WorkspaceSpec = SMALL_SPEC, max_branches: int = 8) -> Trace:
    """Random valid trace of exactly ``length`` events."""
    rng = np.random.default_rng(seed)
    shape = _Shape(build_workspace(spec))
    live = ["b0"]
    node: dict[str, str | None] = {"b0": None}
    parent: dict[str, str | None] = {}
    nb, nv = 1, 0
    events: list[TraceEvent] = []

    def lineage(b: str) -> list[str]:
        out, cur = [], node[b]
        while cur is not None:
            out.append(cur)
            cur = parent[cur]
        return out

    def data() -> str:
        return rng.bytes(int(rng.integers(1, 17))).hex()

    weights = {"write": 30, "fs_write": 10, "fs_read": 10, "gui_write": 6, "send": 4, "record": 8,
               "fork": 6, "rollback": 8, "discard": 4, "model_call": 4, "external": 3, "promote": 1}
    names = list(weights)
    probs = np.array([weights[n] for n in names], dtype=float)
    probs /= probs.sum()
    while len(events) < length:
        action = names[int(rng.choice(len(names), p=probs))]
        b = live[int(rng.integers(0, len(live)))] if live else None
        step = len(events)
        if b is None:
            action = "model_call"
        if action == "write":
            pid, vma, n = shape.regions[int(rng.integers(0, len(shape.regions)))]
            d = data()
            args = {"branch": b, "pid": pid, "vma": vma, "slot": int(rng.integers(0, n)),
                    "offset": int(rng.integers(0, 4096 - len(d) // 2 + 1)), "data": d}
        elif action in ("fs_write", "fs_read"):
            path, n = shape.files[int(rng.integers(0, len(shape.files)))]
            args = {"branch": b, "path": path, "index": int(rng.integers(0, n))}
            if action == "fs_write":
                d = data()
                args.update(offset=int(rng.integers(0, 4096 - len(d) // 2 + 1)), data=d)
        elif action == "gui_write":
            if not shape.gui:
                continue
            k = int(rng.integers(0, len(shape.gui)))
            d = data()
            args = {"branch": b, "buffer": k, "page": int(rng.integers(0, shape.gui[k])),
                    "offset": int(rng.integers(0, 4096 - len(d) // 2 + 1)), "data": d}
        elif action == "send":
            if not shape.internal:
                continue
            args = {"branch": b, "conn": shape.internal[int(rng.integers(0, len(shape.internal)))],
                    "data": data(), "from_local": bool(rng.integers(0, 2))}
        elif action == "record":
            nv += 1
            v = f"v{nv}"
            parent[v], node[b] = node[b], v
            args = {"branch": b, "version": v}
        elif action == "fork":
            room = max_branches - len(live)
            if room < 1:
                continue
            n = int(rng.integers(1, min(3, room) + 1))
            nv += 1
            v = f"v{nv}"
            parent[v], node[b] = node[b], v
            kids = [f"b{nb + i}" for i in range(n)]
            nb += n
            for k in kids:
                node[k] = v
            live.extend(kids)
            args = {"branch": b, "n": n, "version": v, "children": kids}
        elif action == "rollback":
            lin = lineage(b)
            if not lin:
                continue
            v = lin[int(rng.integers(0, len(lin)))]
            node[b] = v
            args = {"branch": b, "version": v}
        elif action in ("discard", "promote"):
            if len(live) < 2:
                continue
            live.remove(b)
            args = {"branch": b}
        elif action == "model_call":
            args = {"latency_ms": float(rng.choice([500.0, 1000.0, 2000.0]))}
        else:
            args = {"branch": b, "action": f"http://example.invalid/{int(rng.integers(0, 1000))}"}
        events.append(TraceEvent(step, action, args))
    return Trace(spec, seed, events)


def trace_lengths(count: int, max_len: int, seed: int) -> list[int]:
    """Log-uniform lengths in [1, max_len]; the first is exactly ``max_len``."""
    rng = np.random.default_rng(seed)
    raw = np.exp(rng.uniform(0.0, math.log(max_len), size=count))
    out = [int(max(1, min(max_len, round(x)))) for x in raw]
    if out:
        out[0] = max_len
    return out


def best_of_n_trace(steps: int = 3, n: int = 4, seed: int = 0, spec: WorkspaceSpec | None = None,
                    writes_per_branch: int = 32, model_ms: float = 2000.0) -> Trace:
    """Plan, fork n candidates, act, judge, keep the winner; repeat; promote."""
    from .workspace import CHROMIUM_SPEC

    spec = spec or CHROMIUM_SPEC
    rng = np.random.default_rng(seed)
    shape = _Shape(build_workspace(spec))
    anon = shape.anon
    events: list[TraceEvent] = []
    cur, nb, nv = "b0", 1, 0

    def add(action: str, **args: Any) -> None:
        events.append(TraceEvent(len(events), action, args))

    for _ in range(steps):
        add("model_call", latency_ms=model_ms)
        nv += 1
        kids = [f"b{nb + i}" for i in range(n)]
        nb += n
        add("fork", branch=cur, n=n, version=f"v{nv}", children=kids)
        add("model_call", latency_ms=model_ms)
        for k in kids:
            for _ in range(writes_per_branch):
                pid, vma, length = anon[int(rng.integers(0, len(anon)))]
                add("write", branch=k, pid=pid, vma=vma, slot=int(rng.integers(0, length)), offset=0,
                    data=rng.bytes(8).hex())
        add("model_call", latency_ms=model_ms)
        winner = kids[int(rng.integers(0, n))]
        for k in kids:
            if k != winner:
                add("discard", branch=k)
        cur = winner
    add("promote", branch=cur)
    return Trace(spec, seed, events, kind=f"best-of-{n}")


def model_only_trace(count: int = 5, latency_ms: float = 2000.0, spec: WorkspaceSpec = SMALL_SPEC) -> Trace:
    return Trace(spec, 0, [TraceEvent(i, "model_call", {"latency_ms": latency_ms}) for i in range(count)],
                 kind="model-only")


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


@dataclass
class ReplayResult:
    strategy: str
    events: int
    substrate_ms: float
    model_ms: float
    diffs: list[str]
    counters: dict[str, int]
    footprint: int
    wall_s: float
    branches: dict[str, Branch]

    @property
    def end_to_end_ms(self) -> float:
        return self.substrate_ms + self.model_ms


class Replayer:
    def __init__(self, trace: Trace, strategy: CloneStrategy = TCLONE, cost: CostModel | None = None,
                 verify: bool = False, state: WorkspaceState | None = None, branch_cap: int = 64) -> None:
        self.trace = trace
        self.strategy = strategy
        self.cost = cost or CostModel()
        self.verify = verify
        self.initial = state if state is not None else build_workspace(trace.workspace)
        self.engine = Engine(branch_cap=branch_cap)
        self.oracle = EagerOracle() if verify else None
        self.branches: dict[str, Branch] = {}
        self.versions: dict[str, str] = {}
        self.diffs: list[str] = []
        self.substrate_ms = 0.0
        self.model_ms = 0.0
        self.counters: dict[str, int] = {"cow_breaks": 0, "forks": 0, "rollbacks": 0, "probes": 0}

    def run(self) -> ReplayResult:
        t0 = time.perf_counter()
        try:
            b0 = self.engine.load(self.initial)
            self.branches["b0"] = b0
            if self.oracle is not None:
                self.oracle.load("b0", self.initial)
            for ev in self.trace.events:
                self.apply(ev)
            if self.oracle is not None:
                self.compare_all()
                problems = self.engine.audit()
                self.diffs.extend(f"audit: {p}" for p in problems)
            fp = footprint(self.engine)
        finally:
            self.engine.close()
        return ReplayResult(self.strategy.name, len(self.trace.events), self.substrate_ms, self.model_ms,
                            self.diffs, dict(self.counters), fp, time.perf_counter() - t0, self.branches)

    def compare_all(self) -> None:
        assert self.oracle is not None
        for label, b in self.branches.items():
            if b.status is BranchStatus.DISCARDED:
                continue
            d = diff(self.engine.state(b), self.oracle.state(label))
            if d:
                self.diffs.append(f"{label}: {d.summary(3)}")

    def _branch(self, label: str) -> Branch:
        try:
            return self.branches[label]
        except KeyError:
            raise TraceError(f"unknown branch {label}") from None

    def apply(self, ev: TraceEvent) -> None:
        a, e, o, c = ev.args, self.engine, self.oracle, self.cost
        act = ev.action
        if act == "model_call":
            self.model_ms += float(a.get("latency_ms", c.model_call))
            return
        b = self._branch(a["branch"])
        procs = len(b.group.records)
        if act == "write":
            data = bytes.fromhex(a["data"])
            broke = e.write_page(b, a["pid"], a["vma"], a["slot"], data, a.get("offset", 0))
            if broke:
                self.counters["cow_breaks"] += 1
                self.substrate_ms += c.page_copy
            if o is not None:
                o.write_page(a["branch"], a["pid"], a["vma"], a["slot"], data, a.get("offset", 0))
        elif act == "fs_read":
            before = b.fs.counters["probes"]
            got = e.fs_read(b, a["path"], a["index"])
            probes = b.fs.counters["probes"] - before
            self.counters["probes"] += probes
            self.substrate_ms += c.probe * probes
            if o is not None and got != o.fs_read(a["branch"], a["path"], a["index"]):
                self.diffs.append(f"step {ev.step}: fs_read mismatch on {a['branch']}")
        elif act == "fs_write":
            data = bytes.fromhex(a["data"])
            e.fs_write(b, a["path"], a["index"], data, a.get("offset", 0))
            if o is not None:
                o.fs_write(a["branch"], a["path"], a["index"], data, a.get("offset", 0))
        elif act == "gui_write":
            data = bytes.fromhex(a["data"])
            e.gui_write(b, a["buffer"], a["page"], data, a.get("offset", 0))
            if o is not None:
                o.gui_write(a["branch"], a["buffer"], a["page"], data, a.get("offset", 0))
        elif act == "send":
            data = bytes.fromhex(a["data"])
            e.send(b, a["conn"], data, from_local=a.get("from_local", True))
            if o is not None:
                o.send(a["branch"], a["conn"], data, a.get("from_local", True))
        elif act == "record":
            vid = e.record_version(b)
            self.versions[a["version"]] = vid
            node = e.version(vid)
            self.substrate_ms += c.freeze_per_process * procs
            if self.strategy.async_dump:
                self.substrate_ms += c.holder_per_process * procs
            else:
                node.checkpoint.wait(600)
                self.substrate_ms += c.page_dump * node.checkpoint.page_records
            if o is not None:
                o.record(a["branch"], a["version"])
        elif act == "fork":
            res = clone(e, b, int(a["n"]), self.strategy, c)
            self.versions[a["version"]] = res.version_id
            kids = a.get("children") or [f"{a['version']}.{i}" for i in range(len(res.branches))]
            for label, br in zip(kids, res.branches):
                self.branches[label] = br
            self.substrate_ms += res.report.critical_path
            self.counters["forks"] += 1
            if o is not None:
                o.record(a["branch"], a["version"])
                o.fork(a["version"], list(kids))
        elif act == "rollback":
            vid = self.versions[a["version"]]
            e.rollback(b, vid)
            self.counters["rollbacks"] += 1
            pages = sum(1 for k in e.flatten(e.version(vid).checkpoint.image_id) if k[0] != 0)
            self.substrate_ms += c.namespace_setup + c.restore_per_process * procs + c.page_copy * pages
            if o is not None:
                o.rollback(a["branch"], a["version"])
        elif act == "discard":
            e.discard(b)
            if o is not None:
                o.discard(a["branch"])
        elif act == "promote":
            e.commit_promote(b)
        elif act == "external":
            e.external_attempt(b, a["action"])
        else:
            raise TraceError(f"unknown action {act}")


def replay(trace: Trace, strategy: CloneStrategy = TCLONE, *, cost: CostModel | None = None,
           verify: bool = False, state: WorkspaceState | None = None) -> ReplayResult:
    return Replayer(trace, strategy, cost, verify, state).run()


def iter_random_traces(count: int, max_len: int, seed: int) -> Iterator[Trace]:
    for i, n in enumerate(trace_lengths(count, max_len, seed)):
        yield random_trace(n, seed * 100003 + i)


def event_counts(events: Iterable[TraceEvent]) -> dict[str, int]:
    out: dict[str, int] = {}
    for ev in events:
        out[ev.action] = out.get(ev.action, 0) + 1
    return out
