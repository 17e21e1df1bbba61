"""Modeled workspace state: value types, a deterministic generator, a validator
and the structural differ every other module uses as its correctness oracle.

A :class:`WorkspaceState` is an immutable value. Page contents are carried as
``bytes`` objects (or ``None`` for never-touched slots); identical contents are
frequently the *same* object, so comparing two large states is cheap.
"""

from __future__ import annotations

import enum
import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

PAGE_SIZE = 4096
LOOPBACK_PREFIX = "127."


class MemoryClass(str, enum.Enum):
    ANONYMOUS = "anonymous"
    FILE_BACKED = "file_backed"
    SHARED = "shared"


class ConnKind(str, enum.Enum):
    INTERNAL = "internal"
    EXTERNAL = "external"


class WorkspaceError(ValueError):
    """Raised for malformed workspace specs or states."""


class Descriptor(NamedTuple):
    fd: int
    target: str  # "tty:0", "file:/path", "conn:<id>", "pipe:<n>"


@dataclass(frozen=True)
class ProcessRecord:
    host_pid: int
    local_pid: int
    parent_local_pid: int | None
    descriptors: tuple[Descriptor, ...] = ()
    register_state: bytes = b""
    tls_state: bytes = b""
    signal_state: bytes = b""
    futex_state: bytes = b""
    threads: tuple[int, ...] = ()

    def with_host_pid(self, host_pid: int) -> ProcessRecord:
        return ProcessRecord(
            host_pid,
            self.local_pid,
            self.parent_local_pid,
            self.descriptors,
            self.register_state,
            self.tls_state,
            self.signal_state,
            self.futex_state,
            self.threads,
        )


@dataclass(frozen=True)
class MemoryRegion:
    vma_id: int
    local_pid: int
    mem_class: MemoryClass
    start: int  # byte offset, page aligned
    length: int  # pages
    backing_file: str | None = None
    pages: tuple[bytes | None, ...] = field(default=(), repr=False)

    @property
    def key(self) -> tuple[int, int]:
        return (self.local_pid, self.vma_id)


class Endpoint(NamedTuple):
    addr: str
    port: int
    local_pid: int | None = None


@dataclass(frozen=True)
class Connection:
    conn_id: str
    kind: ConnKind
    local: Endpoint
    remote: Endpoint
    proto_state: bytes = b""


@dataclass(frozen=True)
class GuiBuffer:
    buffer_id: str
    size: int
    contents: tuple[bytes, ...] = field(repr=False)
    mutation_rate_hint: float = 0.0
    # display-session identity; excluded from state equality like host pids
    session: int = 0


@dataclass(frozen=True)
class FsImage:
    """Materialized file contents of one filesystem view."""

    view_id: int
    files: Mapping[str, tuple[bytes, ...]] = field(repr=False)

    def __repr__(self) -> str:
        return f"FsImage(view_id={self.view_id}, files={len(self.files)})"


@dataclass(frozen=True)
class WorkspaceState:
    processes: tuple[ProcessRecord, ...]
    regions: tuple[MemoryRegion, ...]
    fs: FsImage
    connections: tuple[Connection, ...] = ()
    gui_buffers: tuple[GuiBuffer, ...] = ()
    namespace_id: str = ""

    def __repr__(self) -> str:
        pages = sum(r.length for r in self.regions)
        return (f"WorkspaceState(processes={len(self.processes)}, regions={len(self.regions)}, pages={pages}, "
                f"files={len(self.fs.files)}, connections={len(self.connections)}, "
                f"gui_buffers={len(self.gui_buffers)}, namespace_id={self.namespace_id!r})")

    def process(self, local_pid: int) -> ProcessRecord:
        for p in self.processes:
            if p.local_pid == local_pid:
                return p
        raise KeyError(local_pid)

    def region(self, local_pid: int, vma_id: int) -> MemoryRegion:
        for r in self.regions:
            if r.local_pid == local_pid and r.vma_id == vma_id:
                return r
        raise KeyError((local_pid, vma_id))

    @property
    def page_count(self) -> int:
        return sum(1 for r in self.regions for p in r.pages if p is not None)


# ---------------------------------------------------------------------------
# Workload specs
# ---------------------------------------------------------------------------


@dataclass
class WorkspaceSpec:
    processes: int
    tree_seed: int = 0
    anon_pages: int = 0
    vmas_per_process: int = 4
    shared_pages: int = 0
    file_manifest: list[dict[str, Any]] = field(default_factory=list)
    file_maps: int = 0
    conn_mix: dict[str, int] = field(default_factory=dict)
    gui_buffers: list[int] = field(default_factory=list)
    touched_fraction: float = 1.0

    @classmethod
    def from_json(cls, doc: str | Mapping[str, Any]) -> WorkspaceSpec:
        data = json.loads(doc) if isinstance(doc, str) else dict(doc)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise WorkspaceError(f"unknown workspace spec fields: {sorted(unknown)}")
        if "processes" not in data:
            raise WorkspaceError("workspace spec requires 'processes'")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> WorkspaceSpec:
        return cls.from_json(Path(path).read_text())

    def to_json(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


CHROMIUM_SPEC = WorkspaceSpec(
    processes=168,
    tree_seed=7,
    anon_pages=(2 << 30) // PAGE_SIZE,
    vmas_per_process=4,
    file_manifest=[{"path": f"/usr/lib/chromium/lib{i}.so", "size": 64 * PAGE_SIZE} for i in range(8)],
    file_maps=8,
    conn_mix={"internal": 6, "external": 4},
    gui_buffers=[1920 * 1080 * 4 // PAGE_SIZE * PAGE_SIZE],
)


def chromium_spec(**overrides: Any) -> WorkspaceSpec:
    """The 168-process, ~2 GB workspace used by the ablation and zero-copy checks."""
    data = CHROMIUM_SPEC.to_json()
    data.update(overrides)
    return WorkspaceSpec(**data)


def load_file_manifest(source: str | Path | Sequence[Mapping[str, Any]]) -> list[dict[str, Any]]:
    if isinstance(source, (str, Path)):
        entries = json.loads(Path(source).read_text())
    else:
        entries = list(source)
    out = []
    for e in entries:
        if "path" not in e or "size" not in e:
            raise WorkspaceError(f"manifest entry needs path and size: {e!r}")
        out.append({"path": str(e["path"]), "size": int(e["size"])})
    return out


@functools.lru_cache(maxsize=16)
def page_pool(seed: int, size: int = 256) -> tuple[bytes, ...]:
    """Distinct deterministic page contents; generated pages reference these."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    raw = rng.integers(0, 256, size=(size, PAGE_SIZE), dtype=np.uint8)
    return tuple(row.tobytes() for row in raw)


def _split(total: int, parts: int, rng: np.random.Generator) -> list[int]:
    if parts <= 0:
        return []
    if total == 0:
        return [0] * parts
    weights = rng.uniform(0.5, 1.5, size=parts)
    raw = np.floor(weights / weights.sum() * total).astype(np.int64)
    raw[: total - int(raw.sum())] += 1
    return [int(x) for x in raw]


def build_workspace(spec: WorkspaceSpec) -> WorkspaceState:
    """Generate a valid workspace; the same spec always yields an equal state."""
    if spec.processes < 1:
        raise WorkspaceError("a workspace needs at least one process")
    for size in spec.gui_buffers:
        if size <= 0 or size % PAGE_SIZE:
            raise WorkspaceError(f"gui buffer size {size} is not page aligned")
    manifest = load_file_manifest(spec.file_manifest)
    for entry in manifest:
        if entry["size"] % PAGE_SIZE:
            raise WorkspaceError(f"file {entry['path']} size {entry['size']} is not page aligned")
    if spec.anon_pages < 0 or spec.shared_pages < 0:
        raise WorkspaceError("page counts must be non-negative")

    rng = np.random.default_rng(spec.tree_seed)
    pool = page_pool(spec.tree_seed)
    n = spec.processes

    parents: list[int | None] = [None]
    for i in range(1, n):
        parents.append(int(rng.integers(0, i)) + 1)

    files: dict[str, tuple[bytes, ...]] = {}
    for entry in manifest:
        npages = entry["size"] // PAGE_SIZE
        idx = rng.integers(0, len(pool), size=npages)
        files[entry["path"]] = tuple(pool[i] for i in idx)
    paths = sorted(files)

    regions: list[MemoryRegion] = []
    next_vma: dict[int, int] = {}
    next_addr: dict[int, int] = {}

    def add_region(pid: int, cls: MemoryClass, length: int, pages: tuple, backing: str | None = None) -> None:
        vma = next_vma.get(pid, 1)
        start = next_addr.get(pid, 0x400000)
        regions.append(MemoryRegion(vma, pid, cls, start, length, backing, pages))
        next_vma[pid] = vma + 1
        next_addr[pid] = start + (length + 16) * PAGE_SIZE

    per_proc = _split(spec.anon_pages, n, rng)
    for i, total in enumerate(per_proc):
        pid = i + 1
        for length in _split(total, spec.vmas_per_process, rng) if total else []:
            idx = rng.integers(0, len(pool), size=length)
            if spec.touched_fraction >= 1.0:
                pages = tuple(pool[j] for j in idx)
            else:
                mask = rng.random(length) < spec.touched_fraction
                pages = tuple(pool[j] if m else None for j, m in zip(idx, mask))
            add_region(pid, MemoryClass.ANONYMOUS, length, pages)

    if spec.shared_pages:
        holders = sorted({int(rng.integers(0, n)) + 1 for _ in range(min(n, 2))})
        for pid, length in zip(holders, _split(spec.shared_pages, len(holders), rng)):
            idx = rng.integers(0, len(pool), size=length)
            add_region(pid, MemoryClass.SHARED, length, tuple(pool[j] for j in idx))

    if spec.file_maps and paths:
        for k in range(spec.file_maps):
            pid = int(rng.integers(0, n)) + 1
            path = paths[k % len(paths)]
            length = len(files[path])
            if length == 0:
                continue
            add_region(pid, MemoryClass.FILE_BACKED, length, (None,) * length, path)

    conns: list[Connection] = []
    conn_fds: dict[int, list[str]] = {}
    mix = dict(spec.conn_mix)
    for k in range(int(mix.get("internal", 0))):
        a = int(rng.integers(0, n)) + 1
        b = int(rng.integers(0, n)) + 1
        port = 20000 + k
        state = _initial_tcp_state(rng)
        cid = f"int{k}"
        conns.append(
            Connection(
                cid,
                ConnKind.INTERNAL,
                Endpoint("127.0.0.1", 40000 + k, a),
                Endpoint("127.0.0.1", port, b),
                state,
            )
        )
        conn_fds.setdefault(a, []).append(cid)
        if b != a:
            conn_fds.setdefault(b, []).append(cid)
    for k in range(int(mix.get("external", 0))):
        a = int(rng.integers(0, n)) + 1
        cid = f"ext{k}"
        conns.append(
            Connection(
                cid,
                ConnKind.EXTERNAL,
                Endpoint("10.0.2.15", 50000 + k, a),
                Endpoint(f"93.184.216.{k % 250 + 1}", 443, None),
                _initial_tcp_state(rng),
            )
        )
        conn_fds.setdefault(a, []).append(cid)

    procs = []
    for i in range(n):
        pid = i + 1
        descs = [Descriptor(0, "tty:0"), Descriptor(1, "tty:0"), Descriptor(2, "tty:0")]
        fd = 3
        if paths:
            for j in rng.choice(len(paths), size=min(2, len(paths)), replace=False):
                descs.append(Descriptor(fd, f"file:{paths[int(j)]}"))
                fd += 1
        for cid in conn_fds.get(pid, []):
            descs.append(Descriptor(fd, f"conn:{cid}"))
            fd += 1
        nthreads = int(rng.integers(1, 5))
        procs.append(
            ProcessRecord(
                host_pid=100000 + pid,
                local_pid=pid,
                parent_local_pid=parents[i],
                descriptors=tuple(descs),
                register_state=rng.bytes(64),
                tls_state=rng.bytes(16),
                signal_state=rng.bytes(8),
                futex_state=rng.bytes(8),
                threads=tuple(pid * 1000 + t for t in range(nthreads)),
            )
        )

    gui = []
    for k, size in enumerate(spec.gui_buffers):
        npages = size // PAGE_SIZE
        idx = rng.integers(0, len(pool), size=npages)
        gui.append(GuiBuffer(f"gui{k}", size, tuple(pool[j] for j in idx), mutation_rate_hint=60.0))

    return WorkspaceState(
        processes=tuple(procs),
        regions=tuple(regions),
        fs=FsImage(0, files),
        connections=tuple(conns),
        gui_buffers=tuple(gui),
        namespace_id=f"ns-seed{spec.tree_seed}",
    )


def _initial_tcp_state(rng: np.random.Generator) -> bytes:
    # avoid importing iostate here; the layout is owned by iostate.TcpState
    from .iostate import TcpState

    a = int(rng.integers(0, 2**31))
    b = int(rng.integers(0, 2**31))
    return TcpState(a, b, b, a).to_blob()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def resolves_inside(ep: Endpoint, local_pids: set[int] | frozenset[int]) -> bool:
    return ep.addr.startswith(LOOPBACK_PREFIX) and ep.local_pid is not None and ep.local_pid in local_pids


def validate(state: WorkspaceState, *, live_host_pids: Iterable[int] = ()) -> list[str]:
    """Return a list of invariant violations (empty when the state is valid)."""
    problems: list[str] = []
    pids = [p.local_pid for p in state.processes]
    pid_set = set(pids)
    if len(pid_set) != len(pids):
        problems.append("duplicate local pids")
    hosts = [p.host_pid for p in state.processes]
    if len(set(hosts)) != len(hosts):
        problems.append("duplicate host pids")
    clash = set(hosts) & set(live_host_pids)
    if clash:
        problems.append(f"host pids shared with other workspaces: {sorted(clash)[:5]}")

    roots = [p for p in state.processes if p.parent_local_pid is None]
    if len(roots) != 1:
        problems.append(f"expected exactly one root process, found {len(roots)}")
    parent_of = {p.local_pid: p.parent_local_pid for p in state.processes}
    for p in state.processes:
        if p.parent_local_pid is not None and p.parent_local_pid not in pid_set:
            problems.append(f"process {p.local_pid} has unknown parent {p.parent_local_pid}")
    # every process must reach the root without cycles
    for pid in pids:
        seen = set()
        cur: int | None = pid
        while cur is not None and cur not in seen:
            seen.add(cur)
            cur = parent_of.get(cur)
        if cur is not None:
            problems.append(f"cycle in process tree at {pid}")
            break

    seen_vmas = set()
    for r in state.regions:
        if r.local_pid not in pid_set:
            problems.append(f"region {r.key} belongs to no process")
        if r.key in seen_vmas:
            problems.append(f"duplicate region {r.key}")
        seen_vmas.add(r.key)
        if not isinstance(r.mem_class, MemoryClass):
            problems.append(f"region {r.key} has no memory class")
        if (r.mem_class is MemoryClass.FILE_BACKED) != (r.backing_file is not None):
            problems.append(f"region {r.key}: backing file iff file-backed violated")
        if r.start % PAGE_SIZE:
            problems.append(f"region {r.key} start not page aligned")
        if len(r.pages) != r.length:
            problems.append(f"region {r.key}: {len(r.pages)} slots for length {r.length}")
        if r.backing_file is not None and r.backing_file not in state.fs.files:
            problems.append(f"region {r.key} maps missing file {r.backing_file}")
        for p in r.pages:
            if p is not None and len(p) != PAGE_SIZE:
                problems.append(f"region {r.key} holds a short page")
                break

    for c in state.connections:
        internal = resolves_inside(c.local, pid_set) and resolves_inside(c.remote, pid_set)
        if internal != (c.kind is ConnKind.INTERNAL):
            problems.append(f"connection {c.conn_id} kind {c.kind.value} disagrees with its endpoints")

    for g in state.gui_buffers:
        if g.size != len(g.contents) * PAGE_SIZE:
            problems.append(f"gui buffer {g.buffer_id} size mismatch")
    for path, pages in state.fs.files.items():
        if any(len(p) != PAGE_SIZE for p in pages):
            problems.append(f"file {path} holds a short page")
    return problems


def check(state: WorkspaceState) -> WorkspaceState:
    problems = validate(state)
    if problems:
        raise WorkspaceError("; ".join(problems))
    return state


# ---------------------------------------------------------------------------
# Differ
# ---------------------------------------------------------------------------


class DiffEntry(NamedTuple):
    kind: str  # process | region | page | file | connection | gui
    key: tuple
    detail: str


@dataclass(frozen=True)
class DiffReport:
    entries: tuple[DiffEntry, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[DiffEntry]:
        return iter(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def of_kind(self, *kinds: str) -> list[DiffEntry]:
        return [e for e in self.entries if e.kind in kinds]

    def without(self, *kinds: str) -> DiffReport:
        return DiffReport(tuple(e for e in self.entries if e.kind not in kinds))

    def locations(self) -> set[tuple[str, tuple]]:
        return {(e.kind, e.key) for e in self.entries}

    def summary(self, limit: int = 10) -> str:
        head = "; ".join(f"{e.kind}{e.key}: {e.detail}" for e in self.entries[:limit])
        more = len(self.entries) - limit
        return head + (f" (+{more} more)" if more > 0 else "")


def _byte_range(a: bytes, b: bytes) -> tuple[int, int]:
    x = np.frombuffer(a, dtype=np.uint8)
    y = np.frombuffer(b, dtype=np.uint8)
    if len(x) != len(y):
        return (0, max(len(x), len(y)))
    where = np.flatnonzero(x != y)
    return (int(where[0]), int(where[-1]) + 1)


def _diff_pages(pa: Sequence, pb: Sequence) -> Iterator[int]:
    if pa == pb:
        return
    for i in range(max(len(pa), len(pb))):
        x = pa[i] if i < len(pa) else None
        y = pb[i] if i < len(pb) else None
        if x is y:
            continue
        if x != y:
            yield i


def diff(a: WorkspaceState, b: WorkspaceState) -> DiffReport:
    """List every observable divergence between two states.

    Host pids, namespace ids, filesystem view ids and GUI display sessions
    are identity, not state, and never produce entries.
    """
    out: list[DiffEntry] = []

    procs_a = {p.local_pid: p for p in a.processes}
    procs_b = {p.local_pid: p for p in b.processes}
    for pid in sorted(procs_a.keys() | procs_b.keys()):
        x, y = procs_a.get(pid), procs_b.get(pid)
        if x is None or y is None:
            out.append(DiffEntry("process", (pid,), "missing on one side"))
            continue
        for name in ("parent_local_pid", "descriptors", "register_state", "tls_state",
                     "signal_state", "futex_state", "threads"):
            if getattr(x, name) != getattr(y, name):
                out.append(DiffEntry("process", (pid,), name))

    regs_a = {r.key: r for r in a.regions}
    regs_b = {r.key: r for r in b.regions}
    for key in sorted(regs_a.keys() | regs_b.keys()):
        x, y = regs_a.get(key), regs_b.get(key)
        if x is None or y is None:
            out.append(DiffEntry("region", key, "missing on one side"))
            continue
        for name in ("mem_class", "start", "length", "backing_file"):
            if getattr(x, name) != getattr(y, name):
                out.append(DiffEntry("region", key, name))
        for slot in _diff_pages(x.pages, y.pages):
            out.append(DiffEntry("page", key + (slot,), "content"))

    files_a, files_b = a.fs.files, b.fs.files
    for path in sorted(files_a.keys() | files_b.keys()):
        x, y = files_a.get(path), files_b.get(path)
        if x is None or y is None:
            out.append(DiffEntry("file", (path,), "missing on one side"))
            continue
        for idx in _diff_pages(x, y):
            px = x[idx] if idx < len(x) else b""
            py = y[idx] if idx < len(y) else b""
            lo, hi = _byte_range(px or b"", py or b"")
            base = idx * PAGE_SIZE
            out.append(DiffEntry("file", (path, base + lo, base + hi), "bytes"))

    conns_a = {c.conn_id: c for c in a.connections}
    conns_b = {c.conn_id: c for c in b.connections}
    for cid in sorted(conns_a.keys() | conns_b.keys()):
        x, y = conns_a.get(cid), conns_b.get(cid)
        if x is None or y is None:
            kind = (x or y).kind.value
            out.append(DiffEntry("connection", (cid,), f"{kind} connection missing on one side"))
        elif x != y:
            out.append(DiffEntry("connection", (cid,), "state"))

    gui_a = {g.buffer_id: g for g in a.gui_buffers}
    gui_b = {g.buffer_id: g for g in b.gui_buffers}
    for gid in sorted(gui_a.keys() | gui_b.keys()):
        x, y = gui_a.get(gid), gui_b.get(gid)
        if x is None or y is None:
            out.append(DiffEntry("gui", (gid,), "missing on one side"))
            continue
        if x.size != y.size or x.mutation_rate_hint != y.mutation_rate_hint:
            out.append(DiffEntry("gui", (gid,), "geometry"))
        for idx in _diff_pages(x.contents, y.contents):
            out.append(DiffEntry("gui", (gid, idx), "content"))

    return DiffReport(tuple(out))
