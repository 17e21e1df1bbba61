"""Freeze, freeze-interval metadata capture and process-tree reconstruction into
fresh sibling namespaces."""

from __future__ import annotations

import itertools
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .workspace import Descriptor, ProcessRecord


class ProcessError(RuntimeError):
    pass


class FreezeError(ProcessError):
    pass


class NamespaceError(ProcessError):
    pass


class HostPidAllocator:
    """Engine-wide host pid source; pids are unique across all live workspaces."""

    def __init__(self, start: int = 200000) -> None:
        self._next = itertools.count(start)
        self._live: set[int] = set()
        self._lock = threading.Lock()

    def allocate(self) -> int:
        with self._lock:
            pid = next(self._next)
            self._live.add(pid)
            return pid

    def register(self, pid: int) -> None:
        with self._lock:
            if pid in self._live:
                raise ProcessError(f"host pid {pid} already live")
            self._live.add(pid)

    def release(self, pids: Iterable[int]) -> None:
        with self._lock:
            self._live.difference_update(pids)

    @property
    def live(self) -> frozenset[int]:
        with self._lock:
            return frozenset(self._live)


class Namespace:
    """A pid namespace. A fresh namespace has never had processes created in it."""

    _ids = itertools.count(1)
    _lock = threading.Lock()

    def __init__(self) -> None:
        with Namespace._lock:
            self.ns_id = f"pidns-{next(Namespace._ids)}"
        self.local_pids: set[int] = set()
        self.used = False

    @property
    def fresh(self) -> bool:
        return not self.used


@dataclass(frozen=True)
class ProcHandle:
    """Stable reference to one frozen source process.

    The token is engine-wide and does not encode the namespace-local pid, so
    it stays resolvable from code running in a different namespace.
    """

    token: int


class HandleTable:
    _tokens = itertools.count(1 << 20)

    def __init__(self) -> None:
        self._targets: dict[int, ProcessRecord] = {}
        self._lock = threading.Lock()

    def open(self, record: ProcessRecord) -> ProcHandle:
        with self._lock:
            token = next(HandleTable._tokens)
            self._targets[token] = record
            return ProcHandle(token)

    def resolve(self, handle: ProcHandle) -> ProcessRecord:
        with self._lock:
            try:
                return self._targets[handle.token]
            except KeyError:
                raise ProcessError(f"stale process handle {handle.token}") from None

    def close(self, handles: Iterable[ProcHandle]) -> None:
        with self._lock:
            for h in handles:
                self._targets.pop(h.token, None)


@dataclass
class ProcessGroup:
    """Live process set of one branch."""

    namespace: Namespace
    records: dict[int, ProcessRecord]
    vma_counts: dict[int, int] = field(default_factory=dict)
    frozen: bool = False
    counters: Counter[str] = field(default_factory=Counter)

    @property
    def host_pids(self) -> list[int]:
        return [r.host_pid for r in self.records.values()]


@dataclass(frozen=True)
class FrozenMeta:
    tree: tuple[ProcessRecord, ...]
    namespaces: frozenset[str]
    frozen_at: float
    proc_handles: tuple[ProcHandle, ...]
    work: Mapping[str, int]


def freeze(group: ProcessGroup, handles: HandleTable) -> FrozenMeta:
    """Stop the group and record what is needed to rebuild it.

    Work is tallied per process, descriptor, thread and VMA; nothing here
    touches page contents.
    """
    if group.frozen:
        raise FreezeError(f"{group.namespace.ns_id} is already frozen")
    group.frozen = True
    work: Counter[str] = Counter()
    tree = []
    proc_handles = []
    for pid in sorted(group.records):
        rec = group.records[pid]
        tree.append(rec)
        proc_handles.append(handles.open(rec))
        work["processes"] += 1
        work["descriptors"] += len(rec.descriptors)
        work["threads"] += len(rec.threads)
        work["vmas"] += group.vma_counts.get(pid, 0)
    work["page_content_ops"] += 0
    group.counters.update(work)
    return FrozenMeta(tuple(tree), frozenset({group.namespace.ns_id}), time.time(),
                      tuple(proc_handles), dict(work))


def resume(group: ProcessGroup) -> None:
    if not group.frozen:
        raise FreezeError(f"{group.namespace.ns_id} was never frozen")
    group.frozen = False


@dataclass(frozen=True)
class PlanEntry:
    local_pid: int
    parent_local_pid: int | None
    descriptors: tuple[Descriptor, ...]
    register_state: bytes
    tls_state: bytes
    signal_state: bytes
    futex_state: bytes
    threads: tuple[int, ...]

    @classmethod
    def of(cls, r: ProcessRecord) -> PlanEntry:
        return cls(r.local_pid, r.parent_local_pid, r.descriptors, r.register_state, r.tls_state,
                   r.signal_state, r.futex_state, r.threads)

    def record(self, host_pid: int) -> ProcessRecord:
        return ProcessRecord(host_pid, self.local_pid, self.parent_local_pid, self.descriptors,
                             self.register_state, self.tls_state, self.signal_state,
                             self.futex_state, self.threads)


@dataclass(frozen=True)
class ProcessTreeImage:
    """Creation plan, parents before children."""

    plan: tuple[PlanEntry, ...]

    VERSION = 1

    def to_bytes(self) -> bytes:
        out = [struct.pack("<II", self.VERSION, len(self.plan))]
        for e in self.plan:
            out.append(struct.pack("<Ii", e.local_pid, -1 if e.parent_local_pid is None else e.parent_local_pid))
            out.append(struct.pack("<I", len(e.descriptors)))
            for d in e.descriptors:
                t = d.target.encode()
                out.append(struct.pack("<iI", d.fd, len(t)) + t)
            for blob in (e.register_state, e.tls_state, e.signal_state, e.futex_state):
                out.append(struct.pack("<I", len(blob)) + blob)
            out.append(struct.pack("<I", len(e.threads)))
            out.append(struct.pack(f"<{len(e.threads)}Q", *e.threads))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> ProcessTreeImage:
        off = 0

        def take(fmt: str) -> tuple:
            nonlocal off
            vals = struct.unpack_from(fmt, raw, off)
            off += struct.calcsize(fmt)
            return vals

        def blob() -> bytes:
            nonlocal off
            (n,) = take("<I")
            b = raw[off:off + n]
            off += n
            return b

        version, count = take("<II")
        if version != cls.VERSION:
            raise ProcessError(f"unsupported process image version {version}")
        plan = []
        for _ in range(count):
            pid, parent = take("<Ii")
            (nd,) = take("<I")
            descs = []
            for _ in range(nd):
                fd, n = take("<iI")
                descs.append(Descriptor(fd, raw[off:off + n].decode()))
                off += n
            regs, tls, sig, futex = blob(), blob(), blob(), blob()
            (nt,) = take("<I")
            threads = take(f"<{nt}Q")
            plan.append(PlanEntry(pid, None if parent < 0 else parent, tuple(descs), regs, tls, sig,
                                  futex, tuple(threads)))
        return cls(tuple(plan))


def preorder(records: Iterable[PlanEntry]) -> list[PlanEntry]:
    entries = {e.local_pid: e for e in records}
    children: dict[int | None, list[int]] = {}
    for e in entries.values():
        children.setdefault(e.parent_local_pid, []).append(e.local_pid)
    roots = sorted(children.get(None, []))
    order = []
    stack = list(reversed(roots))
    while stack:
        pid = stack.pop()
        order.append(entries[pid])
        stack.extend(sorted(children.get(pid, []), reverse=True))
    if len(order) != len(entries):
        raise ProcessError("process tree is disconnected or cyclic")
    return order


def capture_metadata(frozen: FrozenMeta) -> ProcessTreeImage:
    """Depth-first creation plan; siblings in ascending local pid."""
    return ProcessTreeImage(tuple(preorder(PlanEntry.of(r) for r in frozen.tree)))


def reconstruct_tree(image: ProcessTreeImage, dest: Namespace,
                     allocator: HostPidAllocator) -> dict[int, ProcessRecord]:
    """Replay the plan inside ``dest``: same local pids, fresh host pids."""
    if not dest.fresh:
        raise NamespaceError(f"{dest.ns_id} is not a fresh namespace")
    dest.used = True
    out: dict[int, ProcessRecord] = {}
    for e in image.plan:
        if e.local_pid in dest.local_pids:
            raise NamespaceError(f"local pid {e.local_pid} collides inside {dest.ns_id}")
        if e.parent_local_pid is not None and e.parent_local_pid not in out:
            raise ProcessError(f"plan creates {e.local_pid} before its parent")
        dest.local_pids.add(e.local_pid)
        out[e.local_pid] = e.record(allocator.allocate())
    return out


def plan_to_json(image: ProcessTreeImage) -> list[dict]:
    return [
        {
            "local_pid": e.local_pid,
            "parent": e.parent_local_pid,
            "descriptors": [[d.fd, d.target] for d in e.descriptors],
            "regs": e.register_state.hex(),
            "tls": e.tls_state.hex(),
            "signal": e.signal_state.hex(),
            "futex": e.futex_state.hex(),
            "threads": list(e.threads),
        }
        for e in image.plan
    ]


def plan_from_json(doc: list[dict]) -> ProcessTreeImage:
    return ProcessTreeImage(tuple(
        PlanEntry(d["local_pid"], d["parent"], tuple(Descriptor(fd, t) for fd, t in d["descriptors"]),
                  bytes.fromhex(d["regs"]), bytes.fromhex(d["tls"]), bytes.fromhex(d["signal"]),
                  bytes.fromhex(d["futex"]), tuple(d["threads"]))
        for d in doc
    ))
