"""Version tree and lifecycle: load, record, fork, rollback, discard, promote and
merge over the process, memory, filesystem and I/O subsystems."""

from __future__ import annotations

import enum
import itertools
import json
import threading
import time
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import filesystem as fsys
from .iostate import (
    AuditLog,
    ConnectionImage,
    EgressGate,
    EgressMode,
    NetNamespace,
    PolicyEvent,
    TcpState,
    rebuild_gui,
    restore_internal,
    sever_external,
)
from .memory import (
    GUI_PID,
    AddressSpace,
    CheckpointHandle,
    CheckpointState,
    DumpDaemon,
    ImageStorage,
    PageStore,
    PageTable,
    Vma,
    create_snapshot_holders,
    restore_memory,
)
from .process import (
    FrozenMeta,
    HandleTable,
    HostPidAllocator,
    Namespace,
    PlanEntry,
    ProcessGroup,
    ProcessTreeImage,
    capture_metadata,
    freeze,
    plan_from_json,
    plan_to_json,
    preorder,
    reconstruct_tree,
    resume,
)
from .security import AccessEvent, AccessKind, EnforcementLog, SecurityProfile, blocks, enforce, path_matches
from .workspace import (
    PAGE_SIZE,
    Connection,
    ConnKind,
    GuiBuffer,
    MemoryClass,
    MemoryRegion,
    WorkspaceState,
    check,
)


class EngineError(RuntimeError):
    pass


class BranchStateError(EngineError):
    pass


class UnknownVersion(EngineError, KeyError):
    pass


class BranchCapExceeded(EngineError):
    pass


class RollbackError(EngineError):
    pass


class AccessDenied(EngineError, PermissionError):
    pass


class MergeRejected(EngineError):
    pass


class NoCommonAncestor(EngineError):
    pass


class BranchStatus(str, enum.Enum):
    RUNNING = "running"
    FROZEN = "frozen"
    DISCARDED = "discarded"
    PROMOTED = "promoted"


@dataclass
class PinnedView:
    """A version's own references to its freeze-instant state."""

    tables: dict[tuple[int, int], PageTable]
    vma_meta: list[dict[str, Any]]
    plan: ProcessTreeImage
    conns: list[ConnectionImage]
    gui: list[GuiBuffer]


@dataclass
class VersionNode:
    version_id: str
    parent: str | None
    checkpoint: CheckpointHandle
    fs_version: fsys.FsVersion
    layer: fsys.PageCacheLayer
    created_at: float
    source_branch: str
    view: PinnedView


@dataclass(eq=False)
class Branch:
    branch_id: str
    profile: SecurityProfile | None
    group: ProcessGroup
    spaces: dict[int, AddressSpace]
    order: list[tuple[int, int]]
    fs: fsys.FsView
    netns: NetNamespace
    connections: dict[str, Connection]
    gui: list[list[bytes]]
    gui_meta: list[GuiBuffer]
    session: int
    gate: EgressGate
    node: VersionNode | None = None
    status: BranchStatus = BranchStatus.RUNNING
    dirty: set[tuple[int, int, int]] = field(default_factory=set)
    parent_image: str | None = None
    events: list[PolicyEvent] = field(default_factory=list)
    origin: str = "load"  # load | fork | rollback
    lock: threading.RLock = field(default_factory=threading.RLock)

    def vma(self, local_pid: int, vma_id: int) -> Vma:
        try:
            return self.spaces[local_pid].vmas[vma_id]
        except KeyError:
            raise EngineError(f"{self.branch_id}: no vma {vma_id} in process {local_pid}") from None

    @property
    def terminal(self) -> bool:
        return self.status in (BranchStatus.DISCARDED, BranchStatus.PROMOTED)


@dataclass
class RecordReport:
    version_id: str
    freeze_work: dict[str, int]
    holders: int
    freeze_copy_bytes: int
    freeze_page_allocs: int
    incremental: bool
    wall_s: float


@dataclass
class ForkReport:
    version_id: str
    n: int
    copy_bytes: int
    segment_copy_bytes: int
    gui_copy_bytes: int
    cache_copy_bytes: int
    vma_shares: int
    eager_pages: int
    severed: int
    restored_internal: int
    wall_s: float
    branch_wall_s: list[float]


@dataclass
class MergePolicy:
    sensitive: tuple[str, ...] = (
        "/home/user/.ssh/",
        "/home/user/.gnupg/",
        "/home/user/.config/credentials/",
        "/home/user/.aws/",
        "/etc/shadow",
    )

    def requires_approval(self, path: str) -> bool:
        return any(path_matches(p, path) for p in self.sensitive)


@dataclass
class MergeReport:
    designated: str
    base_version: str
    merged: list[str]
    conflicted: list[str]
    gated: list[str]
    pending: dict[str, tuple[bytes, ...]] = field(default_factory=dict)

    @property
    def clean(self) -> bool:
        return not self.conflicted and not self.gated


Approver = Callable[[str, str], bool]


@dataclass
class VersionTree:
    """Plain-data export of the version tree."""

    nodes: list[dict[str, Any]]
    edges: list[list[str]]
    branches: dict[str, dict[str, Any]]

    def to_json(self) -> dict[str, Any]:
        return {"nodes": self.nodes, "edges": self.edges, "branches": self.branches}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> VersionTree:
        tree = cls([dict(n) for n in doc["nodes"]], [list(e) for e in doc["edges"]],
                   {k: dict(v) for k, v in doc["branches"].items()})
        tree.check()
        return tree

    @classmethod
    def loads(cls, text: str) -> VersionTree:
        return cls.from_json(json.loads(text))

    def check(self) -> None:
        ids = {n["id"] for n in self.nodes}
        parents: dict[str, str | None] = {n["id"]: n["parent"] for n in self.nodes}
        for p, c in self.edges:
            if p not in ids or c not in ids or parents[c] != p:
                raise EngineError(f"bad edge {p}->{c}")
        for vid in ids:
            seen = set()
            cur: str | None = vid
            while cur is not None:
                if cur in seen:
                    raise EngineError("version tree has a cycle")
                seen.add(cur)
                cur = parents.get(cur)
        for bid, b in self.branches.items():
            if b["node"] is not None and b["node"] not in ids:
                raise EngineError(f"branch {bid} maps to unknown node {b['node']}")


def _gui_meta(buffers: Iterable[GuiBuffer]) -> list[GuiBuffer]:
    return [GuiBuffer(g.buffer_id, g.size, (), g.mutation_rate_hint, g.session) for g in buffers]


class Engine:
    def __init__(
        self,
        *,
        branch_cap: int = 64,
        storage: ImageStorage | None = None,
        egress: EgressMode = EgressMode.DELAYED_COMMIT,
        audit_path: str | Path | None = None,
        approver: Approver | None = None,
    ) -> None:
        self.store = PageStore()
        self.extents = fsys.ExtentStore()
        self.daemon = DumpDaemon(self.store, storage)
        self.pids = HostPidAllocator()
        self.handles = HandleTable()
        self.branch_cap = branch_cap
        self.egress = egress
        self.approver = approver
        self.policy_log = AuditLog(audit_path)
        self.access_log = EnforcementLog()
        self.fs_audit: list[fsys.AuditRecord] = []
        self.branches: dict[str, Branch] = {}
        self.versions: dict[str, VersionNode] = {}
        self.handles_by_image: dict[str, CheckpointHandle] = {}
        self.visible: str | None = None
        self.promotions: list[dict[str, Any]] = []
        self.counters: Counter[str] = Counter()
        self.last_record: RecordReport | None = None
        self.last_fork: ForkReport | None = None
        self._coord = threading.RLock()
        self._branch_ids = itertools.count(0)
        self._version_ids = itertools.count(1)
        self._sessions = itertools.count(1)
        self._flat_cache: OrderedDict[str, dict[tuple[int, int, int], bytes]] = OrderedDict()
        self._pool: ThreadPoolExecutor | None = None

    # -- helpers ----------------------------------------------------------

    def close(self) -> None:
        self.daemon.close()
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self) -> Engine:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    @property
    def storage(self) -> ImageStorage:
        return self.daemon.storage

    def live_branches(self) -> list[Branch]:
        return [b for b in self.branches.values() if b.status is not BranchStatus.DISCARDED]

    def _live_count(self) -> int:
        return sum(1 for b in self.branches.values() if not b.terminal)

    def branch(self, branch_id: str) -> Branch:
        return self.branches[branch_id]

    def version(self, version_id: str) -> VersionNode:
        try:
            return self.versions[version_id]
        except KeyError:
            raise UnknownVersion(version_id) from None

    def _require_running(self, b: Branch) -> None:
        if b.status is not BranchStatus.RUNNING:
            raise BranchStateError(f"{b.branch_id} is {b.status.value}")

    def _new_branch_id(self) -> str:
        return f"b{next(self._branch_ids)}"

    def _check_access(self, b: Branch, kind: AccessKind, target: str) -> None:
        if b.profile is None:
            return
        ev = AccessEvent(b.branch_id, kind, target, time.time(), "agent")
        if blocks(b.profile, enforce(b.profile, ev, self.access_log)):
            raise AccessDenied(f"{b.branch_id}: {kind.value} {target} denied by profile")

    def access(self, b: Branch, kind: AccessKind, target: str) -> None:
        """Check a generic access event (syscall, file or device) against the profile."""
        self._require_running(b)
        self._check_access(b, kind, target)

    # -- load -------------------------------------------------------------

    def load(self, state: WorkspaceState, profile: SecurityProfile | None = None) -> Branch:
        check(state)
        with self._coord:
            if self._live_count() + 1 > self.branch_cap:
                raise BranchCapExceeded(f"cap of {self.branch_cap} live branches reached")
            bid = self._new_branch_id()
        ns = Namespace()
        image = ProcessTreeImage(tuple(_plan_entries(state)))
        records = reconstruct_tree(image, ns, self.pids)
        spaces: dict[int, AddressSpace] = {pid: AddressSpace(pid, ns.ns_id) for pid in records}
        order = []
        for r in state.regions:
            table = self.store.adopt(r.pages)
            spaces[r.local_pid].vmas[r.vma_id] = Vma(r.vma_id, r.mem_class, r.start, r.length, table,
                                                     r.backing_file)
            order.append(r.key)
        group = ProcessGroup(ns, records, {pid: len(s.vmas) for pid, s in spaces.items()})
        fs = fsys.FsView.create(self.extents, state.fs.files)
        fs.audit = self.fs_audit
        netns = NetNamespace()
        conns: dict[str, Connection] = {}
        for c in state.connections:
            if c.kind is ConnKind.INTERNAL:
                restore_internal([ConnectionImage.capture(c)], netns, records)
            conns[c.conn_id] = c
        session = next(self._sessions)
        gui = [list(g.contents) for g in state.gui_buffers]
        b = Branch(bid, profile, group, spaces, order, fs, netns, conns, gui,
                   _gui_meta(state.gui_buffers), session,
                   EgressGate(bid, self.egress, self.policy_log, self.approver))
        with self._coord:
            self.branches[bid] = b
            if self.visible is None:
                self.visible = bid
        return b

    # -- observation ------------------------------------------------------

    def state(self, b: Branch) -> WorkspaceState:
        with b.lock:
            regions = []
            for pid, vid in b.order:
                v = b.spaces[pid].vmas[vid]
                regions.append(MemoryRegion(vid, pid, v.mem_class, v.start, v.length, v.backing_file,
                                            self.store.resolve(v.table)))
            gui = tuple(GuiBuffer(m.buffer_id, m.size, tuple(pages), m.mutation_rate_hint, b.session)
                        for m, pages in zip(b.gui_meta, b.gui))
            procs = tuple(b.group.records[pid] for pid in sorted(b.group.records))
            return WorkspaceState(procs, tuple(regions), b.fs.materialize(),
                                  tuple(b.connections.values()), gui, b.group.namespace.ns_id)

    def read_page(self, b: Branch, local_pid: int, vma_id: int, slot: int) -> bytes | None:
        return self.store.read(b.vma(local_pid, vma_id).table, slot)

    # -- mutation ---------------------------------------------------------

    def write_page(self, b: Branch, local_pid: int, vma_id: int, slot: int, data: bytes,
                   offset: int = 0) -> bool:
        """Returns True when the write broke copy-on-write."""
        with b.lock:
            self._require_running(b)
            v = b.vma(local_pid, vma_id)
            base = None
            if v.mem_class is MemoryClass.FILE_BACKED and self.store.read(v.table, slot) is None:
                base = fsys.fs_read(b.fs, v.backing_file, slot)
            v.table, broke = self.store.write(v.table, slot, data, offset, base)
            b.dirty.add((local_pid, vma_id, slot))
            return broke

    def gui_write(self, b: Branch, index: int, page: int, data: bytes, offset: int = 0) -> None:
        with b.lock:
            self._require_running(b)
            if offset < 0 or offset + len(data) > PAGE_SIZE:
                raise EngineError("gui write crosses the page boundary")
            old = b.gui[index][page]
            b.gui[index][page] = old[:offset] + data + old[offset + len(data):]
            b.dirty.add((GUI_PID, index, page))

    def fs_read(self, b: Branch, path: str, page_index: int) -> bytes:
        with b.lock:
            self._require_running(b)
            self._check_access(b, AccessKind.FILE, path)
            return fsys.fs_read(b.fs, path, page_index)

    def fs_write(self, b: Branch, path: str, page_index: int, data: bytes, offset: int = 0) -> None:
        with b.lock:
            self._require_running(b)
            self._check_access(b, AccessKind.FILE, path)
            fsys.fs_write(b.fs, path, page_index, data, offset)

    def send(self, b: Branch, conn_id: str, data: bytes, *, from_local: bool = True) -> None:
        with b.lock:
            self._require_running(b)
            conn = b.connections.get(conn_id)
            if conn is None:
                raise EngineError(f"{b.branch_id}: connection {conn_id} is closed")
            st = TcpState.from_blob(conn.proto_state).send(data, from_local=from_local)
            b.connections[conn_id] = Connection(conn.conn_id, conn.kind, conn.local, conn.remote, st.to_blob())

    def external_attempt(self, b: Branch, action: str) -> PolicyEvent:
        with b.lock:
            self._require_running(b)
            return b.gate.attempt(action)

    def release_outbox(self, b: Branch) -> list[PolicyEvent]:
        if b.status is not BranchStatus.PROMOTED:
            raise BranchStateError("external actions are released only from a promoted branch")
        return b.gate.release()

    # -- record -----------------------------------------------------------

    def record_version(self, b: Branch) -> str:
        t0 = time.perf_counter()
        with b.lock:
            if b.status is BranchStatus.FROZEN or b.group.frozen:
                raise BranchStateError(f"{b.branch_id} is already frozen")
            self._require_running(b)
            before = self.store.counters.copy()
            b.status = BranchStatus.FROZEN
            try:
                frozen = freeze(b.group, self.handles)
                for s in b.spaces.values():
                    s.frozen = True
                holders = create_snapshot_holders(self.store, b.spaces.values())
                view = self._pin(b, frozen)
                b.fs.frozen = True
                fs_version = fsys.snapshot_fs(b.fs)
                layer = fsys.seal_layer(b.fs)
                layer.refs += 1  # the version's own reference
                during = self.store.counters - before
                for s in b.spaces.values():
                    s.frozen = False
                b.fs.frozen = False
                resume(b.group)
                self.handles.close(frozen.proc_handles)
            finally:
                b.status = BranchStatus.RUNNING
                b.group.frozen = False

            parent_image = b.parent_image
            parent_handle = self.handles_by_image.get(parent_image) if parent_image else None
            if parent_handle is not None and parent_handle.state is CheckpointState.FAILED:
                parent_image = None
            with self._coord:
                vid = f"v{next(self._version_ids)}"
            meta = self._image_meta(vid, b, view, fs_version)
            handle = self.daemon.dump_async(holders, parent_image, meta,
                                            dirty=set(b.dirty) if parent_image else None,
                                            gui=[tuple(p) for p in b.gui])
            node = VersionNode(vid, b.node.version_id if b.node else None, handle, fs_version, layer,
                               time.time(), b.branch_id, view)
            with self._coord:
                self.versions[vid] = node
                self.handles_by_image[handle.image_id] = handle
            b.node = node
            b.dirty = set()
            b.parent_image = handle.image_id
            self.last_record = RecordReport(
                vid, dict(frozen.work), len(holders),
                during.get("copy_bytes", 0) + during.get("segment_copy_bytes", 0),
                during.get("allocated_pages", 0), parent_image is not None, time.perf_counter() - t0)
            return vid

    def _pin(self, b: Branch, frozen: FrozenMeta) -> PinnedView:
        tables = {}
        meta = []
        for pid, vid in b.order:
            v = b.spaces[pid].vmas[vid]
            tables[(pid, vid)] = self.store.share(v.table)
            meta.append(v.meta(pid))
        conns = [ConnectionImage.capture(c) for c in b.connections.values()]
        gui = [GuiBuffer(m.buffer_id, m.size, tuple(p), m.mutation_rate_hint, 0)
               for m, p in zip(b.gui_meta, b.gui)]
        return PinnedView(tables, meta, capture_metadata(frozen), conns, gui)

    def _image_meta(self, vid: str, b: Branch, view: PinnedView, fs_version: fsys.FsVersion) -> dict[str, Any]:
        return {
            "version": vid,
            "branch": b.branch_id,
            "processes": plan_to_json(view.plan),
            "vmas": view.vma_meta,
            "connections": [c.to_json() for c in view.conns],
            "gui": [{"id": g.buffer_id, "size": g.size, "hint": g.mutation_rate_hint} for g in view.gui],
            "fs_version": fs_version.version_id,
        }

    # -- fork -------------------------------------------------------------

    def fork(self, version_id: str, n: int = 1, profile: SecurityProfile | None = None, *,
             cow: bool = True, parallel: bool = True) -> list[Branch]:
        node = self.version(version_id)
        if n < 1:
            raise EngineError("fork needs n >= 1")
        t0 = time.perf_counter()
        with self._coord:
            if self._live_count() + n > self.branch_cap:
                raise BranchCapExceeded(f"forking {n} would exceed the cap of {self.branch_cap} branches")
            ids = [self._new_branch_id() for _ in range(n)]
            sessions = [next(self._sessions) for _ in range(n)]
        before = self.store.counters.copy()
        stats: list[Counter[str]] = [Counter() for _ in range(n)]
        walls = [0.0] * n

        def one(i: int) -> Branch:
            t = time.perf_counter()
            br = self._fork_one(node, ids[i], sessions[i], profile, cow, stats[i])
            walls[i] = time.perf_counter() - t
            return br

        if parallel and n > 1:
            with self._coord:
                if self._pool is None:
                    self._pool = ThreadPoolExecutor(max_workers=16, thread_name_prefix="fork")
            out = list(self._pool.map(one, range(n)))
        else:
            out = [one(i) for i in range(n)]
        with self._coord:
            for br in out:
                self.branches[br.branch_id] = br
        delta = self.store.counters - before
        total = sum(stats, Counter())
        self.last_fork = ForkReport(
            version_id, n, delta.get("copy_bytes", 0), delta.get("segment_copy_bytes", 0),
            total["gui_copy_bytes"], total["cache_copy_bytes"], delta.get("table_shares", 0),
            delta.get("eager_copied_pages", 0), total["severed"], total["restored"],
            time.perf_counter() - t0, walls)
        return out

    def _fork_one(self, node: VersionNode, bid: str, session: int, profile: SecurityProfile | None,
                  cow: bool, stats: Counter[str]) -> Branch:
        view = node.view
        ns = Namespace()
        records = reconstruct_tree(view.plan, ns, self.pids)
        spaces = {pid: AddressSpace(pid, ns.ns_id) for pid in records}
        order = []
        for m in view.vma_meta:
            key = (m["local_pid"], m["vma_id"])
            src = view.tables[key]
            cls = MemoryClass(m["class"])
            if cls is MemoryClass.SHARED:
                table = self.store.independent_copy(src)
            elif cow:
                table = self.store.share(src)
            else:
                table = self.store.eager_copy(src)
            spaces[key[0]].vmas[key[1]] = Vma(m["vma_id"], cls, m["start"], m["length"], table, m["backing_file"])
            order.append(key)
        group = ProcessGroup(ns, records, {pid: len(s.vmas) for pid, s in spaces.items()})
        if cow:
            fs = fsys.branch_view(node.fs_version, node.layer, self.fs_audit)
        else:
            fs, copied = fsys.eager_view(node.fs_version, node.layer)
            fs.audit = self.fs_audit
            stats["cache_copy_bytes"] += copied
        netns = NetNamespace()
        internal = [c for c in view.conns if c.kind is ConnKind.INTERNAL]
        restored = restore_internal(internal, netns, records)
        events = sever_external(view.conns, bid, self.egress, self.policy_log)
        stats["restored"] += len(restored)
        stats["severed"] += len(events)
        gui, copied = rebuild_gui(view.gui, session)
        stats["gui_copy_bytes"] += copied
        return Branch(bid, profile, group, spaces, order, fs, netns,
                      {c.conn_id: c for c in restored}, [list(g.contents) for g in gui], _gui_meta(gui),
                      session, EgressGate(bid, self.egress, self.policy_log, self.approver),
                      node=node, parent_image=node.checkpoint.image_id, events=events, origin="fork")

    # -- rollback ---------------------------------------------------------

    def lineage(self, b: Branch) -> list[str]:
        out = []
        cur = b.node
        while cur is not None:
            out.append(cur.version_id)
            cur = self.versions.get(cur.parent) if cur.parent else None
        return out

    def _wait_chain(self, handle: CheckpointHandle, timeout: float | None) -> None:
        cur: CheckpointHandle | None = handle
        while cur is not None:
            if cur.wait(timeout) is not CheckpointState.DURABLE:
                raise RollbackError(f"checkpoint {cur.image_id} failed: {cur.error}")
            cur = self.handles_by_image.get(cur.parent_image) if cur.parent_image else None

    def flatten(self, image_id: str) -> dict[tuple[int, int, int], bytes]:
        """Chain-resolved page map of an image (memoized per image)."""
        if image_id in self._flat_cache:
            self._flat_cache.move_to_end(image_id)
            return self._flat_cache[image_id]
        chain = []
        cur: str | None = image_id
        base: dict[tuple[int, int, int], bytes] = {}
        while cur is not None:
            if cur in self._flat_cache:
                base = self._flat_cache[cur]
                break
            img = self.storage.get(cur)
            chain.append(img)
            cur = img.parent_image
        flat = dict(base)
        for img in reversed(chain):
            for rec in img.pages:
                flat[(rec.local_pid, rec.vma_id, rec.slot)] = rec.content
        self._flat_cache[image_id] = flat
        while len(self._flat_cache) > 32:
            self._flat_cache.popitem(last=False)
        return flat

    def rollback(self, b: Branch, version_id: str, timeout: float | None = 60.0) -> None:
        node = self.version(version_id)
        with b.lock:
            self._require_running(b)
            if version_id not in self.lineage(b):
                raise RollbackError(f"{version_id} is not in the lineage of {b.branch_id}")
            handle = node.checkpoint
            self._wait_chain(handle, timeout)
            flat = self.flatten(handle.image_id)
            meta = self.storage.get(handle.image_id).meta

            old_tables = [v.table for s in b.spaces.values() for v in s.vmas.values()]
            vmas = restore_memory(self.store, flat, meta["vmas"])
            for t in old_tables:
                self.store.release(t)

            ns = Namespace()
            records = reconstruct_tree(plan_from_json(meta["processes"]), ns, self.pids)
            self.pids.release(b.group.host_pids)
            spaces = {pid: AddressSpace(pid, ns.ns_id) for pid in records}
            order = []
            for m in meta["vmas"]:
                key = (m["local_pid"], m["vma_id"])
                spaces[key[0]].vmas[key[1]] = vmas[key]
                order.append(key)

            b.netns.release()
            netns = NetNamespace()
            images = [ConnectionImage.from_json(c) for c in meta["connections"]]
            internal = restore_internal([c for c in images if c.kind is ConnKind.INTERNAL], netns, records)
            b.events.extend(sever_external(images, b.branch_id, self.egress, self.policy_log))

            gui = []
            gui_meta = []
            for idx, g in enumerate(meta["gui"]):
                pages = [flat[(GUI_PID, idx, s)] for s in range(g["size"] // PAGE_SIZE)]
                gui.append(pages)
                gui_meta.append(GuiBuffer(g["id"], g["size"], (), g["hint"], b.session))

            old_fs = b.fs
            b.fs = fsys.branch_view(node.fs_version, node.layer, self.fs_audit)
            old_fs.release()

            b.group = ProcessGroup(ns, records, {pid: len(s.vmas) for pid, s in spaces.items()})
            b.spaces = spaces
            b.order = order
            b.netns = netns
            b.connections = {c.conn_id: c for c in internal}
            b.gui = gui
            b.gui_meta = gui_meta
            b.dirty = set()
            b.parent_image = handle.image_id
            b.node = node
            b.origin = "rollback"
            self.counters["rollbacks"] += 1

    # -- discard / commit -------------------------------------------------

    def discard(self, b: Branch) -> None:
        with b.lock:
            if b.status is BranchStatus.DISCARDED:
                raise BranchStateError(f"{b.branch_id} already discarded")
            if b.status is BranchStatus.FROZEN:
                raise BranchStateError(f"{b.branch_id} is frozen")
            for s in b.spaces.values():
                for v in s.vmas.values():
                    self.store.release(v.table)
                s.vmas.clear()
            b.fs.release()
            b.netns.release()
            self.pids.release(b.group.host_pids)
            b.gui = []
            b.connections = {}
            b.status = BranchStatus.DISCARDED
            if self.visible == b.branch_id:
                self.visible = None

    def commit_promote(self, b: Branch) -> None:
        with b.lock:
            self._require_running(b)
            with self._coord:
                prev = self.visible
                self.promotions.append({
                    "branch": b.branch_id,
                    "replaced": prev,
                    "mechanism": "address-space replacement",
                    "processes": sorted(b.group.records),
                    "ts": time.time(),
                })
                self.visible = b.branch_id
                b.status = BranchStatus.PROMOTED

    def common_ancestor(self, branches: Sequence[Branch]) -> str:
        lines = [self.lineage(b) for b in branches]
        common = set(lines[0]).intersection(*map(set, lines[1:]))
        for vid in lines[0]:
            if vid in common:
                return vid
        raise NoCommonAncestor("branches share no recorded version")

    def commit_merge(self, branches: Sequence[Branch], policy: MergePolicy | None = None, *,
                     designated: Branch | None = None, approver: Approver | None = None) -> MergeReport:
        """Three-way merge of persistent files; volatile state from ``designated``."""
        if not branches:
            raise EngineError("merge needs at least one branch")
        policy = policy or MergePolicy()
        target = designated or branches[0]
        if target not in branches:
            raise EngineError("designated branch must be one of the merged branches")
        for b in branches:
            self._require_running(b)
        base_id = self.common_ancestor(branches)
        base = self.version(base_id).fs_version.materialize()
        views = [b.fs.version.materialize() for b in branches]
        target_files = views[list(branches).index(target)]

        plan: dict[str, tuple[bytes, ...]] = {}
        merged, conflicted, gated = [], [], []
        pending: dict[str, tuple[bytes, ...]] = {}
        for path in sorted(base):
            mine = base[path]
            changed = [v[path] for v in views if v[path] != mine]
            if not changed:
                continue
            result, clash = merge_file(mine, changed, prefer=target_files[path])
            reason = "conflict" if clash else ("sensitive" if policy.requires_approval(path) else None)
            if clash:
                conflicted.append(path)
            if reason is None:
                plan[path] = result
                merged.append(path)
                continue
            decision = approver(path, reason) if approver is not None else None
            if decision is None:
                gated.append(path)
                pending[path] = result
                plan[path] = mine
            elif decision:
                plan[path] = result
                merged.append(path)
            else:
                raise MergeRejected(f"policy rejected {reason} path {path}")

        with target.lock:
            for path, pages in plan.items():
                for i, (new, old) in enumerate(zip(pages, target_files[path])):
                    if new != old:
                        fsys.fs_write(target.fs, path, i, new)
        self.commit_promote(target)
        return MergeReport(target.branch_id, base_id, merged, conflicted, gated, pending)

    # -- inspection -------------------------------------------------------

    def tree(self) -> VersionTree:
        nodes = []
        edges = []
        for vid, n in self.versions.items():
            nodes.append({
                "id": vid,
                "parent": n.parent,
                "image": n.checkpoint.image_id,
                "checkpoint": n.checkpoint.state.value,
                "fs_version": n.fs_version.version_id,
                "created_at": n.created_at,
                "source": n.source_branch,
            })
            if n.parent is not None:
                edges.append([n.parent, vid])
        branches = {bid: {"node": b.node.version_id if b.node else None, "status": b.status.value}
                    for bid, b in self.branches.items()}
        return VersionTree(nodes, edges, branches)

    def live_fs_versions(self) -> list[fsys.FsVersion]:
        out = [n.fs_version for n in self.versions.values()]
        out += [b.fs.version for b in self.branches.values() if b.status is not BranchStatus.DISCARDED]
        return out

    def audit(self) -> list[str]:
        problems = self.store.audit()
        problems += fsys.audit_extents(self.extents, self.live_fs_versions())
        live = [b for b in self.branches.values() if b.status is not BranchStatus.DISCARDED]
        hosts = [p for b in live for p in b.group.host_pids]
        if len(hosts) != len(set(hosts)):
            problems.append("host pids collide across live branches")
        for b in live:
            if b.origin != "load" and any(c.kind is ConnKind.EXTERNAL for c in b.connections.values()):
                problems.append(f"{b.branch_id} holds an external connection")
        for rec in self.fs_audit:
            if rec.layer_extent != rec.view_extent:
                problems.append(f"layer hit served across diverged extents: {rec}")
                break
        return problems

    def drain(self, timeout: float | None = 120.0) -> None:
        self.daemon.drain(timeout)


def merge_file(base: tuple[bytes, ...], versions: Sequence[tuple[bytes, ...]],
               prefer: tuple[bytes, ...]) -> tuple[tuple[bytes, ...], bool]:
    """Byte-level three-way merge of same-length page tuples.

    Returns the merged pages and whether two versions changed the same byte
    to different values (conflicting bytes take ``prefer``'s value).
    """
    out = list(base)
    clash = False
    for i, page in enumerate(base):
        edits = [v[i] for v in versions if v[i] != page]
        if not edits:
            continue
        if len(edits) == 1 or all(e == edits[0] for e in edits):
            out[i] = edits[0]
            continue
        b = np.frombuffer(page, dtype=np.uint8)
        acc = b.copy()
        written = np.zeros(len(b), dtype=bool)
        bad = np.zeros(len(b), dtype=bool)
        for e in edits:
            arr = np.frombuffer(e, dtype=np.uint8)
            mask = arr != b
            bad |= written & mask & (acc != arr)
            acc[mask] = arr[mask]
            written |= mask
        if bad.any():
            clash = True
            pref = np.frombuffer(prefer[i], dtype=np.uint8)
            acc[bad] = pref[bad]
        out[i] = acc.tobytes()
    return tuple(out), clash


def _plan_entries(state: WorkspaceState) -> list[PlanEntry]:
    return preorder(PlanEntry.of(p) for p in state.processes)
