"""Reference-counted copy-on-write page store, snapshot holders, the background
dump daemon and chained checkpoint images.

Sharing is two-level. A :class:`PageTable` is the per-VMA array of page ids and
may itself be owned by several parties at once (branch address spaces,
snapshot holders, pinned version views); sharing a VMA only bumps the table's
owner count. The first write through a shared table splits it (a page-id copy,
never a content copy), after which the usual per-page refcount decides whether
the write must break copy-on-write.

The effective reference count of a page is the sum, over tables containing it,
of that table's owner count.
"""

from __future__ import annotations

import enum
import itertools
import json
import queue
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple

import numpy as np

from .process import ProcessTreeImage, plan_from_json, plan_to_json
from .workspace import PAGE_SIZE, MemoryClass

ABSENT = -1


class MemoryError_(RuntimeError):
    pass


class SlotError(IndexError):
    pass


class BrokenChain(RuntimeError):
    pass


class PageTable:
    __slots__ = ("ids", "owners", "table_id", "__weakref__")

    _ids = itertools.count(1)

    def __init__(self, ids: np.ndarray, owners: int = 1) -> None:
        self.ids = ids
        self.owners = owners
        self.table_id = next(PageTable._ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __repr__(self) -> str:
        return f"PageTable(#{self.table_id}, slots={len(self.ids)}, owners={self.owners})"


class PageStore:
    """Page contents plus per-page table-slot reference counts."""

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._content = np.empty(1024, dtype=object)
        self._refs = np.zeros(1024, dtype=np.int32)
        self._next = 0
        self._live = 0
        self._tables: dict[int, PageTable] = {}
        self.counters: Counter[str] = Counter()

    # -- allocation -------------------------------------------------------

    def _grow(self, need: int) -> None:
        cap = len(self._refs)
        if self._next + need <= cap:
            return
        new_cap = max(cap * 2, self._next + need)
        content = np.empty(new_cap, dtype=object)
        content[:cap] = self._content
        refs = np.zeros(new_cap, dtype=np.int32)
        refs[:cap] = self._refs
        self._content, self._refs = content, refs

    def _alloc(self, contents: list[bytes]) -> np.ndarray:
        n = len(contents)
        self._grow(n)
        ids = np.arange(self._next, self._next + n, dtype=np.int64)
        if n:
            tmp = np.empty(n, dtype=object)
            tmp[:] = contents
            self._content[self._next:self._next + n] = tmp
            self._refs[self._next:self._next + n] = 1
        self._next += n
        self._live += n
        self.counters["allocated_pages"] += n
        return ids

    def _register(self, table: PageTable) -> PageTable:
        self._tables[table.table_id] = table
        return table

    def adopt(self, pages: Iterable[bytes | None]) -> PageTable:
        """Load contents into fresh pages owned by one new table."""
        pages = list(pages)
        for p in pages:
            if p is not None and len(p) != PAGE_SIZE:
                raise ValueError("pages must be exactly PAGE_SIZE bytes")
        with self._lock:
            present = [p for p in pages if p is not None]
            ids = np.full(len(pages), ABSENT, dtype=np.int64)
            mask = np.fromiter((p is not None for p in pages), dtype=bool, count=len(pages))
            ids[mask] = self._alloc(present)
            return self._register(PageTable(ids))

    def empty_table(self, length: int) -> PageTable:
        with self._lock:
            return self._register(PageTable(np.full(length, ABSENT, dtype=np.int64)))

    # -- sharing ----------------------------------------------------------

    def share(self, table: PageTable) -> PageTable:
        """Add an owner to ``table``: O(1), no page ids or contents copied."""
        with self._lock:
            if table.owners <= 0:
                raise MemoryError_("sharing a released table")
            table.owners += 1
            self.counters["table_shares"] += 1
            return table

    def release(self, table: PageTable) -> None:
        with self._lock:
            if table.owners <= 0:
                raise MemoryError_("double release of page table")
            table.owners -= 1
            if table.owners:
                return
            del self._tables[table.table_id]
            ids = table.ids[table.ids >= 0]
            if len(ids):
                np.subtract.at(self._refs, ids, 1)
                dead = ids[self._refs[ids] == 0]
                if len(dead):
                    self._content[dead] = None
                    self._live -= len(dead)
                    self.counters["freed_pages"] += len(dead)

    def eager_copy(self, table: PageTable) -> PageTable:
        """Duplicate every present page into fresh pages (the non-CoW path)."""
        with self._lock:
            valid = table.ids >= 0
            src = table.ids[valid]
            contents = list(self._content[src])
            ids = np.full(len(table.ids), ABSENT, dtype=np.int64)
            ids[valid] = self._alloc(contents)
            self.counters["copy_bytes"] += len(src) * PAGE_SIZE
            self.counters["eager_copied_pages"] += len(src)
            return self._register(PageTable(ids))

    def independent_copy(self, table: PageTable) -> PageTable:
        """Branch-local reconstruction of a segment that is never CoW-shared."""
        with self._lock:
            valid = table.ids >= 0
            src = table.ids[valid]
            contents = list(self._content[src])
            ids = np.full(len(table.ids), ABSENT, dtype=np.int64)
            ids[valid] = self._alloc(contents)
            self.counters["segment_copy_bytes"] += len(src) * PAGE_SIZE
            return self._register(PageTable(ids))

    # -- access -----------------------------------------------------------

    def read(self, table: PageTable, slot: int) -> bytes | None:
        if not 0 <= slot < len(table.ids):
            raise SlotError(f"slot {slot} out of range for {len(table.ids)}-page table")
        pid = int(table.ids[slot])
        return None if pid == ABSENT else self._content[pid]

    def write(self, table: PageTable, slot: int, data: bytes, offset: int = 0,
              base: bytes | None = None) -> tuple[PageTable, bool]:
        """Write ``data`` at ``offset`` of ``slot``.

        Returns the (possibly new, private) table the caller must keep and
        whether a copy-on-write break happened. ``base`` supplies the initial
        contents for a never-touched slot (zero-filled otherwise).
        """
        if not 0 <= slot < len(table.ids):
            raise SlotError(f"slot {slot} out of range for {len(table.ids)}-page table")
        if offset < 0 or offset + len(data) > PAGE_SIZE:
            raise SlotError("write crosses the page boundary")
        with self._lock:
            if table.owners > 1:
                table = self._split(table)
            pid = int(table.ids[slot])
            if pid == ABSENT:
                old = base if base is not None else bytes(PAGE_SIZE)
                new = old[:offset] + data + old[offset + len(data):]
                table.ids[slot] = self._alloc([new])[0]
                self.counters["zero_fills"] += 1
                return table, False
            old = self._content[pid]
            new = old[:offset] + data + old[offset + len(data):]
            if self._refs[pid] > 1:
                self._refs[pid] -= 1
                table.ids[slot] = self._alloc([new])[0]
                self.counters["cow_breaks"] += 1
                self.counters["copy_bytes"] += PAGE_SIZE
                return table, True
            self._content[pid] = new
            self.counters["in_place_writes"] += 1
            return table, False

    def _split(self, table: PageTable) -> PageTable:
        ids = table.ids.copy()
        valid = ids[ids >= 0]
        if len(valid):
            np.add.at(self._refs, valid, 1)
        table.owners -= 1
        self.counters["table_splits"] += 1
        self.counters["pte_copies"] += len(ids)
        return self._register(PageTable(ids))

    def resolve(self, table: PageTable) -> tuple[bytes | None, ...]:
        ids = table.ids
        if not len(ids):
            return ()
        vals = self._content[np.maximum(ids, 0)]
        vals[ids < 0] = None
        return tuple(vals)

    # -- accounting -------------------------------------------------------

    @property
    def live_pages(self) -> int:
        return self._live

    @property
    def live_tables(self) -> int:
        return len(self._tables)

    def table_slots(self) -> int:
        return sum(len(t.ids) for t in self._tables.values())

    def refcount(self, page_id: int) -> int:
        """Effective references: table slots times table owners. O(total slots)."""
        with self._lock:
            return sum(t.owners * int(np.count_nonzero(t.ids == page_id)) for t in self._tables.values())

    def page_id(self, table: PageTable, slot: int) -> int:
        return int(table.ids[slot])

    def shared_page_ids(self, table: PageTable) -> set[int]:
        """Pages of ``table`` referenced by anyone else as well."""
        with self._lock:
            ids = table.ids[table.ids >= 0]
            if table.owners > 1:
                return set(int(i) for i in ids)
            return set(int(i) for i in ids[self._refs[ids] > 1])

    def audit(self) -> list[str]:
        """Check refcount conservation against a recount of every live table."""
        with self._lock:
            problems = []
            recount = np.zeros(len(self._refs), dtype=np.int64)
            for t in self._tables.values():
                if t.owners <= 0:
                    problems.append(f"registered table {t.table_id} with {t.owners} owners")
                ids = t.ids[t.ids >= 0]
                if len(np.unique(ids)) != len(ids):
                    problems.append(f"table {t.table_id} maps one page twice")
                np.add.at(recount, ids, 1)
            bad = np.flatnonzero(recount[: self._next] != self._refs[: self._next])
            if len(bad):
                problems.append(f"{len(bad)} pages with refcount != table-slot references (e.g. {int(bad[0])})")
            live = int(np.count_nonzero(self._refs[: self._next]))
            if live != self._live:
                problems.append(f"live page counter {self._live} != {live}")
            return problems


# ---------------------------------------------------------------------------
# Address spaces
# ---------------------------------------------------------------------------


@dataclass
class Vma:
    vma_id: int
    mem_class: MemoryClass
    start: int
    length: int
    table: PageTable
    backing_file: str | None = None

    def meta(self, local_pid: int) -> dict[str, Any]:
        return {
            "local_pid": local_pid,
            "vma_id": self.vma_id,
            "class": self.mem_class.value,
            "start": self.start,
            "length": self.length,
            "backing_file": self.backing_file,
        }


@dataclass
class AddressSpace:
    local_pid: int
    namespace_id: str
    vmas: dict[int, Vma] = field(default_factory=dict)
    frozen: bool = False


def share_vma_cow(store: PageStore, src: AddressSpace, dst: AddressSpace, vma_id: int) -> Vma:
    """Map the source VMA into ``dst`` copy-on-write. No page contents move."""
    if not src.frozen:
        raise MemoryError_("source address space must be frozen")
    if src.namespace_id == dst.namespace_id:
        raise MemoryError_("destination must live in a different namespace")
    vma = src.vmas[vma_id]
    if vma.mem_class is not MemoryClass.ANONYMOUS:
        raise MemoryError_(f"{vma.mem_class.value} VMAs are not shared through the anonymous path")
    shared = Vma(vma.vma_id, vma.mem_class, vma.start, vma.length, store.share(vma.table))
    dst.vmas[vma_id] = shared
    return shared


# ---------------------------------------------------------------------------
# Snapshot holders, images, dump daemon
# ---------------------------------------------------------------------------


class HolderState(str, enum.Enum):
    HELD = "held"
    DUMPED = "dumped"
    RECLAIMED = "reclaimed"


_holder_ids = itertools.count(1)


@dataclass
class SnapshotHolder:
    holder_id: int
    local_pid: int
    tables: dict[int, PageTable]
    state: HolderState = HolderState.HELD

    def read(self, store: PageStore, vma_id: int, slot: int) -> bytes | None:
        return store.read(self.tables[vma_id], slot)


def create_snapshot_holders(store: PageStore, spaces: Iterable[AddressSpace]) -> list[SnapshotHolder]:
    """One holder per frozen process, each sharing every VMA table of it."""
    holders = []
    for space in spaces:
        if not space.frozen:
            raise MemoryError_(f"process {space.local_pid} is not frozen")
        tables = {vid: store.share(v.table) for vid, v in space.vmas.items()}
        holders.append(SnapshotHolder(next(_holder_ids), space.local_pid, tables))
    return holders


def reclaim_holders(store: PageStore, holders: Iterable[SnapshotHolder]) -> None:
    for h in holders:
        if h.state is HolderState.RECLAIMED:
            continue
        for t in h.tables.values():
            store.release(t)
        h.state = HolderState.RECLAIMED


class PageRecord(NamedTuple):
    local_pid: int
    vma_id: int
    slot: int
    content: bytes


GUI_PID = 0  # records with this pid carry GUI buffer pages; vma_id is the buffer index


@dataclass
class CheckpointImage:
    image_id: str
    parent_image: str | None
    pages: list[PageRecord]
    meta: dict[str, Any]

    def __repr__(self) -> str:
        return f"CheckpointImage({self.image_id!r}, parent={self.parent_image!r}, pages={len(self.pages)})"

    def page_map(self) -> dict[tuple[int, int, int], bytes]:
        return {(r.local_pid, r.vma_id, r.slot): r.content for r in self.pages}


_RECORD = struct.Struct("<III")


class ImageStorage:
    """In-memory image storage; subclasses persist elsewhere."""

    def __init__(self) -> None:
        self._images: dict[str, CheckpointImage] = {}
        self._lock = threading.Lock()
        self.fail_next = 0

    def put(self, image: CheckpointImage) -> None:
        with self._lock:
            if self.fail_next:
                self.fail_next -= 1
                raise OSError("injected storage write failure")
        self._write(image)

    def _write(self, image: CheckpointImage) -> None:
        with self._lock:
            self._images[image.image_id] = image

    def get(self, image_id: str) -> CheckpointImage:
        with self._lock:
            try:
                return self._images[image_id]
            except KeyError:
                raise BrokenChain(f"image {image_id} is missing") from None

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._images

    def discard(self, image_id: str) -> None:
        with self._lock:
            self._images.pop(image_id, None)

    def chain(self, image_id: str) -> list[CheckpointImage]:
        """The image and its ancestors, newest first."""
        out = []
        cur: str | None = image_id
        while cur is not None:
            img = self.get(cur)
            out.append(img)
            cur = img.parent_image
        return out


class DirectoryImageStorage(ImageStorage):
    """``<root>/<image_id>/meta.json`` plus ``pages.bin`` fixed-size records."""

    def __init__(self, root: str | Path, cache: bool = True) -> None:
        super().__init__()
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cache = cache

    def _write(self, image: CheckpointImage) -> None:
        write_image_dir(image, self.root)
        if self.cache:
            super()._write(image)

    def get(self, image_id: str) -> CheckpointImage:
        if image_id in self._images:
            return self._images[image_id]
        if not (self.root / image_id).is_dir():
            raise BrokenChain(f"image {image_id} is missing")
        return read_image_dir(self.root / image_id)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._images or (self.root / image_id).is_dir()

    def discard(self, image_id: str) -> None:
        super().discard(image_id)
        d = self.root / image_id
        if d.is_dir():
            for f in d.iterdir():
                f.unlink()
            d.rmdir()


def write_image_dir(image: CheckpointImage, root: str | Path) -> Path:
    d = Path(root) / image.image_id
    d.mkdir(parents=True, exist_ok=True)
    meta = {"image_id": image.image_id, "parent": image.parent_image, **image.meta}
    procs = meta.get("processes")
    if procs is not None:
        # binary creation plan next to the readable process list
        (d / "procs.bin").write_bytes(plan_from_json(procs).to_bytes())
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    with (d / "pages.bin").open("wb") as fh:
        for rec in image.pages:
            fh.write(_RECORD.pack(rec.local_pid, rec.vma_id, rec.slot))
            fh.write(rec.content)
    return d


def read_image_dir(path: str | Path) -> CheckpointImage:
    d = Path(path)
    meta = json.loads((d / "meta.json").read_text())
    image_id = meta.pop("image_id")
    parent = meta.pop("parent")
    if (d / "procs.bin").exists():
        plan = plan_to_json(ProcessTreeImage.from_bytes((d / "procs.bin").read_bytes()))
        if meta.get("processes") != plan:
            raise BrokenChain(f"{d}: procs.bin disagrees with meta.json")
    raw = (d / "pages.bin").read_bytes()
    step = _RECORD.size + PAGE_SIZE
    if len(raw) % step:
        raise BrokenChain(f"{d}/pages.bin is truncated")
    pages = []
    for off in range(0, len(raw), step):
        pid, vma, slot = _RECORD.unpack_from(raw, off)
        pages.append(PageRecord(pid, vma, slot, raw[off + _RECORD.size:off + step]))
    return CheckpointImage(image_id, parent, pages, meta)


def flatten_chain(chain: list[CheckpointImage]) -> dict[tuple[int, int, int], bytes]:
    """Resolve a newest-first chain into one page map; newer records win."""
    out: dict[tuple[int, int, int], bytes] = {}
    for img in reversed(chain):
        for rec in img.pages:
            out[(rec.local_pid, rec.vma_id, rec.slot)] = rec.content
    return out


class CheckpointState(str, enum.Enum):
    PENDING = "pending"
    DURABLE = "durable"
    FAILED = "failed"


class CheckpointHandle:
    def __init__(self, image_id: str, parent_image: str | None) -> None:
        self.image_id = image_id
        self.parent_image = parent_image
        self.state = CheckpointState.PENDING
        self.error: BaseException | None = None
        self.page_records = 0
        self._done = threading.Event()
        self._transition = threading.Lock()

    def _finish(self, state: CheckpointState, error: BaseException | None = None) -> None:
        with self._transition:
            if self.state is not CheckpointState.PENDING:
                raise MemoryError_(f"checkpoint {self.image_id} already {self.state.value}")
            self.state = state
            self.error = error
        self._done.set()

    @property
    def done(self) -> bool:
        return self._done.is_set()

    def wait(self, timeout: float | None = None) -> CheckpointState:
        if not self._done.wait(timeout):
            raise TimeoutError(f"checkpoint {self.image_id} still pending")
        return self.state

    def __repr__(self) -> str:
        return f"CheckpointHandle({self.image_id}, {self.state.value})"


@dataclass
class DumpJob:
    handle: CheckpointHandle
    holders: list[SnapshotHolder]
    meta: dict[str, Any]
    dirty: set[tuple[int, int, int]] | None  # None: full image
    gui: list[tuple[bytes, ...]]


class DumpDaemon:
    """Background serializer: builds images from holder views, then reclaims them."""

    _image_ids = itertools.count(1)

    def __init__(self, store: PageStore, storage: ImageStorage | None = None) -> None:
        self.store = store
        self.storage = storage if storage is not None else ImageStorage()
        self._queue: queue.Queue[DumpJob | None] = queue.Queue()
        self._running = threading.Event()
        self._running.set()
        self._idle = threading.Condition()
        self._inflight = 0
        self.counters: Counter[str] = Counter()
        self._thread = threading.Thread(target=self._loop, name="dump-daemon", daemon=True)
        self._thread.start()

    def new_image_id(self) -> str:
        return f"img-{next(DumpDaemon._image_ids):06d}"

    def stall(self) -> None:
        self._running.clear()

    def unstall(self) -> None:
        self._running.set()

    @property
    def stalled(self) -> bool:
        return not self._running.is_set()

    def dump_async(self, holders: list[SnapshotHolder], parent_image: str | None, meta: dict[str, Any],
                   dirty: set[tuple[int, int, int]] | None = None,
                   gui: list[tuple[bytes, ...]] | None = None) -> CheckpointHandle:
        """Queue a dump and return at once with a pending handle."""
        for h in holders:
            if h.state is not HolderState.HELD:
                raise MemoryError_(f"holder {h.holder_id} is {h.state.value}")
        handle = CheckpointHandle(self.new_image_id(), parent_image)
        with self._idle:
            self._inflight += 1
        self._queue.put(DumpJob(handle, holders, meta, None if parent_image is None else dirty, gui or []))
        return handle

    def drain(self, timeout: float | None = None) -> None:
        with self._idle:
            if not self._idle.wait_for(lambda: self._inflight == 0, timeout):
                raise TimeoutError("dump daemon did not drain")

    def close(self) -> None:
        self.unstall()
        self._queue.put(None)
        self._thread.join(timeout=30)

    def _loop(self) -> None:
        while True:
            job = self._queue.get()
            if job is None:
                return
            self._running.wait()
            try:
                image = build_image(self.store, job)
                self.storage.put(image)
                job.handle.page_records = len(image.pages)
                self.counters["pages_dumped"] += len(image.pages)
                for h in job.holders:
                    h.state = HolderState.DUMPED
                reclaim_holders(self.store, job.holders)
                job.handle._finish(CheckpointState.DURABLE)
            except BaseException as exc:  # storage failures mark the handle
                reclaim_holders(self.store, job.holders)
                job.handle._finish(CheckpointState.FAILED, exc)
            finally:
                with self._idle:
                    self._inflight -= 1
                    self._idle.notify_all()


def build_image(store: PageStore, job: DumpJob) -> CheckpointImage:
    pages: list[PageRecord] = []
    dirty: dict[tuple[int, int], list[int]] | None = None
    if job.dirty is not None:
        dirty = {}
        for p, v, s in job.dirty:
            dirty.setdefault((p, v), []).append(s)
    for h in sorted(job.holders, key=lambda h: h.local_pid):
        for vma_id in sorted(h.tables):
            table = h.tables[vma_id]
            if dirty is None:
                slots: Iterable[int] = (int(s) for s in np.flatnonzero(table.ids >= 0))
            else:
                slots = sorted(dirty.get((h.local_pid, vma_id), ()))
            for s in slots:
                content = store.read(table, s)
                if content is not None:
                    pages.append(PageRecord(h.local_pid, vma_id, s, content))
    for idx, contents in enumerate(job.gui):
        if dirty is None:
            slots_g: Iterable[int] = range(len(contents))
        else:
            slots_g = sorted(dirty.get((GUI_PID, idx), ()))
        for s in slots_g:
            pages.append(PageRecord(GUI_PID, idx, s, contents[s]))
    return CheckpointImage(job.handle.image_id, job.handle.parent_image, pages, job.meta)


def restore_memory(store: PageStore, flat: Mapping[tuple[int, int, int], bytes],
                   vma_meta: Iterable[Mapping[str, Any]]) -> dict[tuple[int, int], Vma]:
    """Build fresh page tables resolving exactly the chain-flattened contents."""
    by_vma: dict[tuple[int, int], dict[int, bytes]] = {}
    for (pid, vma, slot), content in flat.items():
        by_vma.setdefault((pid, vma), {})[slot] = content
    out = {}
    for m in vma_meta:
        key = (m["local_pid"], m["vma_id"])
        slots = by_vma.get(key, {})
        pages = [slots.get(i) for i in range(m["length"])]
        table = store.adopt(pages)
        store.counters["restore_copy_bytes"] += len(slots) * PAGE_SIZE
        out[key] = Vma(m["vma_id"], MemoryClass(m["class"]), m["start"], m["length"], table,
                       m["backing_file"])
    return out
