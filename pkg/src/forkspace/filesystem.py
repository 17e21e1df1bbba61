"""Versioned filesystem: refcounted immutable extents, per-version extent maps,
sealed page-cache layers walked on a miss, and the overlay-stack baseline."""

from __future__ import annotations

import hashlib
import itertools
import json
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple

from .workspace import PAGE_SIZE, FsImage

EXTENT_PAGES = 64


class FsError(RuntimeError):
    pass


class MissingPath(FsError, KeyError):
    pass


class BranchOfBranch(FsError):
    pass


# ---------------------------------------------------------------------------
# Extents and versions
# ---------------------------------------------------------------------------


class ExtentStore:
    """extent_id -> (immutable page tuple, refcount)."""

    def __init__(self) -> None:
        self._pages: dict[int, tuple[bytes, ...]] = {}
        self._refs: dict[int, int] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self.counters: Counter[str] = Counter()

    def create(self, pages: tuple[bytes, ...]) -> int:
        if not 0 < len(pages) <= EXTENT_PAGES:
            raise FsError(f"extent must hold 1..{EXTENT_PAGES} pages")
        with self._lock:
            eid = next(self._ids)
            self._pages[eid] = pages
            self._refs[eid] = 1
            self.counters["extents_created"] += 1
            return eid

    def pages(self, eid: int) -> tuple[bytes, ...]:
        return self._pages[eid]

    def incref(self, ids: Iterable[int]) -> None:
        with self._lock:
            for eid in ids:
                self._refs[eid] += 1

    def decref(self, ids: Iterable[int]) -> None:
        with self._lock:
            for eid in ids:
                n = self._refs[eid] - 1
                if n:
                    self._refs[eid] = n
                else:
                    del self._refs[eid]
                    del self._pages[eid]
                    self.counters["extents_freed"] += 1

    def refcount(self, eid: int) -> int:
        return self._refs.get(eid, 0)

    def __len__(self) -> int:
        return len(self._pages)

    @property
    def live_ids(self) -> set[int]:
        return set(self._pages)

    def save(self, root: str | Path) -> None:
        """Content-addressed block files plus an extent index."""
        root = Path(root)
        blocks = root / "blocks"
        blocks.mkdir(parents=True, exist_ok=True)
        index = {}
        for eid in sorted(self._pages):
            names = []
            for page in self._pages[eid]:
                h = hashlib.sha256(page).hexdigest()
                f = blocks / h
                if not f.exists():
                    f.write_bytes(page)
                names.append(h)
            index[str(eid)] = {"blocks": names, "refs": self._refs[eid]}
        (root / "extents.json").write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, root: str | Path) -> ExtentStore:
        root = Path(root)
        index = json.loads((root / "extents.json").read_text())
        store = cls()
        cache: dict[str, bytes] = {}
        for key, entry in index.items():
            eid = int(key)
            pages = []
            for h in entry["blocks"]:
                if h not in cache:
                    cache[h] = (root / "blocks" / h).read_bytes()
                pages.append(cache[h])
            store._pages[eid] = tuple(pages)
            store._refs[eid] = entry["refs"]
        top = max(store._pages, default=0)
        store._ids = itertools.count(top + 1)
        return store


_version_ids = itertools.count(1)


class FsVersion:
    """path -> extent id list. Frozen versions never change."""

    def __init__(self, store: ExtentStore, files: dict[str, list[int]], frozen: bool = False) -> None:
        self.store = store
        self.files = files
        self.frozen = frozen
        self.version_id = next(_version_ids)
        self.released = False

    @classmethod
    def from_image(cls, store: ExtentStore, files: Mapping[str, Iterable[bytes]]) -> FsVersion:
        out: dict[str, list[int]] = {}
        for path in sorted(files):
            pages = tuple(files[path])
            out[path] = [store.create(pages[i:i + EXTENT_PAGES]) for i in range(0, len(pages), EXTENT_PAGES)]
        return cls(store, out)

    def snapshot(self, frozen: bool = True) -> FsVersion:
        """Share every extent; metadata-only."""
        files = {p: list(ids) for p, ids in self.files.items()}
        self.store.incref(eid for ids in files.values() for eid in ids)
        self.store.counters["snapshot_extent_refs"] += sum(len(ids) for ids in files.values())
        return FsVersion(self.store, files, frozen)

    def release(self) -> None:
        if self.released:
            return
        self.released = True
        self.store.decref(eid for ids in self.files.values() for eid in ids)

    def extent_of(self, path: str, page_index: int) -> int:
        try:
            ids = self.files[path]
        except KeyError:
            raise MissingPath(path) from None
        k = page_index // EXTENT_PAGES
        if page_index < 0 or k >= len(ids):
            raise FsError(f"page {page_index} beyond end of {path}")
        eid = ids[k]
        if page_index % EXTENT_PAGES >= len(self.store.pages(eid)):
            raise FsError(f"page {page_index} beyond end of {path}")
        return eid

    def read(self, path: str, page_index: int) -> bytes:
        eid = self.extent_of(path, page_index)
        return self.store.pages(eid)[page_index % EXTENT_PAGES]

    def write(self, path: str, page_index: int, page: bytes) -> int:
        """Replace the covering extent with a fresh one; returns its id."""
        if self.frozen:
            raise FsError("frozen filesystem versions are immutable")
        old = self.extent_of(path, page_index)
        pages = list(self.store.pages(old))
        pages[page_index % EXTENT_PAGES] = page
        new = self.store.create(tuple(pages))
        self.files[path][page_index // EXTENT_PAGES] = new
        self.store.decref([old])
        return new

    def page_count(self, path: str) -> int:
        return sum(len(self.store.pages(e)) for e in self.files[path])

    def materialize(self) -> dict[str, tuple[bytes, ...]]:
        out = {}
        for path, ids in self.files.items():
            pages: list[bytes] = []
            for eid in ids:
                pages.extend(self.store.pages(eid))
            out[path] = tuple(pages)
        return out


def snapshot_fs(view: FsView) -> FsVersion:
    """Frozen version sharing all of the view's extents."""
    return view.version.snapshot(frozen=True)


# ---------------------------------------------------------------------------
# Page cache layers and views
# ---------------------------------------------------------------------------


class CacheEntry(NamedTuple):
    content: bytes
    extent_id: int


_layer_ids = itertools.count(1)


class PageCacheLayer:
    def __init__(self, entries: dict[tuple[str, int], CacheEntry], parent: PageCacheLayer | None) -> None:
        self.layer_id = next(_layer_ids)
        self.entries: Mapping[tuple[str, int], CacheEntry] = MappingProxyType(dict(entries))
        self.parent = parent
        self.sealed = True
        self.refs = 1
        if parent is not None:
            parent.refs += 1

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def depth(self) -> int:
        n, cur = 0, self.parent
        while cur is not None:
            n, cur = n + 1, cur.parent
        return n

    def chain(self) -> list[PageCacheLayer]:
        out, cur = [], self
        while cur is not None:
            out.append(cur)
            cur = cur.parent
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for (path, idx) in sorted(self.entries):
            e = self.entries[(path, idx)]
            h.update(f"{path}\0{idx}\0{e.extent_id}\0".encode())
            h.update(e.content)
        return h.hexdigest()


def release_layer(layer: PageCacheLayer | None) -> int:
    """Drop one reference; returns how many layers were reclaimed."""
    freed = 0
    while layer is not None:
        layer.refs -= 1
        if layer.refs > 0:
            break
        freed += 1
        layer = layer.parent
    return freed


@dataclass
class PrivateEntry:
    content: bytes
    extent_id: int
    owned: bool  # False: read-only mapping of a layer entry


class AuditRecord(NamedTuple):
    view_id: int
    layer_id: int
    path: str
    page_index: int
    layer_extent: int
    view_extent: int


_view_ids = itertools.count(1)


@dataclass
class FsView:
    version: FsVersion
    head: PageCacheLayer | None = None
    private: dict[tuple[str, int], PrivateEntry] = field(default_factory=dict)
    view_id: int = field(default_factory=lambda: next(_view_ids))
    counters: Counter[str] = field(default_factory=Counter)
    audit: list[AuditRecord] | None = None
    frozen: bool = False

    @property
    def store(self) -> ExtentStore:
        return self.version.store

    @classmethod
    def create(cls, store: ExtentStore, files: Mapping[str, Iterable[bytes]]) -> FsView:
        return cls(FsVersion.from_image(store, files))

    def owned_pages(self) -> int:
        return sum(1 for e in self.private.values() if e.owned)

    def materialize(self) -> FsImage:
        return FsImage(self.view_id, self.version.materialize())

    def release(self) -> None:
        self.version.release()
        release_layer(self.head)
        self.head = None
        self.private.clear()


def admit_page(layer: PageCacheLayer, view: FsView, path: str, page_index: int) -> bool:
    """A layer entry may serve ``view`` only if both still map the same extent."""
    entry = layer.entries.get((path, page_index))
    if entry is None:
        return False
    return entry.extent_id == view.version.extent_of(path, page_index)


def fs_read(view: FsView, path: str, page_index: int) -> bytes:
    key = (path, page_index)
    hit = view.private.get(key)
    if hit is not None:
        view.counters["private_hits"] += 1
        return hit.content
    view_extent = view.version.extent_of(path, page_index)
    layer = view.head
    while layer is not None:
        view.counters["probes"] += 1
        entry = layer.entries.get(key)
        if entry is not None:
            if entry.extent_id == view_extent:
                view.counters["layer_hits"] += 1
                if view.audit is not None:
                    view.audit.append(AuditRecord(view.view_id, layer.layer_id, path, page_index,
                                                  entry.extent_id, view_extent))
                view.private[key] = PrivateEntry(entry.content, entry.extent_id, owned=False)
                return entry.content
            view.counters["admission_rejects"] += 1
        layer = layer.parent
    view.counters["storage_reads"] += 1
    content = view.version.store.pages(view_extent)[page_index % EXTENT_PAGES]
    view.private[key] = PrivateEntry(content, view_extent, owned=True)
    return content


def fs_write(view: FsView, path: str, page_index: int, data: bytes, offset: int = 0) -> None:
    """Write-through: fresh extent in this view's version, private cache entry."""
    if view.frozen:
        raise FsError("view is frozen")
    if offset < 0 or offset + len(data) > PAGE_SIZE:
        raise FsError("write crosses the page boundary")
    if len(data) == PAGE_SIZE:
        page = bytes(data)
        view.version.extent_of(path, page_index)
    else:
        old = fs_read(view, path, page_index)
        page = old[:offset] + data + old[offset + len(data):]
    eid = view.version.write(path, page_index, page)
    view.private[(path, page_index)] = PrivateEntry(page, eid, owned=True)
    view.counters["writes"] += 1


def seal_layer(view: FsView) -> PageCacheLayer:
    """Turn the view's privately cached pages into a sealed layer on top of its chain.

    Read-only mappings are dropped from the private cache, since the chain
    already holds them. The view's head becomes the new layer.
    """
    owned = {k: CacheEntry(e.content, e.extent_id) for k, e in view.private.items() if e.owned}
    layer = PageCacheLayer(owned, view.head)
    # the view's reference to the old head moves to the new layer
    if view.head is not None:
        view.head.refs -= 1
    view.head = layer
    view.private.clear()
    return layer


def branch_view(version: FsVersion, head: PageCacheLayer | None, audit: list[AuditRecord] | None = None) -> FsView:
    """New mutable view over a snapshot of ``version`` with ``head`` as its chain."""
    if head is not None:
        head.refs += 1
    return FsView(version.snapshot(frozen=False), head, audit=audit)


def eager_view(version: FsVersion, head: PageCacheLayer | None) -> tuple[FsView, int]:
    """Baseline: a private copy of every admissible cached page, no shared chain."""
    view = FsView(version.snapshot(frozen=False), None)
    copied = 0
    for layer in (head.chain() if head is not None else []):
        for key, entry in layer.entries.items():
            if key in view.private:
                continue
            if entry.extent_id == view.version.extent_of(*key):
                view.private[key] = PrivateEntry(bytes(bytearray(entry.content)), entry.extent_id, owned=True)
                copied += PAGE_SIZE
    return view, copied


def cached_pages(views: Iterable[FsView]) -> int:
    """Unique resident cache pages: live layers plus owned private entries."""
    seen: set[int] = set()
    total = 0
    for v in views:
        total += v.owned_pages()
        for layer in (v.head.chain() if v.head is not None else []):
            if layer.layer_id in seen:
                break
            seen.add(layer.layer_id)
            total += len(layer)
    return total


def audit_extents(store: ExtentStore, versions: Iterable[FsVersion]) -> list[str]:
    expect: Counter[int] = Counter()
    for v in versions:
        if v.released:
            continue
        for ids in v.files.values():
            expect.update(ids)
    problems = []
    if set(expect) != store.live_ids:
        problems.append(f"extent set mismatch: {len(set(expect) ^ store.live_ids)} ids differ")
    for eid, n in expect.items():
        if store.refcount(eid) != n:
            problems.append(f"extent {eid} refcount {store.refcount(eid)} != {n}")
            break
    return problems


# ---------------------------------------------------------------------------
# Overlay baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OverlayCosts:
    """Per-operation cost in milliseconds; defaults calibrated to the 1 MB file fixture."""

    probe_ms: float = 0.088
    read_base_ms: float = 1.212
    rw_extra_ms: float = 0.1
    write_extra_ms: float = 1.2


class OverlayMount:
    """One branch mount: a private upper directory over ``depth`` read-only lowers."""

    def __init__(self, depth: int, costs: OverlayCosts, is_branch: bool = True) -> None:
        if depth < 0:
            raise ValueError("depth must be >= 0")
        self.depth = depth
        self.costs = costs
        self.is_branch = is_branch
        self.upper: set[str] = set()
        self.cached: set[str] = set()
        self.probes = 0

    def _lookup(self, path: str) -> int:
        if path in self.upper or path in self.cached:
            n = 1
        else:
            n = self.depth + 1  # upper, then every lower until the owning one
        self.probes += n
        return n

    def read(self, path: str) -> float:
        n = self._lookup(path)
        c = self.costs
        extra = c.rw_extra_ms if path in self.upper else 0.0
        self.cached.add(path)
        return c.read_base_ms + n * c.probe_ms + extra

    def write(self, path: str) -> float:
        n = self._lookup(path)
        self.upper.add(path)
        c = self.costs
        return c.read_base_ms + n * c.probe_ms + c.write_extra_ms


class OverlayModel:
    def __init__(self, costs: OverlayCosts | None = None) -> None:
        self.costs = costs or OverlayCosts()

    def image(self, depth: int) -> OverlayMount:
        return OverlayMount(depth, self.costs, is_branch=False)

    def fork(self, parent: OverlayMount) -> OverlayMount:
        if parent.is_branch:
            raise BranchOfBranch("each layer is a mountpoint; branches cannot be forked again")
        return OverlayMount(parent.depth, self.costs)


def overlay_lookup(model: OverlayModel, depth: int, op_kind: str) -> float:
    """Modeled latency (ms) of one op on a fresh branch over ``depth`` lower layers."""
    mount = model.fork(model.image(depth))
    if op_kind == "read_ro":
        return mount.read("f")
    if op_kind == "read_rw":
        mount.write("f")
        return mount.read("f")
    if op_kind == "write_rw":
        mount.write("f")
        return mount.write("f")
    raise ValueError(f"unknown op kind {op_kind!r}")


def overlay_probes(depth: int, materialized: bool) -> int:
    return 1 if materialized else depth + 1
