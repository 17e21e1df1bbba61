"""Branch-creation strategies, the shared cost model, and footprint accounting.

Every strategy produces the same branches; only the cost decomposition and
the critical path differ. Costs are derived from operation counts the engine
actually performed (pages dumped, pages copied, VMAs shared, processes
restored), priced with a :class:`CostModel`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

from .engine import Branch, BranchStatus, Engine
from .memory import CheckpointState
from .workspace import PAGE_SIZE


@dataclass(frozen=True)
class CloneStrategy:
    name: str
    parallel_restore: bool = False
    overlap_dump_restore: bool = False
    cow_memory: bool = False
    async_dump: bool = False

    @property
    def flags(self) -> tuple[bool, bool, bool, bool]:
        return (self.parallel_restore, self.overlap_dump_restore, self.cow_memory, self.async_dump)


CRIU = CloneStrategy("criu")
PARALLEL = CloneStrategy("+parallel", True)
OVERLAP = CloneStrategy("+overlap", True, True)
COW = CloneStrategy("+cow", True, True, True)
TCLONE = CloneStrategy("tclone", True, True, True, True)
ABLATION = (CRIU, PARALLEL, OVERLAP, COW, TCLONE)
STRATEGIES = {s.name: s for s in ABLATION}


@dataclass(frozen=True)
class CostModel:
    """Milliseconds per unit of work."""

    freeze_per_process: float = 0.2
    holder_per_process: float = 0.3
    metadata_per_process: float = 2.0  # times managed workspaces
    restore_per_process: float = 5.0
    namespace_setup: float = 1500.0
    page_copy: float = 0.002
    page_dump: float = 0.0015
    vma_share: float = 0.02
    probe: float = 0.088
    model_call: float = 2000.0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"cost {f.name} must be non-negative")

    def metadata(self, processes: int, managed: int) -> float:
        """Per-branch metadata collection; grows with every workspace under management."""
        return self.metadata_per_process * processes * max(1, managed)

    @classmethod
    def from_json(cls, doc: str | Mapping[str, Any]) -> CostModel:
        data = json.loads(doc) if isinstance(doc, str) else dict(doc)
        known = {f.name for f in fields(cls)}
        bad = set(data) - known
        if bad:
            raise ValueError(f"unknown cost fields: {sorted(bad)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> CostModel:
        return cls.from_json(Path(path).read_text())

    def to_json(self) -> dict[str, float]:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class CloneCounts:
    """Work the engine performed for one clone call."""

    n: int
    processes: int
    managed: int
    pages: int
    pages_dumped: int
    vma_shares: int
    pages_copied: list[int]


@dataclass
class CostReport:
    strategy: str
    n: int
    freeze: float
    holders: float
    metadata: float
    memory: float
    dump: float
    restore: float
    dump_on_path: float
    critical_path: float
    copied_bytes: int

    CSV_FIELDS = ("strategy", "n", "freeze", "holders", "metadata", "memory", "dump", "restore",
                  "dump_on_path", "critical_path", "copied_bytes")

    def row(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def critical_path(strategy: CloneStrategy, cost: CostModel, c: CloneCounts) -> CostReport:
    """Price the counted work and fold it along the strategy's schedule.

    Per branch i the restore side is ``setup_i + mem_i`` where ``setup_i`` is
    namespace creation, process restore and metadata collection. Serial
    restore sums the branches, parallel restore takes the max, overlap runs
    the dump concurrently with the memory copy, copy-on-write replaces the
    per-page copy with per-VMA sharing, and async dumping moves the dump off
    the path behind holder creation.
    """
    F = cost.freeze_per_process * c.processes
    H = cost.holder_per_process * c.processes if strategy.async_dump else 0.0
    D = cost.page_dump * c.pages_dumped
    meta = cost.metadata(c.processes, c.managed)
    setup = cost.namespace_setup + cost.restore_per_process * c.processes + meta
    if strategy.cow_memory:
        mem = [cost.vma_share * c.vma_shares / max(1, c.n)] * c.n
    else:
        mem = [cost.page_copy * p for p in c.pages_copied]
    restore = [setup + m for m in mem]
    if not strategy.parallel_restore:
        cp = F + D + sum(restore)
        on_path = D
    elif not strategy.overlap_dump_restore:
        cp = F + D + max(restore)
        on_path = D
    elif not strategy.async_dump:
        cp = F + max(D, max(mem)) + setup
        on_path = D
    else:
        cp = F + H + max(mem) + setup
        on_path = 0.0
    copied = 0 if strategy.cow_memory else sum(c.pages_copied) * PAGE_SIZE
    return CostReport(strategy.name, c.n, F, H, meta * c.n, sum(mem), D, sum(restore), on_path, cp, copied)


@dataclass
class CloneResult:
    branches: list[Branch]
    report: CostReport
    counts: CloneCounts
    version_id: str
    wall_s: float


def clone(engine: Engine, source: Branch, n: int, strategy: CloneStrategy = TCLONE,
          cost: CostModel | None = None, profile: Any = None) -> CloneResult:
    """Record ``source`` and create ``n`` branches from it under ``strategy``."""
    cost = cost or CostModel()
    t0 = time.perf_counter()
    vid = engine.record_version(source)
    node = engine.version(vid)
    if not strategy.async_dump:
        # synchronous dump: branches are created only after the image is durable
        if node.checkpoint.wait(600) is not CheckpointState.DURABLE:
            raise RuntimeError(f"synchronous dump failed: {node.checkpoint.error}")
    branches = engine.fork(vid, n, profile, cow=strategy.cow_memory, parallel=strategy.parallel_restore)
    wall = time.perf_counter() - t0
    fr = engine.last_fork
    assert fr is not None
    node.checkpoint.wait(600)
    pages = sum(int((t.ids >= 0).sum()) for t in node.view.tables.values())
    per_branch = fr.eager_pages // n if not strategy.cow_memory else 0
    counts = CloneCounts(
        n=n,
        processes=len(source.group.records),
        managed=sum(1 for b in engine.branches.values() if b.status is not BranchStatus.DISCARDED),
        pages=pages,
        pages_dumped=node.checkpoint.page_records,
        vma_shares=fr.vma_shares,
        pages_copied=[per_branch] * n,
    )
    return CloneResult(branches, critical_path(strategy, cost, counts), counts, vid, wall)


# ---------------------------------------------------------------------------
# Footprint
# ---------------------------------------------------------------------------

PTE_BYTES = 8
BRANCH_BOOKKEEPING = 64 * 1024
PROCESS_BOOKKEEPING = 2 * 1024


@dataclass
class Footprint:
    pages: int
    page_tables: int
    page_cache: int
    gui: int
    bookkeeping: int

    @property
    def total(self) -> int:
        return self.pages + self.page_tables + self.page_cache + self.gui + self.bookkeeping


def footprint_breakdown(engine: Engine) -> Footprint:
    """Resident bytes: unique live pages, page tables, cache layers, GUI, bookkeeping."""
    live = [b for b in engine.branches.values() if b.status is not BranchStatus.DISCARDED]
    pages = engine.store.live_pages * PAGE_SIZE
    tables = engine.store.table_slots() * PTE_BYTES
    layers = {}
    for head in [b.fs.head for b in live] + [n.layer for n in engine.versions.values()]:
        cur = head
        while cur is not None and cur.layer_id not in layers:
            layers[cur.layer_id] = len(cur)
            cur = cur.parent
    cache = (sum(layers.values()) + sum(b.fs.owned_pages() for b in live)) * PAGE_SIZE
    gui = sum(len(pages) for b in live for pages in b.gui) * PAGE_SIZE
    book = sum(BRANCH_BOOKKEEPING + PROCESS_BOOKKEEPING * len(b.group.records) for b in live)
    return Footprint(pages, tables, cache, gui, book)


def footprint(engine: Engine) -> int:
    return footprint_breakdown(engine).total


def rows_to_csv(rows: Iterable[Mapping[str, Any]], out: io.TextIOBase | None = None) -> str:
    rows = list(rows)
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text
