"""Experiments: clone scalability and footprint, the cumulative ablation, layer
depth latency, and trace replay. Each returns rows ready for CSV output."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from . import filesystem as fsys
from .engine import Engine
from .strategies import ABLATION, CRIU, TCLONE, CloneStrategy, CostModel, clone, footprint
from .traces import Trace, best_of_n_trace, replay
from .workspace import PAGE_SIZE, CHROMIUM_SPEC, MemoryClass, WorkspaceSpec, WorkspaceState, build_workspace

# columns that depend on the machine, excluded from determinism checks
TIMING_COLUMNS = ("wall_s", "wall_us")


def config_hash(config: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:12]


class SchemaError(ValueError):
    pass


SCHEMAS: dict[str, dict[str, type | tuple[type, ...]]] = {
    "scalability": {"experiment": str, "strategy": str, "n": int, "critical_path_ms": float,
                    "footprint_bytes": int, "base_bytes": int, "footprint_ratio": float,
                    "copied_bytes": int, "config_hash": str, "seed": int, "wall_s": float},
    "ablation": {"experiment": str, "stage": int, "strategy": str, "n": int, "parallel_restore": bool,
                 "overlap_dump_restore": bool, "cow_memory": bool, "async_dump": bool, "freeze_ms": float,
                 "holders_ms": float, "metadata_ms": float, "memory_ms": float, "dump_ms": float,
                 "dump_on_path_ms": float, "critical_path_ms": float, "fork_copied_bytes": int,
                 "config_hash": str, "seed": int, "wall_s": float},
    "layer": {"experiment": str, "system": str, "depth": int, "op": str, "probes": int,
              "storage_reads": int, "latency_ms": float, "config_hash": str, "wall_us": float},
    "replay": {"experiment": str, "strategy": str, "trace_kind": str, "events": int,
               "substrate_ms": float, "model_ms": float, "end_to_end_ms": float, "diffs": int,
               "cow_breaks": int, "probes": int, "footprint_bytes": int, "config_hash": str, "seed": int,
               "wall_s": float},
    "e2e": {"experiment": str, "strategy": str, "task": int, "end_to_end_ms": float, "cdf": float,
            "config_hash": str, "seed": int},
}


def validate_rows(rows: Iterable[dict[str, Any]]) -> None:
    for row in rows:
        schema = SCHEMAS.get(row.get("experiment", ""))
        if schema is None:
            raise SchemaError(f"unknown experiment in row {row}")
        if list(row) != list(schema):
            raise SchemaError(f"{row['experiment']} row has columns {list(row)}")
        for k, t in schema.items():
            v = row[k]
            ok = isinstance(v, t) if t is not float else isinstance(v, (int, float))
            if not ok or (t is int and isinstance(v, bool)):
                raise SchemaError(f"{row['experiment']}.{k}={v!r} is not {t}")


def strip_timing(rows: Iterable[dict[str, Any]]) -> list[dict[str, Any]]:
    return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]


# ---------------------------------------------------------------------------
# Scalability and footprint
# ---------------------------------------------------------------------------


def diverge(engine: Engine, branches: Sequence, state: WorkspaceState, fraction: float, seed: int) -> int:
    """Write ``fraction`` of each branch's anonymous pages, at distinct random slots."""
    regs = [(r.local_pid, r.vma_id, r.length) for r in state.regions
            if r.mem_class is MemoryClass.ANONYMOUS and r.length]
    if not regs:
        return 0
    lens = np.array([x[2] for x in regs])
    cum = np.cumsum(lens)
    k = int(round(fraction * int(cum[-1])))
    rng = np.random.default_rng(seed)
    for b in branches:
        for g in rng.choice(int(cum[-1]), size=k, replace=False):
            i = int(np.searchsorted(cum, g, side="right"))
            slot = int(g - (cum[i] - lens[i]))
            engine.write_page(b, regs[i][0], regs[i][1], slot, b"\x5a" * 8)
    return k * len(branches)


def run_scalability(max_clones: int = 16, *, spec: WorkspaceSpec = CHROMIUM_SPEC, divergence: float = 0.01,
                    strategies: Sequence[CloneStrategy] = (TCLONE, CRIU), cost: CostModel | None = None,
                    counts: Sequence[int] | None = None, seed: int = 0) -> list[dict[str, Any]]:
    if max_clones < 1:
        raise ValueError("max_clones must be >= 1")
    cost = cost or CostModel()
    state = build_workspace(spec)
    h = config_hash({"exp": "scalability", "spec": spec.to_json(), "cost": cost.to_json(),
                     "divergence": divergence, "seed": seed})
    rows = []
    for n in (counts or range(1, max_clones + 1)):
        for strat in strategies:
            t0 = time.perf_counter()
            with Engine(branch_cap=max(64, n + 1)) as e:
                src = e.load(state)
                base = footprint(e)
                res = clone(e, src, n, strat, cost)
                diverge(e, res.branches, state, divergence, seed + n)
                fp = footprint(e)
            rows.append({
                "experiment": "scalability", "strategy": strat.name, "n": n,
                "critical_path_ms": round(res.report.critical_path, 6), "footprint_bytes": fp,
                "base_bytes": base, "footprint_ratio": round(fp / base, 6),
                "copied_bytes": res.report.copied_bytes, "config_hash": h, "seed": seed,
                "wall_s": round(time.perf_counter() - t0, 4),
            })
    return rows


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


def run_ablation(*, spec: WorkspaceSpec = CHROMIUM_SPEC, n: int = 4, cost: CostModel | None = None,
                 seed: int = 0, state: WorkspaceState | None = None) -> list[dict[str, Any]]:
    cost = cost or CostModel()
    state = state if state is not None else build_workspace(spec)
    h = config_hash({"exp": "ablation", "spec": spec.to_json(), "cost": cost.to_json(), "n": n, "seed": seed})
    rows = []
    for stage, strat in enumerate(ABLATION):
        t0 = time.perf_counter()
        with Engine() as e:
            src = e.load(state)
            res = clone(e, src, n, strat, cost)
            fork_copied = e.last_fork.copy_bytes if e.last_fork else 0
        r = res.report
        rows.append({
            "experiment": "ablation", "stage": stage, "strategy": strat.name, "n": n,
            "parallel_restore": strat.parallel_restore, "overlap_dump_restore": strat.overlap_dump_restore,
            "cow_memory": strat.cow_memory, "async_dump": strat.async_dump,
            "freeze_ms": round(r.freeze, 6), "holders_ms": round(r.holders, 6), "metadata_ms": round(r.metadata, 6),
            "memory_ms": round(r.memory, 6), "dump_ms": round(r.dump, 6),
            "dump_on_path_ms": round(r.dump_on_path, 6), "critical_path_ms": round(r.critical_path, 6),
            "fork_copied_bytes": fork_copied, "config_hash": h, "seed": seed,
            "wall_s": round(time.perf_counter() - t0, 4),
        })
    return rows


# ---------------------------------------------------------------------------
# Layer depth
# ---------------------------------------------------------------------------


@dataclass
class LayerFixture:
    """A branch view whose chain has ``depth`` empty layers above the layer holding the file."""

    view: fsys.FsView
    path: str
    pages: int


def layer_fixture(depth: int, file_bytes: int = 1 << 20, seed: int = 0) -> LayerFixture:
    pages = file_bytes // PAGE_SIZE
    rng = np.random.default_rng(seed)
    content = [rng.bytes(PAGE_SIZE) for _ in range(pages)]
    path = "/data/blob.bin"
    store = fsys.ExtentStore()
    root = fsys.FsView.create(store, {path: content})
    for i in range(pages):
        fsys.fs_read(root, path, i)
    layer = fsys.seal_layer(root)
    view = fsys.branch_view(root.version, layer)
    for _ in range(depth):
        layer = fsys.seal_layer(view)
        view = fsys.branch_view(view.version, layer)
    return LayerFixture(view, path, pages)


def _tclone_op(fx: LayerFixture, op: str, costs: fsys.OverlayCosts) -> tuple[int, int, float, float]:
    v, path, n = fx.view, fx.path, fx.pages
    if op in ("read_rw", "write_rw"):
        for i in range(n):  # materialize privately first
            fsys.fs_read(v, path, i)
    p0, s0 = v.counters["probes"], v.counters["storage_reads"]
    t0 = time.perf_counter()
    if op == "write_rw":
        for i in range(n):
            fsys.fs_write(v, path, i, b"\x01" * 16, 0)
    else:
        for i in range(n):
            fsys.fs_read(v, path, i)
    wall = (time.perf_counter() - t0) * 1e6
    probes = v.counters["probes"] - p0
    storage = v.counters["storage_reads"] - s0
    ms = costs.read_base_ms + costs.probe_ms * probes / n
    if op == "write_rw":
        ms += costs.write_extra_ms
    return probes, storage, ms, wall


def run_layer_bench(max_depth: int = 50, *, file_bytes: int = 1 << 20,
                    costs: fsys.OverlayCosts | None = None, seed: int = 0) -> list[dict[str, Any]]:
    costs = costs or fsys.OverlayCosts()
    model = fsys.OverlayModel(costs)
    h = config_hash({"exp": "layer", "file_bytes": file_bytes, "costs": costs.__dict__, "seed": seed})
    rows = []
    for depth in range(max_depth + 1):
        for op in ("read_ro", "read_rw", "write_rw"):
            t0 = time.perf_counter()
            mount = model.fork(model.image(depth))
            if op != "read_ro":
                mount.write("blob")
            before = mount.probes
            ms = mount.write("blob") if op == "write_rw" else mount.read("blob")
            rows.append({"experiment": "layer", "system": "overlay", "depth": depth, "op": op,
                         "probes": mount.probes - before, "storage_reads": 0, "latency_ms": round(ms, 6),
                         "config_hash": h, "wall_us": round((time.perf_counter() - t0) * 1e6, 3)})
            fx = layer_fixture(depth, file_bytes, seed)
            probes, storage, ms, wall = _tclone_op(fx, op, costs)
            rows.append({"experiment": "layer", "system": "tclone", "depth": depth, "op": op,
                         "probes": probes, "storage_reads": storage, "latency_ms": round(ms, 6),
                         "config_hash": h, "wall_us": round(wall, 3)})
    return rows


# ---------------------------------------------------------------------------
# Replay and end-to-end
# ---------------------------------------------------------------------------


def replay_rows(trace: Trace, strategies: Sequence[CloneStrategy], *, cost: CostModel | None = None,
                verify: bool = False, state: WorkspaceState | None = None) -> list[dict[str, Any]]:
    cost = cost or CostModel()
    h = config_hash({"exp": "replay", "trace": trace.kind, "seed": trace.seed, "events": len(trace.events),
                     "spec": trace.workspace.to_json(), "cost": cost.to_json()})
    state = state if state is not None else build_workspace(trace.workspace)
    rows = []
    for strat in strategies:
        r = replay(trace, strat, cost=cost, verify=verify, state=state)
        rows.append({
            "experiment": "replay", "strategy": strat.name, "trace_kind": trace.kind, "events": r.events,
            "substrate_ms": round(r.substrate_ms, 6), "model_ms": round(r.model_ms, 6),
            "end_to_end_ms": round(r.end_to_end_ms, 6), "diffs": len(r.diffs),
            "cow_breaks": r.counters["cow_breaks"], "probes": r.counters["probes"],
            "footprint_bytes": r.footprint, "config_hash": h, "seed": trace.seed,
            "wall_s": round(r.wall_s, 4),
        })
    return rows


def run_e2e(tasks: int = 20, *, spec: WorkspaceSpec | None = None, strategies: Sequence[CloneStrategy] = (TCLONE, CRIU),
            cost: CostModel | None = None, seed: int = 0) -> list[dict[str, Any]]:
    """Best-of-4 tasks with random step counts; sorted latencies with their CDF value."""
    from .traces import SMALL_SPEC

    cost = cost or CostModel()
    spec = spec or SMALL_SPEC
    rng = np.random.default_rng(seed)
    steps = [int(x) for x in rng.integers(1, 6, size=tasks)]
    state = build_workspace(spec)
    h = config_hash({"exp": "e2e", "tasks": tasks, "spec": spec.to_json(), "cost": cost.to_json(), "seed": seed})
    rows = []
    for strat in strategies:
        lat = []
        for i, s in enumerate(steps):
            trace = best_of_n_trace(s, 4, seed * 1000 + i, spec, writes_per_branch=8, model_ms=cost.model_call)
            lat.append(replay(trace, strat, cost=cost, state=state).end_to_end_ms)
        for k, v in enumerate(sorted(lat)):
            rows.append({"experiment": "e2e", "strategy": strat.name, "task": k, "end_to_end_ms": round(v, 6),
                         "cdf": round((k + 1) / len(lat), 6), "config_hash": h, "seed": seed})
    return rows


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R squared."""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2
