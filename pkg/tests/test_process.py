import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forkspace.process import (
    FreezeError,
    HandleTable,
    HostPidAllocator,
    Namespace,
    NamespaceError,
    PlanEntry,
    ProcessError,
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
from forkspace.workspace import Descriptor, ProcessRecord, WorkspaceSpec, build_workspace


def rec(pid, parent, host=None):
    return ProcessRecord(host or 1000 + pid, pid, parent, (Descriptor(0, "tty:0"),), b"r%d" % pid, b"t", b"s",
                         b"f", (pid * 10,))


def group_of(records):
    ns = Namespace()
    ns.used = True
    ns.local_pids = {r.local_pid for r in records}
    return ProcessGroup(ns, {r.local_pid: r for r in records})


def image_of(records):
    return capture_metadata(freeze(group_of(records), HandleTable()))


def test_freeze_single_process():
    g = group_of([rec(1, None)])
    fm = freeze(g, HandleTable())
    assert len(fm.tree) == 1 and fm.tree[0].parent_local_pid is None
    assert fm.work["page_content_ops"] == 0
    with pytest.raises(FreezeError):
        freeze(g, HandleTable())
    resume(g)
    with pytest.raises(FreezeError):
        resume(g)


def test_plan_fanout_order():
    # A=1 -> {B=2, C=3}
    img = image_of([rec(3, 1), rec(1, None), rec(2, 1)])
    assert [e.local_pid for e in img.plan] == [1, 2, 3]
    assert [e.parent_local_pid for e in img.plan] == [None, 1, 1]


def test_plan_chain_nesting():
    img = image_of([rec(3, 2), rec(2, 1), rec(1, None)])
    assert [(e.local_pid, e.parent_local_pid) for e in img.plan] == [(1, None), (2, 1), (3, 2)]


def test_reconstruct_preserves_local_pids_not_host_pids():
    src = [rec(1, None), rec(2, 1), rec(3, 1)]
    alloc = HostPidAllocator()
    out = reconstruct_tree(image_of(src), Namespace(), alloc)
    assert sorted(out) == [1, 2, 3]
    assert {r.host_pid for r in out.values()}.isdisjoint({r.host_pid for r in src})
    for r in src:
        assert out[r.local_pid].parent_local_pid == r.parent_local_pid
        assert out[r.local_pid].register_state == r.register_state


def test_sibling_namespaces_do_not_conflict():
    img = image_of([rec(1, None), rec(2, 1)])
    alloc = HostPidAllocator()
    a = reconstruct_tree(img, Namespace(), alloc)
    b = reconstruct_tree(img, Namespace(), alloc)
    assert sorted(a) == sorted(b)
    assert {r.host_pid for r in a.values()}.isdisjoint(r.host_pid for r in b.values())


def test_reconstruct_requires_fresh_namespace():
    img = image_of([rec(1, None)])
    ns = Namespace()
    reconstruct_tree(img, ns, HostPidAllocator())
    with pytest.raises(NamespaceError):
        reconstruct_tree(img, ns, HostPidAllocator())


def test_reconstruct_rejects_child_before_parent():
    bad = ProcessTreeImage((PlanEntry.of(rec(2, 1)), PlanEntry.of(rec(1, None))))
    with pytest.raises(ProcessError):
        reconstruct_tree(bad, Namespace(), HostPidAllocator())


def test_reconstruct_capture_fixed_point():
    s = build_workspace(WorkspaceSpec(processes=30, tree_seed=4))
    img = image_of(list(s.processes))
    out = reconstruct_tree(img, Namespace(), HostPidAllocator())
    assert image_of(list(out.values())) == img


def test_handles_do_not_encode_local_pids():
    table = HandleTable()
    records = [rec(1, None), rec(2, 1)]
    fm = freeze(group_of(records), table)
    tokens = {h.token for h in fm.proc_handles}
    assert tokens.isdisjoint({1, 2})
    # still resolvable after a destination namespace exists
    reconstruct_tree(capture_metadata(fm), Namespace(), HostPidAllocator())
    assert [table.resolve(h).local_pid for h in fm.proc_handles] == [1, 2]
    table.close(fm.proc_handles)
    with pytest.raises(ProcessError):
        table.resolve(fm.proc_handles[0])


def test_host_pid_allocator_uniqueness():
    a = HostPidAllocator()
    pids = [a.allocate() for _ in range(100)]
    assert len(set(pids)) == 100
    with pytest.raises(ProcessError):
        a.register(pids[0])
    a.release(pids[:10])
    assert len(a.live) == 90


def test_binary_and_json_round_trip():
    s = build_workspace(WorkspaceSpec(processes=25, tree_seed=9, conn_mix={"internal": 3}))
    img = image_of(list(s.processes))
    assert ProcessTreeImage.from_bytes(img.to_bytes()) == img
    assert plan_from_json(plan_to_json(img)) == img
    raw = bytearray(img.to_bytes())
    raw[0] = 99
    with pytest.raises(ProcessError):
        ProcessTreeImage.from_bytes(bytes(raw))


def test_freeze_work_independent_of_pages():
    from dataclasses import replace

    from forkspace import Engine

    base = build_workspace(WorkspaceSpec(processes=20, tree_seed=1, anon_pages=10**3))
    works = []
    for pages in (10**3, 10**5):
        s = build_workspace(WorkspaceSpec(processes=20, tree_seed=1, anon_pages=pages))
        s = replace(s, processes=base.processes)
        with Engine() as e:
            e.record_version(e.load(s))
            works.append(e.last_record.freeze_work)
    assert works[0] == works[1]
    assert works[0]["page_content_ops"] == 0


def test_freeze_work_linear_in_processes():
    counts = [10, 100, 1000]
    work = []
    for n in counts:
        s = build_workspace(WorkspaceSpec(processes=n, tree_seed=2))
        work.append(sum(freeze(group_of(list(s.processes)), HandleTable()).work.values()))
    slope, intercept = np.polyfit(counts, work, 1)
    pred = slope * np.array(counts) + intercept
    r2 = 1 - ((np.array(work) - pred) ** 2).sum() / ((np.array(work) - np.mean(work)) ** 2).sum()
    assert slope > 0 and r2 > 0.99


@st.composite
def random_trees(draw, max_size=200):
    n = draw(st.integers(1, max_size))
    pids = draw(st.lists(st.integers(1, 10**6), min_size=n, max_size=n, unique=True))
    parents = [None] + [pids[draw(st.integers(0, i - 1))] for i in range(1, n)]
    return [rec(p, q) for p, q in zip(pids, parents)]


@settings(max_examples=60, deadline=None)
@given(random_trees())
def test_reconstruction_is_isomorphic(records):
    img = image_of(records)
    seen = set()
    for e in img.plan:
        assert e.parent_local_pid is None or e.parent_local_pid in seen
        seen.add(e.local_pid)
    out = reconstruct_tree(img, Namespace(), HostPidAllocator())
    assert {p: r.parent_local_pid for p, r in out.items()} == {r.local_pid: r.parent_local_pid for r in records}


def test_reconstruction_at_ten_thousand_processes():
    rng = np.random.default_rng(0)
    records = [rec(1, None)] + [rec(i, int(rng.integers(1, i))) for i in range(2, 10_001)]
    out = reconstruct_tree(image_of(records), Namespace(), HostPidAllocator())
    assert len(out) == 10_000
    assert all(out[r.local_pid].parent_local_pid == r.parent_local_pid for r in records)


def test_preorder_rejects_disconnected():
    with pytest.raises(ProcessError):
        preorder([PlanEntry.of(rec(1, None)), PlanEntry.of(rec(2, 5))])
