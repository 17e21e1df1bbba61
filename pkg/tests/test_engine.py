from dataclasses import replace

import pytest

from forkspace.engine import (
    BranchCapExceeded,
    BranchStateError,
    Engine,
    EngineError,
    MergePolicy,
    MergeRejected,
    RollbackError,
    UnknownVersion,
    VersionTree,
    merge_file,
)
from forkspace.iostate import EgressMode
from forkspace.oracle import EagerOracle
from forkspace.security import AccessKind, Mode, record_profile, AccessEvent
from forkspace.engine import AccessDenied
from forkspace.workspace import PAGE_SIZE, ConnKind, FsImage, MemoryClass, diff

DOC = "/home/user/doc.txt"


def page(b):
    return bytes([b]) * PAGE_SIZE


def test_load_round_trips_state(loaded, small_state):
    e, b = loaded
    assert diff(e.state(b), small_state).empty
    assert e.audit() == []


def test_fork_differs_only_in_external_connections(loaded):
    e, b = loaded
    before = e.state(b)
    vid = e.record_version(b)
    kids = e.fork(vid, 3)
    for k in kids:
        d = diff(e.state(k), before)
        assert [(x.kind, x.key) for x in d] == [("connection", ("ext0",))]
        assert all(c.kind is ConnKind.INTERNAL for c in k.connections.values())
        assert k.origin == "fork"
        assert [ev.kind for ev in k.events] == ["severed"]
    assert e.last_fork.copy_bytes == 0
    assert e.last_fork.severed == 3 and e.last_fork.restored_internal == 6
    assert e.audit() == []


def test_fork_pages_are_shared_then_diverge(loaded):
    e, b = loaded
    vid = e.record_version(b)
    x, y = e.fork(vid, 2)
    orig = e.read_page(x, 1, 1, 0)
    assert e.write_page(x, 1, 1, 0, b"hello")
    assert e.read_page(y, 1, 1, 0) == orig
    assert e.read_page(b, 1, 1, 0) == orig
    assert e.read_page(x, 1, 1, 0)[:5] == b"hello"
    assert e.audit() == []


def test_shared_segments_are_copied_not_shared(loaded):
    e, b = loaded
    vid = e.record_version(b)
    x, y = e.fork(vid, 2)
    e.write_page(x, 1, 3, 0, b"shm")
    assert e.read_page(y, 1, 3, 0)[:3] != b"shm"
    assert e.last_fork.segment_copy_bytes > 0
    assert x.vma(1, 3).mem_class is MemoryClass.SHARED


def test_file_backed_write_starts_from_file_contents(loaded, small_state):
    e, b = loaded
    e.write_page(b, 1, 4, 0, b"Z")
    assert e.read_page(b, 1, 4, 0) == b"Z" + small_state.fs.files["/etc/app.conf"][0][1:]


def test_rollback_restores_recorded_state(loaded):
    e, b = loaded
    v1 = e.record_version(b)
    at_v1 = e.state(b)
    e.write_page(b, 2, 2, 3, page(7))
    e.fs_write(b, DOC, 5, page(8))
    e.gui_write(b, 0, 0, b"gui")
    e.record_version(b)
    e.write_page(b, 1, 1, 1, page(9))
    e.rollback(b, v1)
    d = diff(e.state(b), at_v1)
    assert [x.kind for x in d] == ["connection"]  # external severed on rollback
    assert b.origin == "rollback"
    assert e.audit() == []


def test_rollback_outside_lineage(loaded):
    e, b = loaded
    v1 = e.record_version(b)
    (k,) = e.fork(v1)
    v2 = e.record_version(k)
    with pytest.raises(RollbackError):
        e.rollback(b, v2)
    with pytest.raises(UnknownVersion):
        e.rollback(b, "v999")


def test_discard_reclaims(loaded):
    e, b = loaded
    vid = e.record_version(b)
    kids = e.fork(vid, 4)
    for k in kids:
        for slot in range(6):
            e.write_page(k, 1, 1, slot, page(slot))
    pages = e.store.live_pages
    for k in kids:
        e.discard(k)
    assert e.store.live_pages == pages - 4 * 6 - 4 * 4  # private copies and shm segments
    with pytest.raises(BranchStateError):
        e.discard(kids[0])
    with pytest.raises(BranchStateError):
        e.write_page(kids[0], 1, 1, 0, b"x")
    assert e.audit() == []


def test_promote_releases_outbox(loaded):
    e, b = loaded
    (k,) = e.fork(e.record_version(b))
    assert e.external_attempt(k, "POST /pay").kind == "queued"
    with pytest.raises(BranchStateError):
        e.release_outbox(k)
    e.commit_promote(k)
    assert e.visible == k.branch_id
    assert [ev.target for ev in e.release_outbox(k)] == ["POST /pay"]
    assert e.promotions[-1]["mechanism"] == "address-space replacement"


def test_restricted_egress_denies():
    from forkspace.traces import SMALL_SPEC
    from forkspace.workspace import build_workspace
    with Engine(egress=EgressMode.RESTRICTED) as e:
        b = e.load(build_workspace(SMALL_SPEC))
        (k,) = e.fork(e.record_version(b))
        assert e.external_attempt(k, "x").kind == "denied"


def test_merge_disjoint_edits(loaded, small_state):
    e, b = loaded
    x, y = e.fork(e.record_version(b), 2)
    e.fs_write(x, DOC, 1, page(1))
    e.fs_write(y, DOC, 2, page(2))
    r = e.commit_merge([x, y], designated=y)
    assert r.clean and r.merged == [DOC]
    files = e.state(y).fs.files[DOC]
    assert files[1] == page(1) and files[2] == page(2)
    assert files[3] == small_state.fs.files[DOC][3]
    assert e.visible == y.branch_id


def test_merge_conflict_gated_then_resolved(loaded):
    e, b = loaded
    vid = e.record_version(b)
    x, y = e.fork(vid, 2)
    e.fs_write(x, DOC, 1, page(1))
    e.fs_write(y, DOC, 1, page(2))
    r = e.commit_merge([x, y], designated=x)
    assert r.conflicted == [DOC] and r.gated == [DOC]
    base = e.versions[vid].fs_version.read(DOC, 1)
    got = r.pending[DOC][1]
    for i, c in enumerate(base):
        # both sides edited this byte unless the base already held one of the values
        assert got[i] == {1: 2, 2: 1}.get(c, 1)

    p, q = e.fork(vid, 2)
    e.fs_write(p, DOC, 1, page(1))
    e.fs_write(q, DOC, 1, page(2))
    with pytest.raises(MergeRejected):
        e.commit_merge([p, q], approver=lambda path, why: False)
    r = e.commit_merge([p, q], designated=q, approver=lambda path, why: True)
    assert r.merged == [DOC] and not r.gated
    assert all(c == 2 or (c == 1 and base[i] == 2) for i, c in enumerate(e.state(q).fs.files[DOC][1]))


def test_merge_sensitive_path_needs_approval(small_state):
    files = dict(small_state.fs.files, **{"/home/user/.ssh/id": (page(0),)})
    state = replace(small_state, fs=FsImage(0, files))
    with Engine() as e:
        b = e.load(state)
        x, y = e.fork(e.record_version(b), 2)
        e.fs_write(x, "/home/user/.ssh/id", 0, page(5))
        r = e.commit_merge([x, y])
        assert r.gated == ["/home/user/.ssh/id"] and not r.conflicted
        assert e.state(x).fs.files["/home/user/.ssh/id"][0] == page(0)
    assert MergePolicy().requires_approval("/home/user/.aws/creds")


def test_merge_file_bytes():
    base = (bytes(8),)
    a = (b"\x01" + bytes(7),)
    c = (bytes(7) + b"\x02",)
    out, clash = merge_file(base, [a, c], prefer=a)
    assert out == (b"\x01" + bytes(6) + b"\x02",) and not clash
    d = (b"\x03" + bytes(7),)
    out, clash = merge_file(base, [a, d], prefer=d)
    assert clash and out[0][0] == 3


def test_version_tree_round_trip(loaded):
    e, b = loaded
    v1 = e.record_version(b)
    x, y = e.fork(v1, 2)
    e.record_version(x)
    e.record_version(y)
    e.drain()
    tree = e.tree()
    again = VersionTree.loads(tree.dumps())
    assert again == tree and again.dumps() == tree.dumps()
    assert len(tree.edges) == 2
    bad = tree.to_json()
    bad["edges"].append(["v1", "nope"])
    with pytest.raises(EngineError):
        VersionTree.from_json(bad)


def test_fork_while_dump_is_stalled(loaded):
    e, b = loaded
    e.daemon.stall()
    vid = e.record_version(b)
    assert not e.versions[vid].checkpoint.done
    kids = e.fork(vid, 3)
    assert len(kids) == 3
    e.daemon.unstall()
    e.drain()
    assert e.versions[vid].checkpoint.state.value == "durable"


def test_nway_fork_equals_sequential(loaded):
    e, b = loaded
    vid = e.record_version(b)
    par = e.fork(vid, 4, parallel=True)
    seq = [e.fork(vid, 1)[0] for _ in range(4)]
    for p, s in zip(par, seq):
        assert diff(e.state(p), e.state(s)).empty
    hosts = [pid for k in par + seq for pid in k.group.host_pids]
    assert len(hosts) == len(set(hosts))


def test_branch_cap(small_state):
    with Engine(branch_cap=3) as e:
        b = e.load(small_state)
        vid = e.record_version(b)
        with pytest.raises(BranchCapExceeded):
            e.fork(vid, 3)
        kids = e.fork(vid, 2)
        e.discard(kids[0])
        e.fork(vid, 1)


def test_unknown_version(loaded):
    e, _ = loaded
    with pytest.raises(UnknownVersion):
        e.fork("v42")


def test_profile_enforced_on_branch(loaded):
    e, b = loaded
    prof = record_profile([AccessEvent("h", AccessKind.FILE, DOC)], "editor")
    (k,) = e.fork(e.record_version(b), profile=prof)
    e.fs_read(k, DOC, 0)
    with pytest.raises(AccessDenied):
        e.fs_read(k, "/etc/app.conf", 0)
    (a,) = e.fork(b.node.version_id, profile=prof.with_mode(Mode.AUDIT))
    e.fs_read(a, "/etc/app.conf", 0)
    assert e.access_log.records[-1]["mode"] == "audit"


def test_engine_matches_oracle_after_mixed_ops(loaded, small_state):
    e, b = loaded
    o = EagerOracle()
    o.load("b", small_state)
    v1 = e.record_version(b)
    o.record("b", v1)
    kids = e.fork(v1, 3)
    o.fork(v1, [k.branch_id for k in kids])
    for i, k in enumerate(kids):
        e.write_page(k, 2, 2, i, b"w" * 9, 17)
        o.write_page(k.branch_id, 2, 2, i, b"w" * 9, 17)
        e.fs_write(k, DOC, i, b"f", 3)
        o.fs_write(k.branch_id, DOC, i, b"f", 3)
        e.gui_write(k, 0, 0, bytes([i]))
        o.gui_write(k.branch_id, 0, 0, bytes([i]))
        e.send(k, "int0", b"msg")
        o.send(k.branch_id, "int0", b"msg")
    for k in kids:
        assert diff(e.state(k), o.state(k.branch_id)).empty
    assert e.audit() == []
