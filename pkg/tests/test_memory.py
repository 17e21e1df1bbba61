import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forkspace.memory import (
    BrokenChain,
    CheckpointImage,
    CheckpointState,
    DirectoryImageStorage,
    DumpDaemon,
    HolderState,
    ImageStorage,
    MemoryError_,
    PageRecord,
    PageStore,
    SlotError,
    AddressSpace,
    Vma,
    create_snapshot_holders,
    flatten_chain,
    read_image_dir,
    reclaim_holders,
    restore_memory,
    share_vma_cow,
    write_image_dir,
)
from forkspace.workspace import PAGE_SIZE, MemoryClass


def page(b):
    return bytes([b]) * PAGE_SIZE


def space(store, pid, ns, pages, cls=MemoryClass.ANONYMOUS, frozen=True):
    s = AddressSpace(pid, ns, frozen=frozen)
    s.vmas[1] = Vma(1, cls, 0, len(pages), store.adopt(pages))
    return s


def test_share_one_page_vma():
    store = PageStore()
    src = space(store, 1, "a", [page(1)])
    dst = AddressSpace(1, "b")
    v = share_vma_cow(store, src, dst, 1)
    pid = store.page_id(v.table, 0)
    assert store.refcount(pid) == 2
    assert store.counters["copy_bytes"] == 0
    assert store.audit() == []


def test_share_to_four_destinations():
    store = PageStore()
    src = space(store, 1, "src", [page(1), page(2)])
    dsts = [AddressSpace(1, f"d{i}") for i in range(4)]
    for d in dsts:
        share_vma_cow(store, src, d, 1)
    assert store.refcount(store.page_id(src.vmas[1].table, 0)) == 5
    # write on one destination and on the source; the other three see the original
    v = dsts[0].vmas[1]
    v.table, broke = store.write(v.table, 0, b"x")
    assert broke
    s = src.vmas[1]
    s.table, _ = store.write(s.table, 1, b"y")
    for d in dsts[1:]:
        assert store.resolve(d.vmas[1].table) == (page(1), page(2))
    assert store.read(v.table, 0)[:1] == b"x"
    assert store.read(s.table, 1)[:1] == b"y"
    assert store.audit() == []


@pytest.mark.parametrize("cls", [MemoryClass.FILE_BACKED, MemoryClass.SHARED])
def test_share_rejects_other_classes(cls):
    store = PageStore()
    src = space(store, 1, "a", [page(1)], cls)
    with pytest.raises(MemoryError_):
        share_vma_cow(store, src, AddressSpace(1, "b"), 1)


def test_share_requires_frozen_source_and_other_namespace():
    store = PageStore()
    with pytest.raises(MemoryError_):
        share_vma_cow(store, space(store, 1, "a", [page(1)], frozen=False), AddressSpace(1, "b"), 1)
    with pytest.raises(MemoryError_):
        share_vma_cow(store, space(store, 1, "a", [page(1)]), AddressSpace(1, "a"), 1)


def test_sole_owner_writes_in_place():
    store = PageStore()
    t = store.adopt([page(1)])
    pid = store.page_id(t, 0)
    t2, broke = store.write(t, 0, b"z", 10)
    assert t2 is t and not broke
    assert store.page_id(t, 0) == pid
    assert store.counters["allocated_pages"] == 1
    assert store.read(t, 0)[10:11] == b"z"


def test_write_errors():
    store = PageStore()
    t = store.adopt([page(1)])
    with pytest.raises(SlotError):
        store.write(t, 1, b"a")
    with pytest.raises(SlotError):
        store.write(t, 0, b"ab", PAGE_SIZE - 1)
    with pytest.raises(SlotError):
        store.read(t, -1)
    with pytest.raises(ValueError):
        store.adopt([b"short"])


def test_absent_slot_zero_fill_or_base():
    store = PageStore()
    t = store.adopt([None, None])
    t, _ = store.write(t, 0, b"a")
    assert store.read(t, 0) == b"a" + bytes(PAGE_SIZE - 1)
    t, _ = store.write(t, 1, b"b", base=page(7))
    assert store.read(t, 1) == b"b" + page(7)[1:]


def test_holders_keep_freeze_instant_view():
    store = PageStore()
    spaces = [space(store, p, "ns", [page(p), page(p + 10)]) for p in (1, 2)]
    holders = create_snapshot_holders(store, spaces)
    assert store.counters["copy_bytes"] == 0
    for s in spaces:
        s.frozen = False
        v = s.vmas[1]
        for slot in range(2):
            v.table, broke = store.write(v.table, slot, b"\xff" * PAGE_SIZE)
            assert broke
    for h, p in zip(holders, (1, 2)):
        assert h.read(store, 1, 0) == page(p)
        assert h.read(store, 1, 1) == page(p + 10)
    assert store.counters["copy_bytes"] == 4 * PAGE_SIZE
    assert store.counters["copy_bytes"] == PAGE_SIZE * store.counters["cow_breaks"]


def test_holder_creation_requires_frozen():
    store = PageStore()
    with pytest.raises(MemoryError_):
        create_snapshot_holders(store, [space(store, 1, "a", [page(1)], frozen=False)])


def test_holders_for_168_processes(chromium_state):
    store = PageStore()
    spaces = {}
    for r in chromium_state.regions[:2000]:
        s = spaces.setdefault(r.local_pid, AddressSpace(r.local_pid, "ns", frozen=True))
        s.vmas[r.vma_id] = Vma(r.vma_id, r.mem_class, r.start, r.length, store.empty_table(r.length))
    for p in chromium_state.processes:
        spaces.setdefault(p.local_pid, AddressSpace(p.local_pid, "ns", frozen=True))
    holders = create_snapshot_holders(store, spaces.values())
    assert len(holders) == 168
    assert store.counters["copy_bytes"] == 0


def test_create_then_reclaim_restores_refcounts():
    store = PageStore()
    s = space(store, 1, "a", [page(1), page(2)])
    before = [store.refcount(store.page_id(s.vmas[1].table, i)) for i in range(2)]
    holders = create_snapshot_holders(store, [s])
    reclaim_holders(store, holders)
    assert holders[0].state is HolderState.RECLAIMED
    assert [store.refcount(store.page_id(s.vmas[1].table, i)) for i in range(2)] == before
    reclaim_holders(store, holders)  # idempotent
    assert store.audit() == []


def test_dump_async_returns_pending_and_completes():
    store = PageStore()
    daemon = DumpDaemon(store)
    try:
        s = space(store, 1, "a", [page(1), page(2)])
        daemon.stall()
        holders = create_snapshot_holders(store, [s])
        h = daemon.dump_async(holders, None, {"k": 1})
        assert h.state is CheckpointState.PENDING and not h.done
        s.frozen = False
        v = s.vmas[1]
        v.table, _ = store.write(v.table, 0, page(9))
        daemon.unstall()
        assert h.wait(10) is CheckpointState.DURABLE
        img = daemon.storage.get(h.image_id)
        assert img.page_map() == {(1, 1, 0): page(1), (1, 1, 1): page(2)}
        assert all(x.state is HolderState.RECLAIMED for x in holders)
        with pytest.raises(MemoryError_):
            daemon.dump_async(holders, None, {})
        assert store.audit() == []
    finally:
        daemon.close()


def test_storage_failure_marks_failed():
    store = PageStore()
    storage = ImageStorage()
    storage.fail_next = 1
    daemon = DumpDaemon(store, storage)
    try:
        s = space(store, 1, "a", [page(1)])
        h = daemon.dump_async(create_snapshot_holders(store, [s]), None, {})
        assert h.wait(10) is CheckpointState.FAILED
        assert isinstance(h.error, OSError)
        with pytest.raises(BrokenChain):
            storage.get(h.image_id)
        assert store.audit() == []
    finally:
        daemon.close()


def test_incremental_dump_contains_only_dirty():
    store = PageStore()
    daemon = DumpDaemon(store)
    try:
        s = space(store, 1, "a", [page(i) for i in range(10)])
        full = daemon.dump_async(create_snapshot_holders(store, [s]), None, {})
        inc = daemon.dump_async(create_snapshot_holders(store, [s]), full.image_id, {}, dirty={(1, 1, 3), (1, 1, 7)})
        daemon.drain(10)
        assert full.page_records == 10
        assert sorted(r.slot for r in daemon.storage.get(inc.image_id).pages) == [3, 7]
    finally:
        daemon.close()


def image(iid, parent, recs):
    return CheckpointImage(iid, parent, [PageRecord(*r) for r in recs], {"vmas": []})


def test_flatten_chain_newer_wins():
    a = image("a", None, [(1, 1, 0, page(1)), (1, 1, 1, page(2))])
    b = image("b", "a", [(1, 1, 1, page(3))])
    c = image("c", "b", [(1, 1, 0, page(4)), (2, 1, 0, page(5))])
    flat = flatten_chain([c, b, a])
    assert flat == {(1, 1, 0): page(4), (1, 1, 1): page(3), (2, 1, 0): page(5)}
    storage = ImageStorage()
    for img in (a, b, c):
        storage.put(img)
    assert [i.image_id for i in storage.chain("c")] == ["c", "b", "a"]
    storage.discard("a")
    with pytest.raises(BrokenChain):
        storage.chain("c")


def test_restore_memory_resolves_flat_state():
    store = PageStore()
    flat = {(1, 1, 0): page(1), (1, 1, 2): page(3)}
    meta = [{"local_pid": 1, "vma_id": 1, "class": "anonymous", "start": 0, "length": 3, "backing_file": None}]
    vmas = restore_memory(store, flat, meta)
    assert store.resolve(vmas[(1, 1)].table) == (page(1), None, page(3))


def test_image_dir_round_trip(tmp_path):
    img = CheckpointImage("img-x", "img-w", [PageRecord(1, 2, 3, os.urandom(PAGE_SIZE)),
                                             PageRecord(4, 5, 6, os.urandom(PAGE_SIZE))],
                          {"vmas": [{"local_pid": 1}], "version": "v3"})
    d = write_image_dir(img, tmp_path)
    back = read_image_dir(d)
    assert back == img
    d2 = write_image_dir(back, tmp_path / "again")
    for name in ("meta.json", "pages.bin"):
        assert (d / name).read_bytes() == (d2 / name).read_bytes()
    (d / "pages.bin").write_bytes((d / "pages.bin").read_bytes()[:-1])
    with pytest.raises(BrokenChain):
        read_image_dir(d)


def test_directory_storage(tmp_path):
    storage = DirectoryImageStorage(tmp_path)
    img = image("i1", None, [(1, 1, 0, page(1))])
    storage.put(img)
    assert storage.get("i1") == img
    storage.discard("i1")
    with pytest.raises(BrokenChain):
        storage.get("i1")


def test_release_frees_and_double_release_fails():
    store = PageStore()
    t = store.adopt([page(1), None])
    store.share(t)
    store.release(t)
    assert store.live_pages == 1
    store.release(t)
    assert store.live_pages == 0 and store.live_tables == 0
    with pytest.raises(MemoryError_):
        store.release(t)
    with pytest.raises(MemoryError_):
        store.share(t)


def test_eager_and_independent_copies_count_separately():
    store = PageStore()
    t = store.adopt([page(1), None, page(2)])
    e = store.eager_copy(t)
    i = store.independent_copy(t)
    assert store.counters["copy_bytes"] == 2 * PAGE_SIZE
    assert store.counters["segment_copy_bytes"] == 2 * PAGE_SIZE
    assert store.resolve(e) == store.resolve(i) == store.resolve(t)
    assert not store.shared_page_ids(e) and not store.shared_page_ids(i)


ops = st.lists(st.tuples(st.sampled_from(["share", "write", "release"]), st.integers(0, 7),
                         st.integers(0, 3), st.integers(0, 255)), max_size=60)


@settings(max_examples=80, deadline=None)
@given(ops)
def test_random_share_write_matches_eager_model(seq):
    """Tables under CoW sharing resolve exactly what independent copies would."""
    store = PageStore()
    tables = [store.adopt([page(i), page(i + 1), None, page(i + 2)]) for i in range(2)]
    model = [list(store.resolve(t)) for t in tables]
    cow_breaks = 0
    for op, who, slot, val in seq:
        k = who % len(tables)
        if op == "share" and len(tables) < 8:
            tables.append(store.share(tables[k]))
            model.append(list(model[k]))
        elif op == "write":
            tables[k], broke = store.write(tables[k], slot, bytes([val]) * 8, 100)
            cow_breaks += broke
            old = model[k][slot] or bytes(PAGE_SIZE)
            model[k][slot] = old[:100] + bytes([val]) * 8 + old[108:]
        elif op == "release" and len(tables) > 1:
            store.release(tables.pop(k))
            model.pop(k)
        assert store.audit() == []
    for t, m in zip(tables, model):
        assert list(store.resolve(t)) == m
    assert store.counters["copy_bytes"] == PAGE_SIZE * cow_breaks
    for t in tables:
        store.release(t)
    assert store.live_pages == 0
