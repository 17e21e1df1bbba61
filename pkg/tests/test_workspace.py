import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forkspace.workspace import (
    PAGE_SIZE,
    CHROMIUM_SPEC,
    ConnKind,
    Endpoint,
    MemoryClass,
    WorkspaceError,
    WorkspaceSpec,
    build_workspace,
    check,
    chromium_spec,
    diff,
    load_file_manifest,
    validate,
)


def test_minimal_workspace():
    s = build_workspace(WorkspaceSpec(processes=1))
    assert len(s.processes) == 1
    assert s.processes[0].parent_local_pid is None
    assert s.regions == ()
    assert validate(s) == []


def test_chromium_fixture_shape(chromium_state):
    s = chromium_state
    assert len(s.processes) == 168
    anon = sum(r.length for r in s.regions if r.mem_class is MemoryClass.ANONYMOUS)
    assert anon * PAGE_SIZE == 2 << 30
    assert validate(s) == []


def test_build_is_deterministic(small_state):
    from forkspace.traces import SMALL_SPEC

    again = build_workspace(SMALL_SPEC)
    assert again == small_state
    assert not diff(again, small_state)


@pytest.mark.parametrize("spec", [
    WorkspaceSpec(processes=0),
    WorkspaceSpec(processes=2, gui_buffers=[100]),
    WorkspaceSpec(processes=2, file_manifest=[{"path": "/x", "size": 4095}]),
    WorkspaceSpec(processes=2, anon_pages=-1),
])
def test_bad_specs_rejected(spec):
    with pytest.raises(WorkspaceError):
        build_workspace(spec)


def test_spec_json_round_trip(tmp_path):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(CHROMIUM_SPEC.to_json()))
    assert WorkspaceSpec.load(p) == CHROMIUM_SPEC
    assert chromium_spec(processes=10).processes == 10
    with pytest.raises(WorkspaceError):
        WorkspaceSpec.from_json({"processes": 1, "bogus": 2})
    with pytest.raises(WorkspaceError):
        WorkspaceSpec.from_json({"anon_pages": 1})


def test_manifest_loader(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps([{"path": "/a", "size": 8192}]))
    assert load_file_manifest(p) == [{"path": "/a", "size": 8192}]
    with pytest.raises(WorkspaceError):
        load_file_manifest([{"path": "/a"}])


def test_diff_reflexive(small_state):
    assert diff(small_state, small_state).empty


def test_single_page_write_is_one_entry(small_state):
    r = small_state.regions[0]
    pages = list(r.pages)
    i = next(k for k, p in enumerate(pages) if p is not None)
    pages[i] = b"\x01" + pages[i][1:] if pages[i][0] != 1 else b"\x02" + pages[i][1:]
    regions = (replace(r, pages=tuple(pages)),) + small_state.regions[1:]
    d = diff(small_state, replace(small_state, regions=regions))
    assert len(d) == 1
    assert d.entries[0].kind == "page"
    assert d.entries[0].key[:2] == r.key


def test_host_pids_and_namespace_are_identity(small_state):
    moved = replace(
        small_state,
        processes=tuple(p.with_host_pid(p.host_pid + 7) for p in small_state.processes),
        namespace_id="elsewhere",
    )
    assert diff(small_state, moved).empty


def test_validate_catches_violations(small_state):
    procs = list(small_state.processes)
    procs[1] = replace(procs[1], parent_local_pid=None)
    assert any("root" in p for p in validate(replace(small_state, processes=tuple(procs))))

    r = small_state.regions[0]
    bad = replace(r, mem_class=MemoryClass.FILE_BACKED)
    assert validate(replace(small_state, regions=(bad,) + small_state.regions[1:]))

    c = next(c for c in small_state.connections if c.kind is ConnKind.INTERNAL)
    lying = replace(c, remote=Endpoint("8.8.8.8", 53, None))
    conns = tuple(lying if x is c else x for x in small_state.connections)
    assert validate(replace(small_state, connections=conns))
    with pytest.raises(WorkspaceError):
        check(replace(small_state, connections=conns))

    hosts = [p.host_pid for p in small_state.processes]
    assert validate(small_state, live_host_pids=hosts[:1])


def test_region_length_matches_slots(small_state):
    for r in small_state.regions:
        assert len(r.pages) == r.length
        assert (r.mem_class is MemoryClass.FILE_BACKED) == (r.backing_file is not None)


@settings(max_examples=40, deadline=None)
@given(procs=st.integers(1, 40), anon=st.integers(0, 300), seed=st.integers(0, 10_000),
       internal=st.integers(0, 4), external=st.integers(0, 4), touched=st.floats(0.0, 1.0))
def test_generated_workspaces_always_validate(procs, anon, seed, internal, external, touched):
    spec = WorkspaceSpec(processes=procs, tree_seed=seed, anon_pages=anon, shared_pages=anon // 10,
                         file_manifest=[{"path": "/f", "size": 3 * PAGE_SIZE}], file_maps=1,
                         conn_mix={"internal": internal, "external": external},
                         gui_buffers=[PAGE_SIZE], touched_fraction=touched)
    s = build_workspace(spec)
    assert validate(s) == []
    assert sum(r.length for r in s.regions if r.mem_class is MemoryClass.ANONYMOUS) == anon


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_diff_symmetric(small_state, data):
    # mutate a few pages on one side and check both directions name the same locations
    regions = list(small_state.regions)
    for _ in range(data.draw(st.integers(0, 5))):
        i = data.draw(st.integers(0, len(regions) - 1))
        r = regions[i]
        if not r.length:
            continue
        slot = data.draw(st.integers(0, r.length - 1))
        pages = list(r.pages)
        old = pages[slot] or bytes(PAGE_SIZE)
        off = data.draw(st.integers(0, PAGE_SIZE - 1))
        pages[slot] = old[:off] + bytes([data.draw(st.integers(0, 255))]) + old[off + 1:]
        regions[i] = replace(r, pages=tuple(pages))
    other = replace(small_state, regions=tuple(regions))
    assert diff(small_state, other).locations() == diff(other, small_state).locations()
