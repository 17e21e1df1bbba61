import pytest
from hypothesis import given
from hypothesis import strategies as st

from forkspace.engine import Engine
from forkspace.strategies import (
    ABLATION,
    COW,
    CRIU,
    OVERLAP,
    PARALLEL,
    TCLONE,
    CloneCounts,
    CostModel,
    clone,
    critical_path,
    footprint,
    footprint_breakdown,
    rows_to_csv,
)
from forkspace.workspace import PAGE_SIZE, diff

COUNTS = CloneCounts(n=4, processes=10, managed=5, pages=1000, pages_dumped=1000, vma_shares=80,
                     pages_copied=[1000, 900, 1000, 800])
COST = CostModel(freeze_per_process=1, holder_per_process=2, metadata_per_process=3, restore_per_process=4,
                 namespace_setup=100, page_copy=0.5, page_dump=0.25, vma_share=1)


def test_formulas_by_hand():
    F, H, D = 10, 20, 250
    meta = 3 * 10 * 5
    setup = 100 + 40 + meta
    mem = [500, 450, 500, 400]
    assert critical_path(CRIU, COST, COUNTS).critical_path == F + D + sum(setup + m for m in mem)
    assert critical_path(PARALLEL, COST, COUNTS).critical_path == F + D + setup + 500
    assert critical_path(OVERLAP, COST, COUNTS).critical_path == F + max(D, 500) + setup
    assert critical_path(COW, COST, COUNTS).critical_path == F + max(D, 20) + setup
    r = critical_path(TCLONE, COST, COUNTS)
    assert r.critical_path == F + H + 20 + setup
    assert r.dump_on_path == 0 and r.copied_bytes == 0
    assert critical_path(CRIU, COST, COUNTS).copied_bytes == 3700 * PAGE_SIZE


def test_chromium_scale_ablation_is_strictly_decreasing():
    c = CloneCounts(n=4, processes=168, managed=5, pages=524288, pages_dumped=524288, vma_shares=4 * 2400,
                    pages_copied=[524288] * 4)
    cps = [critical_path(s, CostModel(), c).critical_path for s in ABLATION]
    assert all(a > b for a, b in zip(cps, cps[1:]))


nonneg = st.floats(0, 1e3, allow_nan=False)


@given(st.builds(CostModel, *[nonneg] * 10), st.integers(1, 16), st.integers(1, 200), st.integers(0, 10**6),
       st.integers(0, 10**4))
def test_parallel_and_overlap_never_hurt(cost, n, procs, pages, shares):
    c = CloneCounts(n, procs, n + 1, pages, pages, shares, [pages] * n)
    a, b, o = (critical_path(s, cost, c).critical_path for s in (CRIU, PARALLEL, OVERLAP))
    assert a >= b - 1e-9
    assert b >= o - 1e-9


def test_cost_json_round_trip(tmp_path):
    c = CostModel(page_copy=0.01)
    assert CostModel.from_json(c.to_json()) == c
    (tmp_path / "c.json").write_text('{"probe": 0.5}')
    assert CostModel.load(tmp_path / "c.json").probe == 0.5
    with pytest.raises(ValueError):
        CostModel.from_json({"nope": 1})
    with pytest.raises(ValueError):
        CostModel(page_copy=-1)
    assert c.digest() != CostModel().digest()


@pytest.mark.parametrize("strategy", ABLATION, ids=lambda s: s.name)
def test_every_strategy_yields_identical_branches(small_state, strategy):
    with Engine() as e:
        b = e.load(small_state)
        ref = e.state(b)
        res = clone(e, b, 3, strategy)
        for k in res.branches:
            d = diff(e.state(k), ref)
            assert [x.kind for x in d] == ["connection"]
        assert (res.report.copied_bytes == 0) == strategy.cow_memory
        assert e.audit() == []


def test_footprint_cow_below_eager(small_state):
    sizes = {}
    for s in (CRIU, TCLONE):
        with Engine() as e:
            b = e.load(small_state)
            clone(e, b, 4, s)
            sizes[s.name] = footprint(e)
            fb = footprint_breakdown(e)
            assert fb.total == sizes[s.name] and fb.gui > 0
    assert sizes["tclone"] < sizes["criu"]


def test_rows_to_csv():
    assert rows_to_csv([]) == ""
    assert rows_to_csv([{"a": 1, "b": "x"}]) == "a,b\n1,x\n"
