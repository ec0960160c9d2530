import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xflow import analyzer as an
from xflow.data_folder import LedgerFile, LedgerRow, format_ledger, parse_ledger

IMAGES = {0: "/app/main", 1: "/lib/libA.so", 2: "/lib/libB.so", 3: "/lib/libpthread.so"}
EXPORTS = {"/lib/libA.so": {"fa", "ga"}, "/lib/libB.so": {"fb"}, "/lib/libpthread.so": {"pthread_cond_wait"}}


def resolver(path):
    return frozenset(EXPORTS.get(path, ()))


def row(sid, caller, sym, count, attributed, callee=-1, raw=None, kind="plt-lazy"):
    return LedgerRow(sid, caller, sym, kind, count, count, attributed if raw is None else raw, attributed, callee)


def ledger(rows, total=0, ordinal=0, group=0, pid=1):
    return LedgerFile(ordinal, group, 1000, total, dict(IMAGES), list(rows), pid=pid)


def merge(ledgers, **kw):
    return an.merge(ledgers, resolver=resolver, **kw)


def test_component_view_example():
    agg = merge([ledger([row(0, 0, "fa", 3, 30, 1), row(1, 0, "fb", 2, 20, 2)], total=100)])
    view = an.component_view(agg, "main")
    got = {r.name: (r.cycles, r.percent) for r in view.rows}
    assert got == {"Self": (50, 50.0), "Wait": (0, 0.0), "libA.so": (30, 30.0), "libB.so": (20, 20.0)}
    assert view.total_cycles == 100


def test_all_time_in_one_callee():
    agg = merge([ledger([row(0, 0, "fa", 1, 100, 1)], total=100)])
    got = {r.name: r.percent for r in an.component_view(agg, "/app/main").rows}
    assert got == {"Self": 0.0, "Wait": 0.0, "libA.so": 100.0}


def test_wait_is_separated():
    agg = merge([ledger([row(0, 0, "pthread_cond_wait", 1, 40, 3), row(1, 0, "fa", 1, 10, 1)], total=100)])
    view = an.component_view(agg, "main")
    names = [r.name for r in view.rows]
    assert "libpthread.so" not in names
    assert view.rows[1].name == "Wait" and view.rows[1].cycles == 40
    assert view.rows[0].cycles == 50


def test_custom_wait_set():
    agg = merge([ledger([row(0, 0, "fa", 1, 40, 1)], total=100)], wait_apis=["fa"])
    assert an.component_view(agg, "main").rows[1].cycles == 40


def test_self_clamped_with_diagnostic():
    agg = merge([ledger([row(0, 0, "fa", 1, 150, 1)], total=100)])
    view = an.component_view(agg, "main")
    assert view.rows[0].cycles == 0
    assert view.diagnostics and "clamped" in view.diagnostics[0]
    assert view.total_cycles == 150 and view.measured_total == 100


def test_library_component_total_is_its_owned_time():
    # libA's own outgoing call to libB counts against libA's total (the time callers spent in libA)
    rows = [row(0, 0, "fa", 1, 80, 1), row(1, 1, "fb", 1, 30, 2)]
    agg = merge([ledger(rows, total=200)])
    view = an.component_view(agg, "libA.so")
    assert view.total_cycles == 80
    assert {r.name: r.cycles for r in view.rows} == {"Self": 50, "Wait": 0, "libB.so": 30}


def test_api_view_example():
    agg = merge([ledger([row(0, 0, "fa", 1, 900, 1), row(1, 0, "ga", 1, 100, 1)], total=2000)])
    view = an.api_view(agg, "libA.so")
    assert [(r.name, r.percent) for r in view.rows] == [("fa", 90.0), ("ga", 10.0)]


def test_api_view_sums_callers_but_aggregate_keeps_them_apart():
    agg = merge([ledger([row(0, 0, "fb", 5, 50, 2), row(1, 1, "fb", 7, 70, 2)], total=500)])
    assert [(r.name, r.count) for r in an.api_view(agg, "libB.so").rows] == [("fb", 12)]
    assert agg.sites[("/app/main", "fb", "plt-lazy")].count == 5
    assert agg.sites[("/lib/libA.so", "fb", "plt-lazy")].count == 7


def test_empty_library_view():
    agg = merge([ledger([row(0, 0, "fa", 1, 10, 1)], total=50)])
    view = an.api_view(agg, "libB.so")
    assert view.rows == [] and view.diagnostics


def test_unknown_component_lists_known():
    agg = merge([ledger([], total=1)])
    with pytest.raises(an.AnalysisError, match="libA.so"):
        an.component_view(agg, "nope")


def test_owner_fallback_uses_exporting_image():
    agg = merge([ledger([row(0, 0, "fb", 1, 10, -1)], total=50)])
    assert agg.owner(("/app/main", "fb", "plt-lazy")) == "/lib/libB.so"
    agg = merge([ledger([row(0, 0, "mystery", 1, 10, -1)], total=50)])
    names = [r.name for r in an.component_view(agg, "main").rows]
    assert an.UNRESOLVED in names


def test_merge_sums_and_keeps_header_only_threads():
    a = ledger([row(0, 0, "fa", 3, 30, 1)], total=100, ordinal=0)
    b = ledger([row(0, 0, "fa", 4, 40, 1)], total=80, ordinal=1, group=7)
    c = ledger([], total=5, ordinal=2, group=7)
    agg = merge([a, b, c])
    assert agg.sites[("/app/main", "fa", "plt-lazy")].count == 7
    assert len(agg.threads) == 3
    assert agg.process_total == 100


def test_ids_unify_by_path_across_threads():
    a = ledger([row(0, 0, "fa", 1, 10, 1)])
    b = LedgerFile(1, 0, 1000, 0, {0: "/app/main", 5: "/lib/libA.so"}, [row(9, 0, "fa", 2, 20, 5)], pid=1)
    agg = merge([a, b])
    assert agg.sites[("/app/main", "fa", "plt-lazy")].count == 3
    assert agg.owner(("/app/main", "fa", "plt-lazy")) == "/lib/libA.so"


def test_imbalance_single_group():
    agg = merge([ledger([], total=100)])
    rep = an.imbalance_report(agg)
    assert rep.ratio == 1.0 and not rep.flagged


def test_imbalance_two_groups_and_wait_excluded():
    threads = [ledger([], total=1000, ordinal=0, group=0)]
    threads += [ledger([], total=1600, ordinal=i, group=0xA) for i in (1, 2)]
    # group B spends most of its life waiting
    threads += [ledger([row(0, 0, "pthread_cond_wait", 1, 1400, 3, raw=1500)], total=1600, ordinal=i, group=0xB)
                for i in (3, 4)]
    rep = an.imbalance_report(merge(threads))
    assert rep.excluded_main
    assert [g.group for g in rep.groups] == ["0xa", "0xb"]
    assert rep.ratio == pytest.approx(16.0)
    assert rep.flagged
    assert not an.imbalance_report(merge(threads), threshold=20).flagged


def test_imbalance_equal_groups():
    threads = [ledger([], total=1000, ordinal=i, group=1 + i % 2) for i in range(4)]
    rep = an.imbalance_report(merge(threads))
    assert 1.0 <= rep.ratio <= 1.05 and not rep.flagged


def test_percentages_largest_remainder():
    assert an.percentages([1, 1, 1], 3) == [33.34, 33.33, 33.33]
    assert an.percentages([0, 0], 0) == [0.0, 0.0]


def test_render_is_deterministic_and_json_round_trips():
    agg = merge([ledger([row(0, 0, "fa", 3, 30, 1), row(1, 0, "fb", 2, 20, 2)], total=100)])
    views = [an.component_view(agg, "main"), an.api_view(agg, "libA.so")]
    rep = an.imbalance_report(agg)
    assert an.render_text(agg, views, rep) == an.render_text(agg, views, rep)
    text = an.render_json(agg, views, rep, pid=1)
    assert text == an.render_json(agg, views, rep, pid=1)
    doc = json.loads(text)
    assert doc["schema"] == an.REPORT_SCHEMA
    assert doc["views"][0]["rows"][0]["seconds"] == pytest.approx(50 / 1000)
    back_views, back_rep = an.parse_report(text)
    assert back_views == views and back_rep == rep
    table = an.render_view_text(views[0], agg.hz)
    assert "Self" in table and "libB.so" in table


def test_reads_through_the_file_format():
    led = ledger([row(0, 0, "fa", 3, 30, 1)], total=100)
    again = parse_ledger(format_ledger(led))
    again.pid = 1
    assert merge([again]).sites == merge([led]).sites


# ---- properties ----

SYMS = ["fa", "ga", "fb", "pthread_cond_wait", "mystery"]


@st.composite
def ledger_sets(draw):
    n = draw(st.integers(1, 5))
    out = []
    for i in range(n):
        rows = []
        for sid in range(draw(st.integers(0, 6))):
            count = draw(st.integers(1, 10**6))
            raw = draw(st.integers(0, 10**12))
            attr = draw(st.integers(0, raw))
            rows.append(LedgerRow(sid, draw(st.sampled_from([0, 1, 2])), draw(st.sampled_from(SYMS)),
                                  draw(st.sampled_from(["plt-lazy", "dyn-got"])), count, count, raw, attr,
                                  draw(st.sampled_from([-1, 1, 2, 3]))))
        out.append(LedgerFile(i, draw(st.sampled_from([0, 5, 9])), 10**9, draw(st.integers(0, 10**13)),
                              dict(IMAGES), rows, pid=1))
    return out


@settings(max_examples=150, deadline=None)
@given(ledger_sets())
def test_views_conserve_cycles(ledgers):
    agg = merge(ledgers)
    for comp in agg.images:
        view = an.component_view(agg, comp)
        assert sum(r.cycles for r in view.rows) == view.total_cycles
        if not view.diagnostics:
            assert view.total_cycles == view.measured_total
        if view.total_cycles:
            assert abs(sum(r.percent for r in view.rows) - 100) <= 0.1
        api = an.api_view(agg, comp)
        assert sum(r.cycles for r in api.rows) == api.total_cycles
        if api.total_cycles:
            assert abs(sum(r.percent for r in api.rows) - 100) <= 0.1


@settings(max_examples=150, deadline=None)
@given(ledger_sets(), st.randoms(use_true_random=False))
def test_merge_is_order_independent(ledgers, rnd):
    base = merge(ledgers)
    shuffled = list(ledgers)
    rnd.shuffle(shuffled)
    assert merge(shuffled) == base


@settings(max_examples=100, deadline=None)
@given(ledger_sets())
def test_aggregate_equals_column_sums(ledgers):
    agg = merge(ledgers)
    assert sum(t.count for t in agg.sites.values()) == sum(r.count for l in ledgers for r in l.rows)
    assert sum(t.raw_cycles for t in agg.sites.values()) == sum(r.raw_cycles for l in ledgers for r in l.rows)
    assert sum(t.attributed_cycles for t in agg.sites.values()) == sum(
        r.attributed_cycles for l in ledgers for r in l.rows)


def test_default_pid_prefers_run_metadata(tmp_path):
    from xflow.data_folder import write_ledger

    write_ledger(ledger([], total=10), tmp_path, pid=11)
    write_ledger(ledger([], total=999), tmp_path, pid=22)
    assert an.default_pid(tmp_path) == 22
    (tmp_path / "xflow.run").write_text(json.dumps({"pid": 11}))
    assert an.default_pid(tmp_path) == 11
