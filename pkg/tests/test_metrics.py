import math
from collections import defaultdict

import numpy as np
import pytest

from livegroups.channel import ChannelModel
from livegroups.metrics import (
    BoundParams,
    bound_expected_tau,
    bound_tau_with_confidence,
    channel_stats,
    components,
    detection_latency,
    graph_diameter,
    mate_adjacency,
    mate_graph_diameter,
    measure_tau,
    replay,
    summarize,
    tau_histogram,
    tau_values,
)
from livegroups.netsim import SimConfig, run
from livegroups.scenario import GroundTruthGroups, make_breakaway, make_stable_pack, make_static
from livegroups.trace import TraceRecord

LOSSLESS = SimConfig(channel=ChannelModel.lossless())


# -- bounds ------------------------------------------------------------------


def test_expected_tau_examples():
    assert bound_expected_tau(BoundParams(1, 1)) == 1.0
    assert bound_expected_tau(BoundParams(10, 1)) == pytest.approx(33.03, abs=0.005)
    assert bound_expected_tau(BoundParams(10, 2)) == pytest.approx(2 * bound_expected_tau(BoundParams(10, 1)))


def test_confidence_bound_examples():
    assert bound_tau_with_confidence(BoundParams(10, 1, 0.1)) == pytest.approx(46.05, abs=0.005)
    assert bound_tau_with_confidence(BoundParams(10, 1, 1 - 1e-12)) == pytest.approx(10 * math.log(10))
    assert bound_tau_with_confidence(BoundParams(1, 1, 0.5)) == pytest.approx(math.log(2))


@pytest.mark.parametrize("n,delta,eps", [(10, 1, 0.1), (7, 3, 0.01), (12, 2, 0.5)])
def test_doubling_diameter_adds_log2_term(n, delta, eps):
    one = bound_tau_with_confidence(BoundParams(n, delta, eps))
    two = bound_tau_with_confidence(BoundParams(n, 2 * delta, eps))
    assert two - 2 * one == pytest.approx(n * 2 * delta * math.log(2))


def test_log10_variant_is_smaller():
    p = BoundParams(10, 1, 0.1)
    assert bound_expected_tau(p, math.log10) == pytest.approx(20.0)
    assert bound_tau_with_confidence(p, math.log10) == pytest.approx(20.0)


@pytest.mark.parametrize("args", [(0, 1, 0.1), (1, 0, 0.1), (10, 1, 0.0), (10, 1, 1.0), (10, 1, -2)])
def test_bound_params_rejected(args):
    with pytest.raises(ValueError):
        BoundParams(*args)


# -- mate graph --------------------------------------------------------------


def test_diameter_complete_and_path():
    complete = [{j: 3 for j in range(5) if j != i} for i in range(5)]
    assert mate_graph_diameter(complete, 2) == 1
    path = [{j: 3 for j in (i - 1, i + 1) if 0 <= j < 12} for i in range(12)]
    assert mate_graph_diameter(path, 2) == 11


def test_weak_links_are_not_mate_edges():
    levels = [{1: 2}, {0: 2, 2: 3}, {1: 3}]
    adj = mate_adjacency(levels, 2)
    assert adj == [set(), {2}, {1}]
    assert components(adj) == (frozenset({0}), frozenset({1, 2}))


def test_diameter_is_max_over_components():
    adj = [{1}, {0, 2}, {1}, {4}, {3}]
    assert graph_diameter(adj) == 2
    assert graph_diameter([set()]) == 0


def test_stable_pack_diameter_in_paper_range():
    tr = run(SimConfig(seed=0), make_stable_pack(duration_s=15))
    assert 1 <= mate_graph_diameter(tr.final_levels, 2) <= 2


# -- convergence -------------------------------------------------------------


def test_single_node_converges_instantly():
    sc = make_static(1, 0.0, duration_s=10)
    tr = run(LOSSLESS, sc)
    epochs = [e for e in measure_tau(tr) if e.complete]
    assert len(epochs) > 20
    assert all(e.converged and e.tau == 0 for e in epochs)


def _oracle_taus(records, n, group, mate_threshold=2, M=3):
    """Set-based recount of the per-epoch message counter."""
    level = defaultdict(int)
    known = [{v} for v in range(n)]
    ep = [0] * n
    K, tau = 0, 0

    def good():
        return all(ep[v] == K and known[v] == group for v in range(n))

    conv = good()
    out = []
    for r in records:
        if r.kind == "level_change":
            level[r.node, r.peer] = r.level
        elif r.kind == "beacon_tx" and r.epoch > K:
            out.append((K, tau, conv))
            K, tau = r.epoch, 0
            conv = good()
        elif r.kind == "tx" and not conv:
            tau += 1
        elif r.kind in ("rx", "beacon_rx"):
            v = r.node
            if r.epoch > ep[v]:
                ep[v], known[v] = r.epoch, {v}
            if r.kind == "rx" and r.epoch == ep[v] and level[v, r.peer] > mate_threshold:
                known[v] |= {i for i, x in enumerate(r.vector) if x == M}
            if not conv and good():
                conv = True
    out.append((K, tau, conv))
    return out


def test_path_graph_tau_matches_independent_count():
    sc = make_static(4, 12.0, duration_s=30)
    tr = run(SimConfig(seed=6, channel=ChannelModel.lossless()), sc)
    assert mate_graph_diameter(tr.final_levels, 2) == 3
    got = [(e.epoch, e.tau, e.converged) for e in measure_tau(tr)]
    assert got == _oracle_taus(tr.records, 4, {0, 1, 2, 3})
    assert sum(c for _, _, c in got) > 50


def test_measure_tau_replay_deterministic():
    tr = run(SimConfig(seed=2), make_static(5, 1.0, duration_s=5))
    assert measure_tau(tr) == measure_tau(tr)


def test_truncated_epoch_flagged():
    tr = run(LOSSLESS, make_static(10, 0.5, duration_s=10))
    cut = next(r.time_ms for r in tr.records if r.kind == "beacon_tx" and r.epoch == 12) + 0.5
    recs = [r for r in tr.records if r.time_ms <= cut]
    res = replay(recs, 10, tr.scenario.scale, tr.scenario.truth(), cut, 400.0)
    last = res.epochs[-1]
    assert last.epoch == 12 and not last.converged and not last.complete
    assert all(e.complete for e in res.epochs[:-1])
    summary = summarize(res, recs, 10, cut, 2)
    assert summary["epochs"] == len(res.epochs) - 1


def test_static_lossless_tau_dominated_at_both_confidences():
    tr = run(LOSSLESS, make_static(10, 0.5, duration_s=120))
    epochs = measure_tau(tr)
    taus = tau_values(epochs, start_ms=2000)
    assert len(taus) > 250
    assert np.mean(taus) < bound_expected_tau(BoundParams(10, 1))
    for eps in (0.1, 0.01):
        assert np.quantile(taus, 1 - eps) < bound_tau_with_confidence(BoundParams(10, 1, eps))


# -- detection ---------------------------------------------------------------


def test_static_has_no_detection_events():
    tr = run(LOSSLESS, make_static(6, 1.0, duration_s=5))
    assert detection_latency(tr).events == []


def test_split_then_merge_both_reported():
    sc = make_breakaway()
    tr = run(SimConfig(seed=1), sc)
    report = detection_latency(tr, sc.truth())
    assert [e.kind for e in report.events] == ["breakaway", "merge"]
    for e in report.events:
        assert not e.missed and e.latency_s >= 0
        assert e.detected_ms == pytest.approx(e.event_ms + 1000 * e.latency_s)


def test_missed_event_reported():
    # the groups merge in truth but no packet ever crosses between them
    truth = GroundTruthGroups([(0.0, (frozenset({0}), frozenset({1}))), (50.0, (frozenset({0, 1}),))])
    recs = [TraceRecord(10.0, "tx", 0, None, 0, None, None, (3, 0), None)]
    res = replay(recs, 2, make_static(2, 1.0).scale, truth, 100.0, 400.0)
    (event,) = res.detection.events
    assert event.missed and event.latency_s is None and event.kind == "merge"


# -- summaries ---------------------------------------------------------------


def test_channel_stats_accounting():
    recs = [
        TraceRecord(0.0, "tx", 0), TraceRecord(4.0, "rx", 1, 0), TraceRecord(4.0, "loss", 2, 0),
        TraceRecord(5.0, "tx", 1), TraceRecord(9.0, "collision", 0, 1), TraceRecord(9.0, "rx", 2, 1),
        TraceRecord(9.0, "loss", 0, 3),  # beacon loss from sink radio 3
    ]
    st = channel_stats(recs, 3, 1000.0)
    assert st["tx_total"] == 2 and st["rx_total"] == 2
    assert st["loss_rate"] == pytest.approx(0.5)
    assert st["rx_rate_per_pair"] == pytest.approx(2 / 6)


def test_histogram_bins():
    assert tau_histogram([0, 2, 2, 5]) == [(0, 1), (1, 0), (2, 2), (3, 0), (4, 0), (5, 1)]
    assert tau_histogram([]) == []


def test_summary_reports_both_log_bases():
    tr = run(LOSSLESS, make_static(3, 1.0, duration_s=5))
    res = replay(tr.records, 3, tr.scenario.scale, tr.scenario.truth(), tr.duration_ms, 400.0)
    s = summarize(res, tr.records, 3, tr.duration_ms, 2)
    b = s["bounds"]
    assert b["expected_tau_ln"] > b["expected_tau_log10"]
    assert s["delta_c_final"] == 1 and s["epochs_converged"] <= s["epochs"]
