import hashlib
import math
from collections import Counter, defaultdict

import pytest
from hypothesis import given
from hypothesis import strategies as st

from livegroups.channel import ChannelModel, Outcome, deliver
from livegroups.consensus import mates_of
from livegroups.metrics import channel_stats, mate_graph_diameter
from livegroups.netsim import ConfigError, SimConfig, apply_overrides, emit_beacon, run
from livegroups.scenario import Scenario, SinkSpec, make_stable_pack, make_static
from livegroups.trace import trace_bytes

LOSSLESS = ChannelModel.lossless()


def static_line(xs, sinks=(), duration_s=10.0):
    return Scenario(name="line", duration_s=duration_s, tracks=[[(0.0, x, 0.0)] for x in xs],
                    sinks=list(sinks))


# -- channel -----------------------------------------------------------------


def test_close_pair_delivered():
    out, ed = deliver(ChannelModel(), 0.3, False, u_loss=0.99, noise=0.0)
    assert out is Outcome.RECEIVED and ed == 28


def test_overlap_collides():
    assert deliver(ChannelModel(), 5.0, True, 0.99, 0.0) == (Outcome.COLLIDED, None)


def test_beyond_range_lost():
    assert deliver(LOSSLESS, 50.01, False, 0.99, 0.0) == (Outcome.LOST, None)
    assert deliver(LOSSLESS, 49.9, False, 0.0, 0.0)[0] is Outcome.RECEIVED


def test_extra_loss_applies():
    assert deliver(LOSSLESS, 5.0, False, 0.3, 0.0, extra_loss=0.5)[0] is Outcome.LOST


def test_calibration_anchor():
    ch = ChannelModel()
    assert ch.expected_ed(ch.distance_for_ed(8)) == pytest.approx(8)
    assert 14 < ch.distance_for_ed(8) < 16 and 21 < ch.distance_for_ed(5) < 24
    moved = ch.anchored(20.0, 8.0)
    assert moved.expected_ed(20.0) == pytest.approx(8.0)


@given(st.floats(0, 60), st.floats(0, 60))
def test_ed_and_loss_monotone_in_distance(a, b):
    ch = ChannelModel()
    near, far = min(a, b), max(a, b)
    assert ch.expected_ed(near) >= ch.expected_ed(far)
    assert ch.p_loss(near) <= ch.p_loss(far)


def test_loss_floor_close_in():
    ch = ChannelModel()
    assert ch.p_loss(1.0) == pytest.approx(0.22, abs=1e-4)
    assert ch.p_loss(60.0) == 1.0


def test_ed_clipped():
    ch = ChannelModel(shadow_sigma=10)
    assert ch.draw_ed(0.1, 100.0) == ch.ed_max and ch.draw_ed(1000.0, -100.0) == 0


# -- config ------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(backoff_ms=0), dict(epoch_period_ms=70), dict(airtime_ms=0), dict(payload_loss_extra=1.5),
     dict(seed=-1)],
)
def test_config_rejected(kw):
    with pytest.raises(ConfigError):
        SimConfig(**kw)


def test_config_n_nodes_must_match():
    with pytest.raises(ConfigError):
        run(SimConfig(n_nodes=3), make_static(2, 1.0))


def test_overrides():
    cfg, sc = apply_overrides(SimConfig(), make_static(2, 1.0), {
        "epoch_period_ms": "500", "channel.loss_floor": "0.1", "estimator.W1": "4",
        "consensus.mate_threshold": "1", "seed": 9,
    })
    assert (cfg.epoch_period_ms, cfg.channel.loss_floor, cfg.seed) == (500.0, 0.1, 9)
    assert sc.estimator.W1 == 4 and sc.scale.mate_threshold == 1
    for bad in ({"nope": 1}, {"radio.x": 1}, {"channel.nope": 1}, {"estimator.th30": "99"}):
        with pytest.raises(ConfigError):
            apply_overrides(SimConfig(), make_static(2, 1.0), bad)


def test_config_dict_round_trip():
    cfg = SimConfig(seed=5, channel=ChannelModel(loss_floor=0.1))
    assert SimConfig.from_dict(cfg.to_dict()) == cfg


# -- beacons -----------------------------------------------------------------


def test_emit_beacon_epoch():
    assert emit_beacon(SinkSpec(attach=(0,)), 1200.0, 400.0).epoch == 3
    assert emit_beacon(SinkSpec(attach=(0,), phase_ms=50), 1250.0, 400.0).epoch == 3
    with pytest.raises(ValueError):
        emit_beacon(SinkSpec(attach=(0,)), 1300.0, 400.0)


def test_two_sinks_reset_once_per_epoch():
    sc = static_line([0, 1, 2, 3, 4], sinks=[SinkSpec(attach=(0, 1, 2, 3, 4)), SinkSpec(attach=(4,))])
    tr = run(SimConfig(seed=2, channel=LOSSLESS), sc)
    beacon_tx = Counter(r.epoch for r in tr.records if r.kind == "beacon_tx")
    assert beacon_tx[3] == 2
    changes = Counter((r.node, r.epoch) for r in tr.records if r.kind == "epoch_change")
    assert max(changes.values()) == 1
    dup = Counter((r.node, r.epoch) for r in tr.records if r.kind == "beacon_rx")
    assert max(dup.values()) == 2


def test_out_of_range_subgroup_advances_by_data():
    # sink at -10 m reaches nodes 0..2 only; 3..5 learn epochs hop by hop
    xs = [0, 15, 30, 45, 60, 75]
    sc = static_line(xs, sinks=[SinkSpec(attach=(0,), behind_m=10.0)])
    tr = run(SimConfig(seed=4, channel=LOSSLESS), sc)
    heard = {r.node for r in tr.records if r.kind == "beacon_rx"}
    assert heard == {0, 1, 2}
    far = [r for r in tr.records if r.kind == "epoch_change" and r.node >= 3]
    assert far and all(r.peer < 6 for r in far)
    last_k = max(r.epoch for r in tr.records if r.kind == "beacon_tx")
    assert all(tr.final_states[v].epoch >= last_k - 1 for v in (3, 4, 5))


# -- the medium --------------------------------------------------------------


def test_solo_node_rate():
    tr = run(SimConfig(seed=1), make_static(1, 0.0, with_sink=False, duration_s=120))
    rx = [r for r in tr.records if r.kind in ("rx", "collision", "loss")]
    assert rx == []
    n_tx = sum(r.kind == "tx" for r in tr.records)
    # mean cycle: uniform (0, T] backoff plus airtime
    expected = 120_000 / (70 / 2 + 4)
    assert n_tx == pytest.approx(expected, rel=0.03)


def test_static_ten_rate_window():
    sc = make_static(10, 0.5, duration_s=30)
    tr = run(*apply_overrides(SimConfig(seed=3), sc, sc.config))
    stats = channel_stats(tr.records, 10, tr.duration_ms)
    assert 1000 / 70 * 0.5 <= stats["tx_rate_min"] <= stats["tx_rate_max"] <= 1000 / 70
    assert 15 * 0.7 <= stats["rx_rate_per_pair"] <= 15 * 1.3


def test_deterministic_and_seed_sensitive():
    sc = make_static(6, 3.0, duration_s=10)

    def digest(seed):
        tr = run(SimConfig(seed=seed), sc)
        return hashlib.sha256(trace_bytes(tr.records, tr.meta())).hexdigest()

    assert digest(11) == digest(11)
    assert digest(11) != digest(12)


@pytest.fixture(scope="module")
def spread_run():
    # 10 nodes, 6 m apart: the end pair (54 m) is out of range, nearer ones are on the loss ramp
    sc = static_line([6.0 * i for i in range(10)], sinks=[SinkSpec(attach=tuple(range(10)))])
    return run(SimConfig(seed=21), sc), sc


def test_loss_accounting(spread_run):
    tr, sc = spread_run
    pos = sc.positions(0.0)
    sink_pos = sc.sink_positions(0.0)
    outcomes = defaultdict(int)
    for r in tr.records:
        if r.kind in ("rx", "beacon_rx", "loss", "collision"):
            outcomes[r.peer, round(r.time_ms - 4.0, 3)] += 1
    for r in tr.records:
        if r.kind not in ("tx", "beacon_tx"):
            continue
        n = sc.n_nodes
        src = pos[r.node] if r.node < n else sink_pos[r.node - n]
        in_range = sum(1 for v in range(n) if v != r.node and math.dist(src, pos[v]) <= 50.0)
        if r.time_ms + 4.0 <= tr.duration_ms:
            assert outcomes[r.node, r.time_ms] == in_range


def test_no_overlapping_successful_receptions(spread_run):
    tr, _ = spread_run
    per_node = defaultdict(list)
    for r in tr.records:
        if r.kind in ("rx", "beacon_rx"):
            per_node[r.node].append(r.time_ms)
    for times in per_node.values():
        gaps = [b - a for a, b in zip(times, times[1:])]
        assert min(gaps) >= 4.0 - 1e-6


def test_receptions_are_causal(spread_run):
    tr, _ = spread_run
    sent = {}
    for r in tr.records:
        if r.kind == "tx":
            sent[r.node, r.time_ms] = r.vector
        elif r.kind == "rx":
            assert sent[r.peer, round(r.time_ms - 4.0, 3)] == r.vector


def test_trace_time_ordered(spread_run):
    tr, _ = spread_run
    times = [r.time_ms for r in tr.records]
    assert times == sorted(times)


def test_hidden_terminal_collisions():
    tr = run(SimConfig(seed=5, channel=LOSSLESS), static_line([0, 45, 90], duration_s=20))
    coll = Counter(r.node for r in tr.records if r.kind == "collision")
    assert coll[1] > 0
    assert coll[0] == coll[2] == 0


def test_bench_scenario_has_no_background_loss():
    sc = make_static(4, 1.0, duration_s=5)
    cfg, _ = apply_overrides(SimConfig(), sc, sc.config)
    assert cfg.channel.loss_floor == 0.0
    assert make_static(4, 1.0, loss_floor=None).config == {}


def test_stable_pack_loss_near_calibration():
    tr = run(SimConfig(seed=0), make_stable_pack(duration_s=60))
    loss = channel_stats(tr.records, 10, tr.duration_ms)["loss_rate"]
    assert 0.17 <= loss <= 0.27


def test_line_of_12_mate_graph_is_a_path():
    # channel anchored so 20 m sits on th20, no noise: 18 m neighbours are mates
    ch = ChannelModel.lossless(shadow_sigma=0.0).anchored(20.0, 8.0)
    tr = run(SimConfig(seed=8, channel=ch), make_static(12, 18, with_sink=False, duration_s=10))
    assert mate_graph_diameter(tr.final_levels, 2) == 11
    assert all(mates_of(s) == frozenset(range(12)) for s in tr.final_states)
