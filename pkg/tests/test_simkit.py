"""Simulator correctness: determinism, conservation laws, analytic anchors."""

import json
import math
import statistics

import numpy as np
import pytest

from agectl import analytics, simkit
from agectl.simkit import (
    ConfigError,
    CrossTraffic,
    QueueNetwork,
    ServiceSpec,
    accepted_resets,
    age_time_average,
    jain_index,
    run_closed_loop,
    run_fixed_rate,
    substream_seed,
    sweep_lambda,
)

MM1 = QueueNetwork(forward=(ServiceSpec("exp", 1.0),))
TANDEM = QueueNetwork(forward=(ServiceSpec("exp", 1.0), ServiceSpec("exp", 1.0)))


# -- fairness index -------------------------------------------------------------


def test_jain_equal_values():
    assert jain_index([3.0, 3.0, 3.0, 3.0]) == pytest.approx(1.0)


def test_jain_single_nonzero():
    for n in (2, 5, 9):
        values = [0.0] * (n - 1) + [7.0]
        assert jain_index(values) == pytest.approx(1.0 / n)


def test_jain_hand_value():
    assert jain_index([1.0, 2.0, 3.0]) == pytest.approx(6.0 / 7.0)


def test_jain_errors():
    with pytest.raises(ValueError):
        jain_index([])
    with pytest.raises(ValueError):
        jain_index([0.0, 0.0])
    with pytest.raises(ValueError):
        jain_index([1.0, -1.0])


# -- metric helpers --------------------------------------------------------------


def test_age_time_average_hand_case():
    # resets at t=1 (gen 0.5) and t=2 (gen 1.8): age runs 0.5..1.5 then 0.2..1.2
    gen = [0.5, 1.8]
    dlv = [1.0, 2.0]
    got = age_time_average(gen, dlv, 0.0, 3.0)
    assert got == pytest.approx((1.0 * 1.0 + 0.7 * 1.0) / 2.0)


def test_age_time_average_empty_window():
    assert math.isnan(age_time_average([], [], 0.0, 1.0))
    assert math.isnan(age_time_average([0.0], [5.0], 0.0, 1.0))


def test_accepted_resets_filters_stale():
    seqs = [1, 3, 2, 5, 4]
    gen = [0.1, 0.3, 0.2, 0.5, 0.4]
    dlv = [1.0, 2.0, 3.0, 4.0, 5.0]
    g, d = accepted_resets(seqs, gen, dlv)
    assert list(d) == [1.0, 2.0, 4.0]
    assert list(g) == [0.1, 0.3, 0.5]


def test_substream_seed_stability():
    # derived seeds must be process-independent constants
    assert substream_seed(42, "arrivals") == substream_seed(42, "arrivals")
    assert substream_seed(42, "arrivals") != substream_seed(42, "service/0")
    assert substream_seed(1, "x") != substream_seed(2, "x")


# -- open loop -------------------------------------------------------------------


def test_deterministic_service_periodic_ideal():
    # service-synchronized periodic feed: every update ages exactly one
    # service time at delivery, so the sawtooth averages 1.5x service
    net = QueueNetwork(forward=(ServiceSpec("det", 2.0),))  # service 0.5 s
    m = run_fixed_rate(net, 2.0, "periodic", duration=1000.0, seed=0)
    assert m.avg_age == pytest.approx(1.5 * 0.5, rel=1e-9)
    assert m.avg_backlog_per_node[0] == pytest.approx(1.0, rel=1e-9)
    assert m.unstable  # critically loaded: the flag fires at rate >= capacity


def test_mm1_matches_analytic_within_two_percent():
    lam = 0.53
    m = run_fixed_rate(MM1, lam, "poisson", duration=4e5 / lam, seed=7)
    assert m.delivered >= 3e5
    assert m.avg_age == pytest.approx(analytics.aoi_mm1(lam, 1.0), rel=0.02)
    # mean number in system while we are at it (M/M/1: rho/(1-rho))
    assert m.avg_backlog_per_node[0] == pytest.approx(lam / (1 - lam), rel=0.05)
    assert m.avg_system_time == pytest.approx(1.0 / (1 - lam), rel=0.05)


def test_tandem_matches_analytic():
    lam = 0.5
    m = run_fixed_rate(TANDEM, lam, "poisson", duration=4e5 / lam, seed=11)
    assert m.avg_age == pytest.approx(analytics.aoi_tandem(lam, 1.0, 1.0), rel=0.02)


def test_deterministic_replay_byte_identical():
    net = QueueNetwork(
        forward=(ServiceSpec("exp", 1.0), ServiceSpec("exp", 2.0)),
        cross_traffic=(CrossTraffic(entry=0, rate_bps=100_000, packet_bytes=500),),
    )
    a = run_fixed_rate(net, 0.4, "poisson", duration=5000.0, seed=123)
    b = run_fixed_rate(net, 0.4, "poisson", duration=5000.0, seed=123)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    c = run_fixed_rate(net, 0.4, "poisson", duration=5000.0, seed=124)
    assert a.avg_age != c.avg_age


def test_flow_conservation():
    m = run_fixed_rate(TANDEM, 0.5, "poisson", duration=20_000.0, seed=3)
    # every delivered update passed both nodes; in-flight remainder at the
    # horizon accounts for any difference
    assert m.node_departs[0] >= m.node_departs[1] >= m.delivered * 0.999
    assert 0 <= m.node_departs[0] - m.node_departs[1] <= 5


def test_littles_law_over_seeds():
    # B = throughput * mean time in node, averaged over independent runs;
    # the residual is edge noise centered at zero (3 sigma check)
    diffs = []
    for seed in range(20):
        m = run_fixed_rate(MM1, 0.5, "poisson", duration=40_000.0, seed=seed, warmup_frac=0.0)
        window = m.duration
        little_backlog = m.node_time_in_system_sum[0] / window
        diffs.append(m.avg_backlog_per_node[0] - little_backlog)
    mean = statistics.mean(diffs)
    sem = statistics.stdev(diffs) / math.sqrt(len(diffs))
    assert abs(mean) <= 3.0 * sem + 1e-4


def test_unstable_load_flagged_but_reported():
    m = run_fixed_rate(MM1, 1.2, "poisson", duration=2000.0, seed=5)
    assert m.unstable
    assert math.isfinite(m.avg_age)
    stable = run_fixed_rate(MM1, 0.5, "poisson", duration=2000.0, seed=5)
    assert not stable.unstable
    assert m.avg_age > stable.avg_age


def test_cross_traffic_adds_backlog():
    quiet = run_fixed_rate(MM1, 0.3, "poisson", duration=30_000.0, seed=9)
    crossed_net = QueueNetwork(
        forward=(ServiceSpec("exp", 1.0),),
        cross_traffic=(CrossTraffic(entry=0, rate_bps=8_320_000 // 2, packet_bytes=1040),),
    )
    # cross flow offers 0.5 packets/s of extra load on a 1 pkt/s server
    crossed = run_fixed_rate(crossed_net, 0.3, "poisson", duration=30_000.0, seed=9)
    assert crossed.avg_backlog_per_node[0] > quiet.avg_backlog_per_node[0]
    assert crossed.avg_age > quiet.avg_age


def test_single_source_throughput_equals_rate():
    m = run_fixed_rate(MM1, 0.5, "poisson", duration=50_000.0, seed=21)
    assert m.throughput_updates == pytest.approx(0.5, rel=0.05)


def test_link_service_scales_with_bytes():
    # 1040-byte updates over 1 Mbps: 8.32 ms per hop, deterministic
    net = QueueNetwork(forward=(ServiceSpec("link", 1_000_000.0),))
    m = run_fixed_rate(net, 10.0, "poisson", duration=2000.0, seed=2)
    assert m.avg_system_time >= 0.00832
    assert m.avg_system_time == pytest.approx(0.00832 / (1 - 10 * 0.00832), rel=0.15)


# -- sweeps ----------------------------------------------------------------------


def test_sweep_deterministic_and_bowl_shaped():
    grid = [round(0.1 + 0.1 * k, 3) for k in range(9)]
    a = sweep_lambda(MM1, grid, duration=40_000.0, seed=31)
    b = sweep_lambda(MM1, grid, duration=40_000.0, seed=31)
    assert a == b
    ages = [row[1] for row in a.rows]
    assert ages[0] >= 1.5 * a.best_age
    assert ages[-1] >= 1.5 * a.best_age
    assert 0.3 <= a.best_lambda <= 0.7
    assert all(ci > 0 or math.isnan(ci) for _, _, ci in a.rows)


def test_sweep_empty_grid_rejected():
    with pytest.raises(ConfigError):
        sweep_lambda(MM1, [], duration=100.0)


def test_sweep_tandem_argmin_near_analytic():
    lam_star, _ = analytics.optimal_lambda(lambda l: analytics.aoi_tandem(l, 1.0, 1.0), 0.05, 0.95)
    grid = [round(0.30 + 0.025 * k, 4) for k in range(13)]  # 0.30 .. 0.60
    res = sweep_lambda(TANDEM, grid, duration=3e5, seed=909)
    assert abs(res.best_lambda - lam_star) <= 0.05


# -- closed loop ------------------------------------------------------------------


CL_TANDEM = QueueNetwork(
    forward=(ServiceSpec("exp", 1.0), ServiceSpec("exp", 1.0)),
    reverse=(ServiceSpec("exp", 16.25), ServiceSpec("exp", 16.25)),
)


def test_closed_loop_needs_reverse_chain():
    with pytest.raises(ConfigError):
        run_closed_loop(TANDEM, "acp_plus", 1, duration=100.0, seed=0)


def test_closed_loop_deterministic():
    a = run_closed_loop(CL_TANDEM, "acp_plus", 2, duration=500.0, seed=5)
    b = run_closed_loop(CL_TANDEM, "acp_plus", 2, duration=500.0, seed=5)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)


def test_closed_loop_lazy_backlog_target():
    # the lazy policy aims at one update in flight per smoothed RTT
    values = []
    for seed in range(1, 6):
        r = run_closed_loop(CL_TANDEM, "lazy", 1, duration=10_000.0, seed=seed)
        values.append(r.sources[0].est_avg_backlog)
    assert 0.8 <= statistics.mean(values) <= 1.2


def test_closed_loop_fixed_policy_rate():
    cfg_rate = 0.3
    r = run_closed_loop(CL_TANDEM, f"fixed:{cfg_rate}", 1, duration=4000.0, seed=2)
    s = r.sources[0]
    assert s.mean_rate == pytest.approx(cfg_rate, rel=1e-9)
    assert s.throughput_updates == pytest.approx(cfg_rate, rel=0.05)
    # estimated age must exceed the true monitor age (ACK return delay)
    assert s.est_avg_age > s.true_avg_age


def test_closed_loop_acp_runs_epochs():
    r = run_closed_loop(CL_TANDEM, "acp_plus", 1, duration=3000.0, seed=8)
    s = r.sources[0]
    assert s.epochs > 50
    assert s.lambda_final is not None and s.lambda_final > 0
    assert s.fresh_acks > 0
    assert all(b >= 0 for b in r.forward_backlogs + r.reverse_backlogs)


def test_closed_loop_source_isolation():
    # sources are independent connections: their per-source metrics exist
    r = run_closed_loop(CL_TANDEM, "acp_plus", 3, duration=2000.0, seed=4)
    assert len(r.sources) == 3
    assert all(s.delivered > 0 for s in r.sources)
    assert r.fairness_true_age is not None


# -- config parsing -----------------------------------------------------------------


def test_network_from_dict_roundtrip():
    doc = {
        "forward": [{"service": "exp", "rate": 1.0}, {"service": "link", "rate": 1e6}],
        "reverse": [{"service": "det", "rate": 5.0}],
        "cross_traffic": [{"entry": 1, "rate_bps": 200000, "packet_bytes": 1040}],
        "update_bytes": 1040,
        "ack_bytes": 64,
    }
    net = QueueNetwork.from_dict(doc)
    assert len(net.forward) == 2 and len(net.reverse) == 1
    assert net.cross_traffic[0].rate_pps == pytest.approx(200000 / (8 * 1040))


@pytest.mark.parametrize(
    "doc,needle",
    [
        ({}, "forward"),
        ({"forward": [{"service": "warp", "rate": 1.0}]}, "forward[0]"),
        ({"forward": [{"service": "exp"}]}, "rate"),
        ({"forward": [{"rate": 1.0}]}, "service"),
        ({"forward": [{"service": "exp", "rate": -1}]}, "forward[0]"),
        ({"forward": [{"service": "exp", "rate": 1.0}], "cross_traffic": [{}]}, "rate_bps"),
        ({"forward": [{"service": "exp", "rate": 1.0}], "update_bytes": -5}, "update_bytes"),
        (
            {
                "forward": [{"service": "exp", "rate": 1.0}],
                "cross_traffic": [{"entry": 3, "rate_bps": 1000, "packet_bytes": 100}],
            },
            "entry",
        ),
    ],
)
def test_network_config_errors_name_fields(doc, needle):
    with pytest.raises(ConfigError) as err:
        QueueNetwork.from_dict(doc)
    assert needle in str(err.value)
