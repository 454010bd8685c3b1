import math

import numpy as np
import pytest
from scipy import stats

from crashcast.roadnet import Route
from crashcast.trafficgen import (
    ArrivalConfig,
    DeconflictError,
    ODSamplingError,
    RouteGeometry,
    TimeMapping,
    TripSpec,
    build_trips,
    deconflict,
    sample_departures,
    sample_od,
    sample_trajectory,
)
from crashcast.util import stream_rng

from test_roadnet import build_graph


def two_edge_graph():
    # 100 m at 10 m/s then 100 m at 20 m/s, straight along +x
    return build_graph(
        [("a", 0, 0), ("b", 100, 0), ("c", 200, 0)],
        [("e1", "a", "b", 100.0, 10.0), ("e2", "b", "c", 100.0, 20.0)],
    )


def route_for(graph, edge_ids):
    length = sum(graph.edges[e].length for e in edge_ids)
    cost = sum(graph.edges[e].travel_time for e in edge_ids)
    return Route(tuple(edge_ids), cost, length)


def test_departures_respect_horizon_and_are_deterministic():
    cfg = ArrivalConfig(vehicles=3, period=6, horizon=6.0)
    assert cfg.rate == pytest.approx(0.5)
    assert cfg.expected_count == pytest.approx(3.0)
    a = sample_departures(cfg, stream_rng(99, "arrivals"))
    b = sample_departures(cfg, stream_rng(99, "arrivals"))
    assert a == b
    assert all(0.0 < t < 6.0 for t in a)
    assert a == sorted(a)

    assert sample_departures(ArrivalConfig(0, 6, 6.0), stream_rng(1)) == []


def test_departure_counts_match_poisson_mean():
    cfg = ArrivalConfig(vehicles=3, period=6, horizon=6.0)
    counts = [len(sample_departures(cfg, stream_rng(5, "mean", i))) for i in range(1000)]
    mean = np.mean(counts)
    # mean of 1000 Poisson(3) draws: sigma = sqrt(3/1000)
    assert abs(mean - 3.0) <= 3.0 * math.sqrt(3.0 / 1000)


def test_interarrival_gaps_are_exponential():
    cfg = ArrivalConfig(vehicles=1, period=2, horizon=50_000.0)
    times = np.asarray(sample_departures(cfg, stream_rng(17, "ks")))
    gaps = np.diff(times, prepend=0.0)[:10_000]
    assert len(gaps) == 10_000
    res = stats.kstest(gaps, "expon", args=(0.0, 2.0))
    assert res.pvalue > 0.01


def test_od_rejection_is_uniform_over_routable_pairs():
    # 2x2 candidate pairs, one unroutable: each routable pair ~ 1/3
    g = build_graph(
        [("a", 0, 0), ("b", 1, 0), ("c", 2, 0)],
        [("src_a", "a", "b", 1.0, 1.0),
         ("src_b", "b", "c", 1.0, 1.0)],
    )
    from crashcast.roadnet import classify_terminals

    terms = classify_terminals(g)
    rng = stream_rng(7, "od")
    counts: dict = {}
    for _ in range(10_000):
        src, dst, _ = sample_od(g, terms, rng)
        counts[(src, dst)] = counts.get((src, dst), 0) + 1
    # (src_b, src_a) has no route and must never appear
    assert ("src_b", "src_a") not in counts
    assert len(counts) == 3
    for n in counts.values():
        assert abs(n / 10_000 - 1 / 3) < 0.02


def test_od_exhaustion_raises():
    g = build_graph(
        [("a", 0, 0), ("b", 1, 0), ("c", 2, 0), ("d", 3, 0)],
        [("e1", "a", "b", 1.0, 1.0), ("e2", "c", "d", 1.0, 1.0)],
    )
    from crashcast.roadnet import TerminalSets

    # restrict to a single unroutable pair
    terms = TerminalSets(sources=("e1",), destinations=("e2",))
    with pytest.raises(ODSamplingError):
        sample_od(g, terms, stream_rng(2), max_retries=20)


def test_build_trips_orders_by_departure():
    g = two_edge_graph()
    from crashcast.roadnet import classify_terminals

    trips = build_trips(g, classify_terminals(g), [4.0, 1.0, 2.5], stream_rng(3))
    assert [t.depart for t in trips] == [1.0, 2.5, 4.0]
    assert [t.vehicle for t in trips] == [0, 1, 2]
    for t in trips:
        assert t.route.edges[0] == t.source_edge
        assert t.route.edges[-1] == t.target_edge


def test_time_mapping_hand_values():
    g = two_edge_graph()
    m = TimeMapping(g, route_for(g, ["e1", "e2"]), depart=0.0)
    assert m.duration == pytest.approx(15.0)
    assert m.time_at(200.0) == pytest.approx(15.0)
    assert m.time_at(100.0) == pytest.approx(10.0)
    assert m.arc_at(12.5) == pytest.approx(150.0)  # 50 m into the second edge


def test_trajectory_sample_count_and_position():
    g = build_graph([("a", 0, 0), ("b", 100, 0)], [("e1", "a", "b", 100.0, 10.0)])
    route = route_for(g, ["e1"])
    mapping = TimeMapping(g, route, depart=0.0)
    geom = RouteGeometry(g, route.edges)
    traj = sample_trajectory(geom, mapping, 0, dt=0.5)
    assert len(traj.t) == 20  # floor(10 / 0.5)
    assert traj.t[0] == pytest.approx(0.5)
    assert traj.t[-1] == pytest.approx(10.0)
    assert traj.xy[-1] == pytest.approx([100.0, 0.0])  # route end inclusive

    g2 = two_edge_graph()
    route2 = route_for(g2, ["e1", "e2"])
    traj2 = sample_trajectory(RouteGeometry(g2, route2.edges),
                              TimeMapping(g2, route2, 0.0), 0, dt=12.5)
    assert traj2.xy[0] == pytest.approx([150.0, 0.0])


def test_time_mapping_inversion_roundtrip_on_random_routes():
    rng = np.random.default_rng(1234)
    for _ in range(50):
        n_edges = int(rng.integers(1, 6))
        nodes = [(f"n{i}", 50.0 * i, 0.0) for i in range(n_edges + 1)]
        edges = [(f"e{i}", f"n{i}", f"n{i+1}", 50.0, float(rng.uniform(3, 25)))
                 for i in range(n_edges)]
        g = build_graph(nodes, edges)
        route = route_for(g, [e[0] for e in edges])
        depart = float(rng.uniform(0, 20))
        mapping = TimeMapping(g, route, depart)
        dt = float(rng.uniform(0.05, 1.0))
        n = int(math.floor(mapping.duration / dt))
        ticks = depart + dt * np.arange(1, n + 1)
        back = mapping.time_at(mapping.arc_at(ticks))
        assert np.abs(back - ticks).max() <= 1e-9


def test_heading_follows_centerline():
    g = build_graph(
        [("a", 0, 0), ("b", 100, 0), ("c", 100, 100)],
        [("e1", "a", "b", 100.0, 10.0), ("e2", "b", "c", 100.0, 10.0)],
    )
    geom = RouteGeometry(g, ["e1", "e2"])
    assert geom.heading_at(50.0)[0] == pytest.approx(0.0)
    assert geom.heading_at(150.0)[0] == pytest.approx(math.pi / 2)


def make_trip_and_traj(graph, edge_ids, vehicle, depart, dt=0.1):
    route = route_for(graph, edge_ids)
    trip = TripSpec(vehicle, edge_ids[0], edge_ids[-1], depart, route)
    traj = sample_trajectory(RouteGeometry(graph, edge_ids),
                             TimeMapping(graph, route, depart), vehicle, dt)
    return trip, traj


def test_deconflict_delays_identical_trips():
    g = build_graph([("a", 0, 0), ("b", 200, 0)], [("e1", "a", "b", 200.0, 10.0)])
    t0, traj0 = make_trip_and_traj(g, ["e1"], 0, 0.0)
    t1, traj1 = make_trip_and_traj(g, ["e1"], 1, 0.0)
    out = deconflict([t0, t1], [traj0, traj1], safety_radius=5.0, dt=0.1, horizon=20.0)
    assert out[0].depart == 0.0
    assert out[1].depart > 0.0
    # delay is a whole number of dt steps
    assert out[1].depart / 0.1 == pytest.approx(round(out[1].depart / 0.1))
    # 10 m/s: 5 m spacing needs >= 0.5 s
    assert out[1].depart >= 0.5 - 1e-9
    assert out[1].route == t1.route


def test_deconflict_leaves_disjoint_roads_unchanged():
    g = build_graph(
        [("a", 0, 0), ("b", 200, 0), ("c", 0, 500), ("d", 200, 500)],
        [("e1", "a", "b", 200.0, 10.0), ("e2", "c", "d", 200.0, 10.0)],
    )
    t0, traj0 = make_trip_and_traj(g, ["e1"], 0, 0.0)
    t1, traj1 = make_trip_and_traj(g, ["e2"], 1, 0.3)
    out = deconflict([t0, t1], [traj0, traj1], safety_radius=5.0, dt=0.1, horizon=25.0)
    assert [t.depart for t in out] == [0.0, 0.3]


def test_deconflict_budget_exhaustion_raises():
    g = build_graph([("a", 0, 0), ("b", 200, 0)], [("e1", "a", "b", 200.0, 10.0)])
    t0, traj0 = make_trip_and_traj(g, ["e1"], 0, 0.0)
    t1, traj1 = make_trip_and_traj(g, ["e1"], 1, 0.0)
    with pytest.raises(DeconflictError):
        deconflict([t0, t1], [traj0, traj1], safety_radius=5.0, dt=0.1,
                   horizon=20.0, max_delay_steps=2)
