"""Tests for graph generation, routing, recall, choice simulation, and labels."""

import json

import numpy as np
import pytest

from routerank import features as F
from routerank.roadnet import (
    Edge, GraphConfig, InsufficientRoutesError, NoRouteError, RoadGraph, Route,
    blended_edge_cost, coverage_rate, generate_graph, make_route,
    recall_alternatives, route_stats, shortest_path,
)
from routerank.world import (
    DatasetConfig, Scenario, UserProfile, generate_dataset, make_labels,
    route_utilities, sample_scenario, sample_user, simulate_choice, split_dataset,
)


def build_graph(coords, edge_specs):
    """Hand-built graph; edge_specs: (frm, to, length_m, speed_kmh, extras)."""
    edges = []
    for spec in edge_specs:
        frm, to, length, speed = spec[:4]
        extras = spec[4] if len(spec) > 4 else {}
        edges.append(Edge(
            id=len(edges), frm=frm, to=to, length_m=float(length),
            speed_kmh=float(speed),
            toll=extras.get("toll", False), light=extras.get("light", False),
            road_class=extras.get("road_class", 1), heat=extras.get("heat", 0.5),
            congestion=extras.get("congestion", {"peak": 1.5, "offpeak": 1.1, "night": 1.0}),
        ))
    return RoadGraph(nodes=dict(coords), edges=edges)


def neutral_user(weights, detour_aversion=0.0, temperature=0.05):
    w = np.asarray(weights, dtype=float)
    return UserProfile(weights=w / w.sum(), detour_aversion=detour_aversion,
                       noise_temperature=temperature,
                       visible=np.zeros((1, F.F_U)))


OFFPEAK = Scenario(time_band="offpeak", vehicle="car", day_kind="weekday")


class TestGenerateGraph:
    def test_deterministic_per_seed(self):
        cfg = GraphConfig(grid_w=5, grid_h=5)
        g1 = generate_graph(cfg, seed=42)
        g2 = generate_graph(cfg, seed=42)
        assert [(e.frm, e.to, e.length_m, e.speed_kmh) for e in g1.edges] == \
               [(e.frm, e.to, e.length_m, e.speed_kmh) for e in g2.edges]
        g3 = generate_graph(cfg, seed=43)
        assert [(e.frm, e.to) for e in g3.edges] != [(e.frm, e.to) for e in g1.edges] or \
               [e.length_m for e in g3.edges] != [e.length_m for e in g1.edges]

    def test_grid_edge_count_without_diagonals(self):
        g = generate_graph(GraphConfig(grid_w=4, grid_h=4, diagonal_p=0.0), seed=1)
        assert len(g.nodes) == 16
        assert len(g.edges) == 48  # 2 directions x 2 orientations x (4 x 3)

    def test_attribute_invariants(self):
        g = generate_graph(GraphConfig(grid_w=5, grid_h=5), seed=3)
        for e in g.edges:
            assert e.length_m > 0
            assert e.speed_kmh > 0
            assert all(f >= 1.0 for f in e.congestion.values())
            assert 0.0 <= e.heat <= 1.0
        assert len({e.id for e in g.edges}) == len(g.edges)


class TestShortestPath:
    def test_corridor(self):
        g = build_graph(
            {0: (0, 0), 1: (1, 0), 2: (2, 0), 3: (3, 0)},
            [(0, 1, 100, 50), (1, 2, 100, 50), (2, 3, 100, 50)],
        )
        r = shortest_path(g, lambda e: e.length_m, 0, 3)
        assert r.edge_ids == (0, 1, 2)

    def test_triangle_prefers_direct_side(self):
        # sides 3, 4, 5; origin/destination spans the 5 side
        g = build_graph(
            {0: (0, 0), 1: (5, 0), 2: (0, 3)},
            [(0, 1, 5, 50), (0, 2, 3, 50), (2, 1, 4, 50)],
        )
        r = shortest_path(g, lambda e: e.length_m, 0, 1)
        assert r.edge_ids == (0,)  # 5 < 3 + 4

    def test_unreachable(self):
        g = build_graph({0: (0, 0), 1: (1, 0), 2: (2, 0)}, [(0, 1, 100, 50)])
        with pytest.raises(NoRouteError):
            shortest_path(g, lambda e: e.length_m, 0, 2)

    def test_against_bellman_ford(self):
        def bellman_ford(g, cost_fn, o, d):
            dist = {n: np.inf for n in g.nodes}
            dist[o] = 0.0
            for _ in range(len(g.nodes)):
                changed = False
                for e in g.edges:
                    c = dist[e.frm] + cost_fn(e)
                    if c < dist[e.to] - 1e-12:
                        dist[e.to] = c
                        changed = True
                if not changed:
                    break
            return dist[d]

        rng = np.random.default_rng(99)
        cost = lambda e: blended_edge_cost(e, "offpeak")
        for trial in range(25):
            g = generate_graph(GraphConfig(grid_w=5, grid_h=6, diagonal_p=0.3),
                               seed=trial)
            comp = g.largest_component()
            o, d = rng.choice(comp, size=2, replace=False)
            expect = bellman_ford(g, cost, int(o), int(d))
            if not np.isfinite(expect):
                continue
            r = shortest_path(g, cost, int(o), int(d))
            got = sum(cost(g.edge(e)) for e in r.edge_ids)
            assert got == pytest.approx(expect, rel=1e-9)


class TestRecall:
    def test_corridor_only_discards(self):
        g = build_graph(
            {0: (0, 0), 1: (1, 0), 2: (2, 0)},
            [(0, 1, 100, 50), (1, 2, 100, 50)],
        )
        with pytest.raises(InsufficientRoutesError):
            recall_alternatives(g, 0, 2, n_routes=4)

    def test_two_parallel_roads(self):
        g = build_graph(
            {0: (0, 0), 1: (2, 0), 2: (1, 1), 3: (1, -1)},
            [(0, 2, 800, 50), (2, 1, 800, 50),   # cheap road
             (0, 3, 1500, 50), (3, 1, 1500, 50)],  # dear road
        )
        found = recall_alternatives(g, 0, 1, n_routes=4)
        assert len(found) == 2
        routes = [r.edge_ids for r, _ in found]
        assert set(routes) == {(0, 1), (2, 3)}
        best = max(found, key=lambda rs: rs[1])
        assert best[0].edge_ids == (0, 1)

    def test_pairwise_distinct_and_deterministic(self):
        g = generate_graph(GraphConfig(grid_w=6, grid_h=6, diagonal_p=0.3), seed=5)
        comp = g.largest_component()
        found1 = recall_alternatives(g, comp[0], comp[-1], n_routes=6)
        found2 = recall_alternatives(g, comp[0], comp[-1], n_routes=6)
        ids1 = [r.edge_ids for r, _ in found1]
        assert ids1 == [r.edge_ids for r, _ in found2]
        assert len({frozenset(i) for i in ids1}) == len(ids1)


class TestRouteValidation:
    def test_contiguity_enforced(self):
        g = build_graph({0: (0, 0), 1: (1, 0), 2: (2, 0)},
                        [(0, 1, 100, 50), (1, 2, 100, 50), (0, 1, 120, 40)])
        make_route(g, [0, 1])
        with pytest.raises(ValueError):
            make_route(g, [1, 0])

    def test_no_repeated_edges(self):
        with pytest.raises(ValueError):
            Route(edge_ids=(1, 2, 1))


class TestCoverageRate:
    def _graph(self):
        return build_graph(
            {0: (0, 0), 1: (1, 0), 2: (2, 0), 3: (1, 1)},
            [(0, 1, 2000, 50), (1, 2, 3000, 50), (1, 3, 1000, 50)],
        )

    def test_identity(self):
        g = self._graph()
        r = make_route(g, [0, 1])
        assert coverage_rate(r, r, g) == 1.0

    def test_disjoint(self):
        g = self._graph()
        assert coverage_rate(make_route(g, [1]), make_route(g, [2]), g) == 0.0

    def test_hand_jaccard(self):
        g = self._graph()
        route = make_route(g, [0, 1])   # a=2km, b=3km
        trace = make_route(g, [0, 2])   # a=2km, c=1km
        assert coverage_rate(route, trace, g) == pytest.approx(2.0 / 6.0)

    def test_symmetry_and_identity_condition(self):
        g = self._graph()
        a = make_route(g, [0, 1])
        b = make_route(g, [0, 2])
        assert coverage_rate(a, b, g) == coverage_rate(b, a, g)
        assert coverage_rate(a, b, g) < 1.0

    def test_empty_rejected(self):
        g = self._graph()
        with pytest.raises(ValueError):
            coverage_rate(make_route(g, [0]), Route(edge_ids=()), g)


class TestMakeLabels:
    def test_tie_breaks_to_smallest_index(self):
        y_r, y_e, l = make_labels([0.2, 0.9, 0.9])
        assert l == 1
        np.testing.assert_array_equal(y_r, [0, 1, 0])
        assert y_e[1, 2] == 0 and y_e[2, 1] == 0  # strict comparison

    def test_two_route_case(self):
        y_r, y_e, l = make_labels([1.0, 0.0])
        np.testing.assert_array_equal(y_r, [1, 0])
        np.testing.assert_array_equal(y_e, [[0, 1], [0, 0]])

    def test_antisymmetry_on_random_vectors(self):
        rng = np.random.default_rng(17)
        for _ in range(500):
            n = int(rng.integers(2, 9))
            crs = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=n)
            y_r, y_e, l = make_labels(crs)
            assert y_r.sum() == 1.0
            assert np.all(y_e * y_e.T == 0)
            assert np.trace(y_e) == 0
            assert l == int(np.argmax(crs))


class TestSimulateChoice:
    def _tied_pair_graph(self):
        # Shared prefix 0->1 and suffix 2->3. Route A middle is one 500 m
        # edge; route B middle is a 3000 m loop at higher speed, so the
        # congested ETA ties while the unique-segment lengths differ 6x.
        cong = {"peak": 1.0, "offpeak": 1.0, "night": 1.0}
        g = build_graph(
            {0: (0, 0), 1: (500, 0), 2: (1000, 0), 3: (1500, 0),
             4: (600, 400), 5: (900, 400)},
            [
                (0, 1, 500, 50, {"congestion": cong}),       # 0 shared prefix
                (1, 2, 500, 50, {"congestion": cong}),       # 1 route A middle
                (2, 3, 500, 50, {"congestion": cong}),       # 2 shared suffix
                (1, 4, 1000, 300, {"congestion": cong}),     # 3 route B middle
                (4, 5, 1000, 300, {"congestion": cong}),     # 4
                (5, 2, 1000, 300, {"congestion": cong}),     # 5
            ],
        )
        a = make_route(g, [0, 1, 2])
        b = make_route(g, [0, 3, 4, 5, 2])
        return g, [a, b]

    def test_detour_aversion_flips_choice(self):
        g, routes = self._tied_pair_graph()
        tolerant = neutral_user([1, 0, 0, 0, 0], detour_aversion=0.0)
        u_tolerant, _ = route_utilities(tolerant, routes, g, "offpeak")
        assert u_tolerant[0] == pytest.approx(u_tolerant[1], abs=1e-9)

        averse = neutral_user([1, 0, 0, 0, 0], detour_aversion=2.0)
        u_averse, _ = route_utilities(averse, routes, g, "offpeak")
        assert u_averse[0] > u_averse[1] + 1.0  # 6x local detour penalized

        rng = np.random.default_rng(0)
        picks = [simulate_choice(averse, OFFPEAK, routes, g, rng, p_dev=0.0)[0]
                 for _ in range(20)]
        assert picks == [0] * 20

    def test_zero_temperature_limit_is_argmax(self):
        g, routes = self._tied_pair_graph()
        user = neutral_user([0, 1, 0, 0, 0], temperature=1e-9)  # distance only
        rng = np.random.default_rng(1)
        chosen, trace = simulate_choice(user, OFFPEAK, routes, g, rng, p_dev=0.0)
        assert chosen == 0  # route A is shorter
        assert trace.edge_ids == routes[0].edge_ids

    def test_identical_routes_split_evenly(self):
        cong = {"peak": 1.0, "offpeak": 1.0, "night": 1.0}
        g = build_graph(
            {0: (0, 0), 1: (2, 0), 2: (1, 1), 3: (1, -1)},
            [(0, 2, 1000, 50, {"congestion": cong}), (2, 1, 1000, 50, {"congestion": cong}),
             (0, 3, 1000, 50, {"congestion": cong}), (3, 1, 1000, 50, {"congestion": cong})],
        )
        routes = [make_route(g, [0, 1]), make_route(g, [2, 3])]
        user = neutral_user([1, 1, 1, 1, 1], temperature=1.0)
        rng = np.random.default_rng(2)
        picks = np.array([simulate_choice(user, OFFPEAK, routes, g, rng, p_dev=0.0)[0]
                          for _ in range(10_000)])
        assert abs(picks.mean() - 0.5) < 0.02


class TestDatasetGeneration:
    CFG = DatasetConfig(n_samples=30, n_routes=4, test_fraction=0.2, n_graphs=3,
                        graph=GraphConfig(grid_w=5, grid_h=5), max_history=3)

    def test_deterministic_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        generate_dataset(self.CFG, seed=7, out_path=str(p1))
        generate_dataset(self.CFG, seed=7, out_path=str(p2))
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.jsonl.manifest.json").exists()
        assert "label_entropy" in (tmp_path / "a.jsonl.stats.txt").read_text()

    def test_sample_invariants(self, tmp_path):
        path = tmp_path / "d.jsonl"
        generate_dataset(self.CFG, seed=8, out_path=str(path))
        samples = F.load_dataset(path)
        assert len(samples) == 30
        rng = np.random.default_rng(0)
        best_crs, random_crs = [], []
        for s in samples:
            assert s.y_r.sum() == 1.0
            assert np.isfinite(s.x_r).all() and np.isfinite(s.x_c).all()
            np.testing.assert_array_equal(
                s.x_c[np.arange(s.n_routes), np.arange(s.n_routes)], 0.0)
            assert sorted(r.recall_rank for r in s.routes) == list(range(s.n_routes))
            best_crs.append(s.crs.max())
            random_crs.append(s.crs[rng.integers(s.n_routes)])
        assert np.mean(best_crs) > np.mean(random_crs)

    def test_split_sizes(self, tmp_path):
        path = tmp_path / "d.jsonl"
        generate_dataset(self.CFG, seed=9, out_path=str(path))
        samples = F.load_dataset(path)
        train, test = split_dataset(samples, self.CFG)
        assert len(test) == 6 and len(train) == 24

    def test_json_roundtrip(self, tmp_path):
        path = tmp_path / "d.jsonl"
        generate_dataset(self.CFG, seed=10, out_path=str(path))
        first = F.load_dataset(path)[0]
        again = F.Sample.from_json_line(first.to_json_line())
        np.testing.assert_array_equal(first.x_c, again.x_c)
        assert first.routes[0].edge_ids == again.routes[0].edge_ids

    def test_schema_field_names(self, tmp_path):
        path = tmp_path / "d.jsonl"
        generate_dataset(self.CFG, seed=11, out_path=str(path))
        with open(path) as fh:
            d = json.loads(fh.readline())
        assert list(d.keys()) == ["sample_id", "routes", "x_r", "x_u", "x_s",
                                  "x_c", "history", "y_r", "y_e", "l"]


class TestUserAndScenario:
    def test_user_weights_normalized(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            u = sample_user(rng)
            assert u.weights.sum() == pytest.approx(1.0)
            assert (u.weights >= 0).all()
            assert u.detour_aversion >= 0
            assert u.noise_temperature > 0

    def test_scenario_onehot(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            sc = sample_scenario(rng)
            v = sc.onehot()
            assert v.shape == (1, F.F_S)
            assert v[0, :3].sum() == 1 and v[0, 3:5].sum() == 1 and v[0, 5:].sum() == 1
