"""Synthetic road networks, shortest paths, and penalty-based alternatives.

Graphs are directed grids with random diagonals. Every edge carries the
attributes the recommendation features consume: length, free-flow speed,
toll and traffic-light flags, a road class, a popularity ("heat") value,
and per-timeband congestion factors. Candidate routes come from repeated
shortest-path queries on a multi-criteria edge cost whose used edges are
penalized between rounds, which is the standard trick for generating
distinct alternatives.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

TIME_BANDS = ("peak", "offpeak", "night")

# Blend weights for the recall cost, all terms expressed in seconds.
DEFAULT_RECALL_WEIGHTS = {
    "eta": 0.5,
    "length": 0.2,
    "toll": 0.1,
    "road_class": 0.1,
    "heat": 0.1,
}
TOLL_PENALTY_S = 180.0
CLASS_PENALTY_S = 45.0
HEAT_PENALTY_S = 90.0


class GenerationError(RuntimeError):
    """Graph generation exhausted its retry budget."""


class NoRouteError(RuntimeError):
    """No path exists between the requested endpoints."""


class InsufficientRoutesError(RuntimeError):
    """Fewer than two distinct candidate routes could be recalled."""


@dataclass(frozen=True)
class Edge:
    id: int
    frm: int
    to: int
    length_m: float
    speed_kmh: float
    toll: bool
    light: bool
    road_class: int  # 0 = arterial, 1 = collector, 2 = local
    heat: float  # popularity in [0, 1]
    congestion: dict  # time band -> factor >= 1

    def eta_free_s(self) -> float:
        return self.length_m / (self.speed_kmh / 3.6)

    def eta_cong_s(self, band: str) -> float:
        return self.eta_free_s() * self.congestion[band]


@dataclass
class RoadGraph:
    nodes: dict  # node id -> (x, y) meters
    edges: list  # Edge, indexed by id
    out_edges: dict = field(default_factory=dict)  # node id -> sorted edge ids

    def __post_init__(self):
        if not self.out_edges:
            out: dict = {n: [] for n in self.nodes}
            for e in self.edges:
                out[e.frm].append(e.id)
            self.out_edges = {n: sorted(ids) for n, ids in out.items()}

    def edge(self, edge_id: int) -> Edge:
        return self.edges[edge_id]

    def largest_component(self) -> list:
        """Node ids of the largest strongly-connected-ish reachable set.

        The grid construction adds both directions for every segment, so a
        plain undirected flood fill is sufficient here.
        """
        unvisited = set(self.nodes)
        neighbors: dict = {n: set() for n in self.nodes}
        for e in self.edges:
            neighbors[e.frm].add(e.to)
            neighbors[e.to].add(e.frm)
        best: list = []
        while unvisited:
            start = min(unvisited)
            comp = [start]
            unvisited.discard(start)
            queue = [start]
            while queue:
                n = queue.pop()
                for nb in neighbors[n]:
                    if nb in unvisited:
                        unvisited.discard(nb)
                        comp.append(nb)
                        queue.append(nb)
            if len(comp) > len(best):
                best = comp
        return sorted(best)


@dataclass(frozen=True)
class GraphConfig:
    grid_w: int = 7
    grid_h: int = 7
    spacing_m: float = 500.0
    diagonal_p: float = 0.25
    coord_jitter: float = 0.15  # fraction of spacing
    toll_p: float = 0.12
    light_p: float = 0.35
    max_retries: int = 8

    def __post_init__(self):
        if self.grid_w * self.grid_h < 16:
            raise ValueError("graph config needs at least 16 nodes")


_CLASS_SPEEDS = {0: (70.0, 90.0), 1: (45.0, 60.0), 2: (25.0, 40.0)}


def _draw_edge_attrs(rng: np.random.Generator, cfg: GraphConfig, length_m: float):
    road_class = int(rng.choice([0, 1, 2], p=[0.25, 0.45, 0.30]))
    lo, hi = _CLASS_SPEEDS[road_class]
    speed = float(rng.uniform(lo, hi))
    toll = bool(road_class == 0 and rng.random() < cfg.toll_p * 3) or bool(
        road_class != 0 and rng.random() < cfg.toll_p * 0.2
    )
    light = bool(rng.random() < cfg.light_p * (1.5 if road_class == 2 else 0.7))
    heat = float(np.clip(rng.beta(2.0, 2.0) + (0.15 if road_class == 0 else 0.0), 0.0, 1.0))
    congestion = {
        "peak": float(1.0 + rng.uniform(0.2, 1.8) * (1.4 if road_class == 0 else 1.0)),
        "offpeak": float(1.0 + rng.uniform(0.0, 0.5)),
        "night": float(1.0 + rng.uniform(0.0, 0.1)),
    }
    return road_class, speed, toll, light, heat, congestion


def generate_graph(cfg: GraphConfig, seed: int) -> RoadGraph:
    """Build a grid-with-diagonals road graph, deterministic per seed."""
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng([seed, attempt, 0x6F61D])
        nodes = {}
        for iy in range(cfg.grid_h):
            for ix in range(cfg.grid_w):
                nid = iy * cfg.grid_w + ix
                jx = rng.uniform(-cfg.coord_jitter, cfg.coord_jitter) * cfg.spacing_m
                jy = rng.uniform(-cfg.coord_jitter, cfg.coord_jitter) * cfg.spacing_m
                nodes[nid] = (ix * cfg.spacing_m + jx, iy * cfg.spacing_m + jy)

        segments = []  # undirected (a, b)
        for iy in range(cfg.grid_h):
            for ix in range(cfg.grid_w):
                nid = iy * cfg.grid_w + ix
                if ix + 1 < cfg.grid_w:
                    segments.append((nid, nid + 1))
                if iy + 1 < cfg.grid_h:
                    segments.append((nid, nid + cfg.grid_w))
        for iy in range(cfg.grid_h - 1):
            for ix in range(cfg.grid_w - 1):
                if rng.random() < cfg.diagonal_p:
                    a = iy * cfg.grid_w + ix
                    b = (iy + 1) * cfg.grid_w + ix + 1
                    if rng.random() < 0.5:
                        a, b = iy * cfg.grid_w + ix + 1, (iy + 1) * cfg.grid_w + ix
                    segments.append((a, b))

        edges = []
        for a, b in segments:
            ax, ay = nodes[a]
            bx, by = nodes[b]
            length = math.hypot(bx - ax, by - ay)
            road_class, speed, toll, light, heat, congestion = _draw_edge_attrs(rng, cfg, length)
            for frm, to in ((a, b), (b, a)):
                edges.append(Edge(
                    id=len(edges), frm=frm, to=to, length_m=length, speed_kmh=speed,
                    toll=toll, light=light, road_class=road_class, heat=heat,
                    congestion=dict(congestion),
                ))

        g = RoadGraph(nodes=nodes, edges=edges)
        if len(g.largest_component()) >= 0.9 * len(nodes):
            return g
    raise GenerationError(f"could not generate a connected graph after {cfg.max_retries} attempts")


# -- routes -----------------------------------------------------------------------


@dataclass(frozen=True)
class Route:
    """A contiguous, edge-simple path through a graph."""

    edge_ids: tuple

    def __post_init__(self):
        if len(set(self.edge_ids)) != len(self.edge_ids):
            raise ValueError("route repeats an edge id")

    def edge_set(self):
        return frozenset(self.edge_ids)


Trace = Route  # a traveled edge sequence obeys the same contiguity contract


def make_route(g: RoadGraph, edge_ids) -> Route:
    edge_ids = tuple(int(e) for e in edge_ids)
    if not edge_ids:
        raise ValueError("empty route")
    for prev, nxt in zip(edge_ids, edge_ids[1:]):
        if g.edge(prev).to != g.edge(nxt).frm:
            raise ValueError(f"edges {prev} and {nxt} are not contiguous")
    return Route(edge_ids=edge_ids)


@dataclass(frozen=True)
class RouteStats:
    length_m: float
    eta_free_s: float
    eta_cong_s: float
    toll_count: int
    light_count: int
    turn_count: int
    mean_heat: float
    class_shares: tuple  # length-weighted shares for classes 0, 1, 2


def _heading(g: RoadGraph, e: Edge) -> float:
    ax, ay = g.nodes[e.frm]
    bx, by = g.nodes[e.to]
    return math.atan2(by - ay, bx - ax)


def _turns(g: RoadGraph, edge_ids) -> int:
    count = 0
    for prev, nxt in zip(edge_ids, edge_ids[1:]):
        d = _heading(g, g.edge(nxt)) - _heading(g, g.edge(prev))
        d = (d + math.pi) % (2 * math.pi) - math.pi
        if abs(d) > math.radians(30.0):
            count += 1
    return count


def route_stats(g: RoadGraph, route: Route, band: str) -> RouteStats:
    edges = [g.edge(e) for e in route.edge_ids]
    total = sum(e.length_m for e in edges)
    class_len = [0.0, 0.0, 0.0]
    for e in edges:
        class_len[e.road_class] += e.length_m
    return RouteStats(
        length_m=total,
        eta_free_s=sum(e.eta_free_s() for e in edges),
        eta_cong_s=sum(e.eta_cong_s(band) for e in edges),
        toll_count=sum(1 for e in edges if e.toll),
        light_count=sum(1 for e in edges if e.light),
        turn_count=_turns(g, route.edge_ids),
        mean_heat=sum(e.heat * e.length_m for e in edges) / total,
        class_shares=tuple(cl / total for cl in class_len),
    )


# -- shortest paths -----------------------------------------------------------------


def shortest_path(g: RoadGraph, cost_fn, origin: int, destination: int) -> Route:
    """Dijkstra with a deterministic tie-break.

    Ties in total cost resolve to the lexicographically smallest edge-id
    sequence, which the heap ordering on (cost, edge_ids) provides.
    """
    if origin == destination:
        raise ValueError("origin equals destination")
    best: dict = {}
    heap = [(0.0, (), origin)]
    while heap:
        cost, path, node = heapq.heappop(heap)
        if node in best:
            continue
        best[node] = (cost, path)
        if node == destination:
            return make_route(g, path)
        for eid in g.out_edges.get(node, ()):
            e = g.edge(eid)
            if e.to in best:
                continue
            c = cost_fn(e)
            if c <= 0:
                raise ValueError(f"cost_fn returned non-positive cost for edge {eid}")
            heapq.heappush(heap, (cost + c, path + (eid,), e.to))
    raise NoRouteError(f"no route from {origin} to {destination}")


def path_cost(g: RoadGraph, route: Route, cost_fn) -> float:
    return sum(cost_fn(g.edge(e)) for e in route.edge_ids)


def blended_edge_cost(e: Edge, band: str, weights: dict | None = None) -> float:
    """Multi-criteria recall cost in seconds-equivalent units."""
    w = weights or DEFAULT_RECALL_WEIGHTS
    return (
        w["eta"] * e.eta_cong_s(band)
        + w["length"] * e.eta_free_s()
        + w["toll"] * (TOLL_PENALTY_S if e.toll else 0.0)
        + w["road_class"] * CLASS_PENALTY_S * e.road_class
        + w["heat"] * HEAT_PENALTY_S * (1.0 - e.heat)
        + 1e-6
    )


def recall_alternatives(g: RoadGraph, origin: int, destination: int, n_routes: int,
                        penalty_factor: float = 1.4, band: str = "offpeak",
                        weights: dict | None = None) -> list:
    """Recall up to ``n_routes`` distinct candidates with their scores.

    Returns (Route, recall_score) pairs ordered by discovery; the score is
    the negated blended cost of the route on the unpenalized graph. Raises
    ``InsufficientRoutesError`` if fewer than two distinct routes exist,
    which callers treat as a discarded sample.
    """
    if n_routes < 2:
        raise ValueError("n_routes must be at least 2")
    if penalty_factor <= 1.0:
        raise ValueError("penalty_factor must exceed 1")

    base = {e.id: blended_edge_cost(e, band, weights) for e in g.edges}
    found: list = []
    seen: set = set()

    def run_rounds(factor: float, rounds: int):
        penalty = dict(base)
        for _ in range(rounds):
            if len(found) >= n_routes:
                return
            try:
                r = shortest_path(g, lambda e: penalty[e.id], origin, destination)
            except NoRouteError:
                return
            key = r.edge_ids
            if key not in seen:
                seen.add(key)
                score = -sum(base[e] for e in r.edge_ids)
                found.append((r, score))
            for eid in r.edge_ids:
                penalty[eid] = penalty[eid] * factor

    run_rounds(penalty_factor, 3 * n_routes)
    if len(found) < n_routes:
        # Pad with a harsher penalty sweep to force more diverse detours.
        run_rounds(penalty_factor * penalty_factor, 3 * n_routes)
    if len(found) < 2:
        raise InsufficientRoutesError(f"only {len(found)} distinct route(s) from {origin} to {destination}")
    return found[:n_routes]


# -- overlap metric ------------------------------------------------------------------


def coverage_rate(route: Route, trace: Trace, g: RoadGraph) -> float:
    """Length-weighted Jaccard overlap between a route and a trace, in [0, 1]."""
    if not route.edge_ids or not trace.edge_ids:
        raise ValueError("coverage_rate requires non-empty route and trace")
    a = route.edge_set()
    b = trace.edge_set()
    inter = sum(g.edge(e).length_m for e in a & b)
    union = sum(g.edge(e).length_m for e in a | b)
    return inter / union
