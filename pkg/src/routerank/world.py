"""Synthetic users, choice simulation, labels, and dataset generation.

Stands in for production navigation logs. Each sample draws a user with
latent per-field preference weights and a detour aversion, recalls
candidate routes on a pooled road graph, simulates the user's choice with
softmax noise, derives a traveled trace (optionally with a short mid-route
excursion), and scores every candidate by its length-weighted overlap with
the trace. Everything is deterministic given the dataset seed; each sample
gets its own RNG stream derived from (seed, attempt index).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import features as F
from .roadnet import (
    GraphConfig, InsufficientRoutesError, NoRouteError, RoadGraph, Route, Trace,
    blended_edge_cost, coverage_rate, generate_graph, make_route, recall_alternatives,
    route_stats, shortest_path,
)

FIELD_ORDER = F.FIELD_NAMES  # (time, distance, toll, comfort, familiarity)

TIME_BAND_P = (0.45, 0.40, 0.15)
VEHICLE_P = (0.9, 0.1)
DAY_P = (0.7, 0.3)

DETOUR_RATIO_CAP = 8.0


@dataclass(frozen=True)
class Scenario:
    time_band: str  # peak | offpeak | night
    vehicle: str  # car | truck
    day_kind: str  # weekday | weekend

    def onehot(self) -> np.ndarray:
        bands = ("peak", "offpeak", "night")
        vehicles = ("car", "truck")
        days = ("weekday", "weekend")
        v = np.zeros(F.F_S)
        v[bands.index(self.time_band)] = 1.0
        v[3 + vehicles.index(self.vehicle)] = 1.0
        v[5 + days.index(self.day_kind)] = 1.0
        return v.reshape(1, F.F_S)


def sample_scenario(rng: np.random.Generator) -> Scenario:
    return Scenario(
        time_band=("peak", "offpeak", "night")[rng.choice(3, p=TIME_BAND_P)],
        vehicle=("car", "truck")[rng.choice(2, p=VEHICLE_P)],
        day_kind=("weekday", "weekend")[rng.choice(2, p=DAY_P)],
    )


@dataclass(frozen=True)
class UserProfile:
    """Latent preference weights plus the visible attributes the model sees."""

    weights: np.ndarray  # per FIELD_ORDER, nonnegative, sums to 1
    detour_aversion: float
    noise_temperature: float
    visible: np.ndarray  # [1, F_U]


_ARCHETYPES = (
    # dirichlet alphas over (time, distance, toll, comfort, familiarity)
    (0.30, (8.0, 2.0, 1.0, 1.0, 1.0)),   # hurried
    (0.20, (2.0, 2.0, 8.0, 1.0, 1.0)),   # toll-averse
    (0.20, (1.0, 1.5, 1.0, 8.0, 2.0)),   # comfort-seeking
    (0.15, (2.0, 1.0, 1.0, 2.0, 8.0)),   # habit-driven
    (0.15, (3.0, 3.0, 2.0, 2.0, 2.0)),   # balanced
)


def sample_user(rng: np.random.Generator) -> UserProfile:
    probs = np.array([a[0] for a in _ARCHETYPES])
    k = int(rng.choice(len(_ARCHETYPES), p=probs))
    w = rng.dirichlet(np.array(_ARCHETYPES[k][1]))
    detour_aversion = 0.0 if rng.random() < 0.35 else float(rng.uniform(0.8, 3.5))
    temperature = float(rng.uniform(0.05, 0.35))
    noise = rng.normal(size=4) * 0.05
    visible = np.clip(np.array([
        0.35 + 0.9 * (w[3] - w[0]) + noise[0],
        0.15 + 1.6 * w[4] + noise[1],
        2.0 * w[2] + noise[2],
        detour_aversion / 3.5 + noise[3],
    ]), 0.0, 1.5).reshape(1, F.F_U)
    return UserProfile(weights=w, detour_aversion=detour_aversion,
                       noise_temperature=temperature, visible=visible)


# -- choice model -----------------------------------------------------------------


def field_costs(stats) -> np.ndarray:
    """Per-field subjective costs of a route, ordered as FIELD_ORDER."""
    return np.array([
        stats.eta_cong_s / 60.0,
        stats.length_m / 1000.0,
        2.0 * stats.toll_count,
        0.7 * (stats.light_count + stats.turn_count),
        5.0 * (1.0 - stats.mean_heat),
    ])


def route_utilities(user: UserProfile, routes: list, g: RoadGraph, band: str):
    """Global utility minus a local-detour penalty against the best route.

    The detour penalty uses the non-overlapping segment lengths of each
    route versus the globally best one, so it is invisible to per-route
    features and only recoverable from pair-level information.
    """
    stats = [route_stats(g, r, band) for r in routes]
    global_u = np.array([-(user.weights @ field_costs(s)) for s in stats])
    ref = int(np.argmax(global_u))
    utilities = global_u.copy()
    if user.detour_aversion > 0.0:
        for i, r in enumerate(routes):
            if i == ref:
                continue
            seg_i, seg_ref = F.non_overlap_segments(r, routes[ref])
            len_i = sum(g.edge(e).length_m for e in seg_i)
            len_ref = sum(g.edge(e).length_m for e in seg_ref)
            ratio = min(len_i / max(len_ref, 1.0), DETOUR_RATIO_CAP)
            utilities[i] -= user.detour_aversion * max(0.0, ratio - 1.0)
    return utilities, stats


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def simulate_choice(user: UserProfile, sc: Scenario, routes: list, g: RoadGraph,
                    rng: np.random.Generator, p_dev: float = 0.1):
    """Pick a route by noisy utility and derive the traveled trace.

    With probability ``p_dev`` the trace substitutes a short excursion of
    one to three consecutive edges with an alternative subpath, producing
    coverage rates strictly inside (0, 1).
    """
    if len(routes) < 2:
        raise ValueError("simulate_choice needs at least two routes")
    utilities, _ = route_utilities(user, routes, g, sc.time_band)
    temp = max(user.noise_temperature, 1e-9)
    probs = _softmax(utilities / temp)
    chosen = int(rng.choice(len(routes), p=probs))
    trace = routes[chosen]
    if p_dev > 0.0 and rng.random() < p_dev:
        trace = _excursion(trace, g, rng)
    return chosen, trace


def _excursion(route: Route, g: RoadGraph, rng: np.random.Generator) -> Trace:
    edges = route.edge_ids
    if len(edges) < 3:
        return route
    run_len = int(rng.integers(1, 4))
    start = int(rng.integers(1, max(2, len(edges) - run_len)))
    run = edges[start:start + run_len]
    if not run:
        return route
    a = g.edge(run[0]).frm
    b = g.edge(run[-1]).to
    if a == b:
        return route
    banned = set(run)
    try:
        alt = shortest_path(
            g, lambda e: e.length_m * (1000.0 if e.id in banned else 1.0), a, b)
    except NoRouteError:
        return route
    if set(alt.edge_ids) & banned:
        return route
    new_ids = edges[:start] + alt.edge_ids + edges[start + run_len:]
    try:
        return make_route(g, new_ids)
    except ValueError:
        return route  # the splice revisited an edge; keep the clean trace


# -- labels ------------------------------------------------------------------------


def make_labels(crs) -> tuple:
    """One-hot best-route label and strict pairwise-order label.

    Ties in CR break toward the smallest index; the pairwise label is 1
    only for strictly greater CR, so tied pairs are 0 in both directions
    and the diagonal is 0.
    """
    crs = np.asarray(crs, dtype=float)
    if crs.shape[0] < 2:
        raise ValueError("make_labels needs at least two coverage rates")
    l = int(np.argmax(crs))
    y_r = np.zeros(crs.shape[0])
    y_r[l] = 1.0
    y_e = (crs[:, None] > crs[None, :]).astype(float)
    return y_r, y_e, l


# -- dataset generation ---------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 22000
    n_routes: int = 8
    test_fraction: float = 1.0 / 11.0
    n_graphs: int = 36
    p_dev: float = 0.1
    penalty_factor: float = 1.4
    min_od_dist_m: float = 1400.0
    max_history: int = 6
    graph: GraphConfig = dc_field(default_factory=GraphConfig)

    def n_test(self) -> int:
        return int(round(self.n_samples * self.test_fraction))


def _user_edge_cost(user: UserProfile, band: str):
    """Per-edge approximation of the user's subjective route cost."""
    w = user.weights

    def cost(e):
        return (
            w[0] * e.eta_cong_s(band) / 60.0
            + w[1] * e.length_m / 1000.0
            + w[2] * 2.0 * (1.0 if e.toll else 0.0)
            + w[3] * 0.7 * (1.0 if e.light else 0.0)
            + w[4] * 5.0 * (1.0 - e.heat) * (e.length_m / 2000.0)
            + 1e-4
        )

    return cost


def _make_history(user: UserProfile, g: RoadGraph, nodes: list,
                  rng: np.random.Generator, max_history: int) -> np.ndarray:
    t = int(rng.integers(0, max_history + 1))
    records = []
    for _ in range(t):
        sc = sample_scenario(rng)
        for _attempt in range(6):
            o, d = rng.choice(len(nodes), size=2, replace=False)
            o, d = nodes[int(o)], nodes[int(d)]
            try:
                r = shortest_path(g, _user_edge_cost(user, sc.time_band), o, d)
            except NoRouteError:
                continue
            stats = route_stats(g, r, sc.time_band)
            score = -sum(blended_edge_cost(g.edge(e), sc.time_band) for e in r.edge_ids)
            row = np.concatenate([
                sc.onehot().ravel(),
                F.route_feature_row(stats, score, 0),
            ])
            records.append(row)
            break
    if not records:
        return np.zeros((0, F.F_S + F.F_R))
    return np.stack(records)


def _pick_endpoints(g: RoadGraph, nodes: list, rng: np.random.Generator,
                    min_dist: float):
    for _ in range(24):
        o, d = rng.choice(len(nodes), size=2, replace=False)
        o, d = nodes[int(o)], nodes[int(d)]
        ox, oy = g.nodes[o]
        dx, dy = g.nodes[d]
        if math.hypot(dx - ox, dy - oy) >= min_dist:
            return o, d
    return None


def build_sample(sample_id: str, g: RoadGraph, nodes: list, cfg: DatasetConfig,
                 rng: np.random.Generator) -> F.Sample:
    """Generate one sample on the given graph; raises on unusable draws."""
    user = sample_user(rng)
    sc = sample_scenario(rng)
    od = _pick_endpoints(g, nodes, rng, cfg.min_od_dist_m)
    if od is None:
        raise InsufficientRoutesError("no usable endpoint pair")
    o, d = od
    recalled = recall_alternatives(g, o, d, cfg.n_routes, cfg.penalty_factor,
                                   band=sc.time_band)
    routes = [r for r, _ in recalled]
    scores = [s for _, s in recalled]

    chosen, trace = simulate_choice(user, sc, routes, g, rng, cfg.p_dev)
    crs = [coverage_rate(r, trace, g) for r in routes]
    y_r, y_e, l = make_labels(crs)

    records = []
    for rank, (r, s, cr) in enumerate(zip(routes, scores, crs)):
        records.append(F.RouteRecord(
            edge_ids=r.edge_ids, stats=route_stats(g, r, sc.time_band),
            recall_score=s, recall_rank=rank, cr=cr,
        ))
    x_r = F.route_features(records)
    x_c = F.comparison_features(routes, g, sc.time_band)
    history = _make_history(user, g, nodes, rng, cfg.max_history)

    return F.Sample(
        sample_id=sample_id, routes=records,
        x_r=x_r, x_u=user.visible.copy(), x_s=sc.onehot(), x_c=x_c,
        history=history, y_r=y_r, y_e=y_e, l=l,
    )


def generate_dataset(cfg: DatasetConfig, seed: int, out_path: str) -> dict:
    """Write a JSON-Lines dataset plus manifest and stats files.

    Returns the stats dict. Produces exactly ``cfg.n_samples`` samples;
    recall failures are skipped and counted. Output bytes are identical
    across runs with the same config and seed.
    """
    graphs = []
    for gi in range(cfg.n_graphs):
        g = generate_graph(cfg.graph, seed=int(np.random.default_rng([seed, 7, gi]).integers(2 ** 31)))
        graphs.append((g, g.largest_component()))

    produced = 0
    discarded = 0
    attempt = 0
    l_counts: dict = {}
    best_crs = []
    recall_best_crs = []
    route_counts = []
    with open(out_path, "w", encoding="utf-8") as fh:
        while produced < cfg.n_samples:
            rng = np.random.default_rng([seed, 1, attempt])
            g, nodes = graphs[attempt % cfg.n_graphs]
            attempt += 1
            try:
                sample = build_sample(f"s{produced:07d}", g, nodes, cfg, rng)
            except (InsufficientRoutesError, NoRouteError):
                discarded += 1
                if discarded > 50 + 2 * cfg.n_samples:
                    raise GenerationBudgetError(
                        f"discard budget exhausted after {attempt} attempts")
                continue
            fh.write(sample.to_json_line())
            fh.write("\n")
            produced += 1
            l_counts[sample.l] = l_counts.get(sample.l, 0) + 1
            best_crs.append(float(sample.crs.max()))
            recall_best_crs.append(float(sample.routes[0].cr))
            route_counts.append(sample.n_routes)

    counts = np.array([l_counts[k] for k in sorted(l_counts)], dtype=float)
    p = counts / counts.sum()
    entropy = float(-(p * np.log(p)).sum())
    stats = {
        "n_samples": produced,
        "n_discarded": discarded,
        "label_entropy": entropy,
        "mean_best_cr": float(np.mean(best_crs)),
        "mean_recall_best_cr": float(np.mean(recall_best_crs)),
        "mean_routes_per_sample": float(np.mean(route_counts)),
        "n_test": cfg.n_test(),
        "seed": seed,
    }
    F.write_manifest(str(out_path) + ".manifest.json", F.FieldPartition.default())
    with open(str(out_path) + ".stats.txt", "w", encoding="utf-8") as fh:
        for k, v in stats.items():
            fh.write(f"{k}: {v}\n")
    return stats


class GenerationBudgetError(RuntimeError):
    """Too many consecutive discards while generating a dataset."""


def split_dataset(samples: list, cfg: DatasetConfig):
    """Deterministic train/test split: the tail of the file is the test set."""
    n_test = cfg.n_test()
    if n_test <= 0 or n_test >= len(samples):
        raise ValueError("test split must be a proper nonempty subset")
    return samples[:-n_test], samples[-n_test:]
