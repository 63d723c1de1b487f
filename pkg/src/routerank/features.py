"""Feature construction for candidate routes and route pairs.

Three feature families feed the ranker: per-route vectors (x_r), per-user
and per-scenario vectors (x_u, x_s), and pairwise vectors (x_c) computed
on the non-overlapping segments of every route pair. Pair features are
non-constant across partners and asymmetric in direction, and the diagonal
is identically zero.

The column layout is defined here once, carries a semantic field tag per
column (time, distance, toll, comfort, familiarity), and is exported as a
manifest file so downstream field gathering never hard-codes indices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .roadnet import RoadGraph, Route, RouteStats, route_stats

FIELD_NAMES = ("time", "distance", "toll", "comfort", "familiarity")

# (column name, field) for per-route features.
X_R_COLS = (
    ("eta_cong_min", "time"),
    ("eta_free_min", "time"),
    ("congestion_ratio", "time"),
    ("length_km", "distance"),
    ("toll_count", "toll"),
    ("light_count", "comfort"),
    ("turn_count", "comfort"),
    ("arterial_share", "comfort"),
    ("local_share", "comfort"),
    ("mean_heat", "familiarity"),
    ("recall_score", "familiarity"),
    ("recall_rank", "familiarity"),
)

# (column name, field) for pair features on the non-overlapping segment of
# route i with respect to route j.
X_C_COLS = (
    ("seg_length_km", "distance"),
    ("seg_eta_cong_min", "time"),
    ("seg_toll_count", "toll"),
    ("seg_light_count", "comfort"),
    ("seg_turn_count", "comfort"),
    ("seg_mean_heat", "familiarity"),
    ("seg_local_share", "comfort"),
    ("detour_ratio", "distance"),
    ("seg_length_frac", "distance"),
)

X_U_COLS = ("age_bucket", "driving_freq", "toll_sensitivity", "detour_sensitivity")
X_S_COLS = ("band_peak", "band_offpeak", "band_night",
            "vehicle_car", "vehicle_truck", "day_weekday", "day_weekend")

F_R = len(X_R_COLS)
F_C = len(X_C_COLS)
F_U = len(X_U_COLS)
F_S = len(X_S_COLS)
F_H = F_R  # history representation shares the route-feature layout


@dataclass(frozen=True)
class RouteRecord:
    """One candidate route with its derived stats, recall info, and label CR."""

    edge_ids: tuple
    stats: RouteStats
    recall_score: float
    recall_rank: int
    cr: float

    def to_json(self) -> dict:
        return {
            "edge_ids": list(self.edge_ids),
            "length_m": self.stats.length_m,
            "eta_free_s": self.stats.eta_free_s,
            "eta_cong_s": self.stats.eta_cong_s,
            "toll_count": self.stats.toll_count,
            "light_count": self.stats.light_count,
            "turn_count": self.stats.turn_count,
            "mean_heat": self.stats.mean_heat,
            "class_shares": list(self.stats.class_shares),
            "recall_score": self.recall_score,
            "recall_rank": self.recall_rank,
            "cr": self.cr,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RouteRecord":
        stats = RouteStats(
            length_m=d["length_m"], eta_free_s=d["eta_free_s"], eta_cong_s=d["eta_cong_s"],
            toll_count=d["toll_count"], light_count=d["light_count"],
            turn_count=d["turn_count"], mean_heat=d["mean_heat"],
            class_shares=tuple(d["class_shares"]),
        )
        return cls(edge_ids=tuple(d["edge_ids"]), stats=stats,
                   recall_score=d["recall_score"], recall_rank=d["recall_rank"], cr=d["cr"])


@dataclass
class Sample:
    """One navigation event: candidates, features, history, and labels."""

    sample_id: str
    routes: list  # RouteRecord
    x_r: np.ndarray  # [N, F_R]
    x_u: np.ndarray  # [1, F_U]
    x_s: np.ndarray  # [1, F_S]
    x_c: np.ndarray  # [N, N, F_C]
    history: np.ndarray  # [T, F_S + F_R]
    y_r: np.ndarray  # [N]
    y_e: np.ndarray  # [N, N]
    l: int
    x_h: np.ndarray | None = None  # [N, F_H], derived after normalization

    @property
    def n_routes(self) -> int:
        return len(self.routes)

    @property
    def crs(self) -> np.ndarray:
        return np.array([r.cr for r in self.routes])

    def to_json_line(self) -> str:
        d = {
            "sample_id": self.sample_id,
            "routes": [r.to_json() for r in self.routes],
            "x_r": self.x_r.tolist(),
            "x_u": self.x_u.tolist(),
            "x_s": self.x_s.tolist(),
            "x_c": self.x_c.tolist(),
            "history": self.history.tolist(),
            "y_r": self.y_r.astype(int).tolist(),
            "y_e": self.y_e.astype(int).tolist(),
            "l": int(self.l),
        }
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_json_line(cls, line: str) -> "Sample":
        d = json.loads(line)
        n = len(d["routes"])
        return cls(
            sample_id=d["sample_id"],
            routes=[RouteRecord.from_json(r) for r in d["routes"]],
            x_r=np.array(d["x_r"], dtype=np.float64).reshape(n, F_R),
            x_u=np.array(d["x_u"], dtype=np.float64).reshape(1, F_U),
            x_s=np.array(d["x_s"], dtype=np.float64).reshape(1, F_S),
            x_c=np.array(d["x_c"], dtype=np.float64).reshape(n, n, F_C),
            history=np.array(d["history"], dtype=np.float64).reshape(-1, F_S + F_R),
            y_r=np.array(d["y_r"], dtype=np.float64),
            y_e=np.array(d["y_e"], dtype=np.float64).reshape(n, n),
            l=int(d["l"]),
        )


def load_dataset(path) -> list:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                samples.append(Sample.from_json_line(line))
    return samples


# -- per-route features ----------------------------------------------------------


def route_feature_row(stats: RouteStats, recall_score: float, recall_rank: int) -> np.ndarray:
    return np.array([
        stats.eta_cong_s / 60.0,
        stats.eta_free_s / 60.0,
        stats.eta_cong_s / max(stats.eta_free_s, 1e-9),
        stats.length_m / 1000.0,
        float(stats.toll_count),
        float(stats.light_count),
        float(stats.turn_count),
        stats.class_shares[0],
        stats.class_shares[2],
        stats.mean_heat,
        recall_score / 60.0,
        float(recall_rank),
    ])


def route_features(records: list) -> np.ndarray:
    """Stack per-route rows for a sample's RouteRecords, shape [N, F_R]."""
    return np.stack([route_feature_row(r.stats, r.recall_score, r.recall_rank)
                     for r in records])


# -- pair features ------------------------------------------------------------------


def non_overlap_segments(r_i: Route, r_j: Route):
    """Edges of route i absent from route j and vice versa, order preserved."""
    set_j = r_j.edge_set()
    set_i = r_i.edge_set()
    seg_ij = tuple(e for e in r_i.edge_ids if e not in set_j)
    seg_ji = tuple(e for e in r_j.edge_ids if e not in set_i)
    return seg_ij, seg_ji


def _segment_row(g: RoadGraph, route: Route, seg: tuple, other_len_m: float,
                 band: str) -> np.ndarray:
    if not seg:
        row = np.zeros(F_C)
        # empty own segment: detour ratio is 0 regardless of the other side
        return row
    edges = [g.edge(e) for e in seg]
    seg_len = sum(e.length_m for e in edges)
    route_len = sum(g.edge(e).length_m for e in route.edge_ids)
    # turns only within runs of edges that stay consecutive in the route
    pos = {e: k for k, e in enumerate(route.edge_ids)}
    turn_count = 0
    for a, b in zip(seg, seg[1:]):
        if pos[b] == pos[a] + 1:
            ea, eb = g.edge(a), g.edge(b)
            d = math.atan2(g.nodes[eb.to][1] - g.nodes[eb.frm][1],
                           g.nodes[eb.to][0] - g.nodes[eb.frm][0]) - \
                math.atan2(g.nodes[ea.to][1] - g.nodes[ea.frm][1],
                           g.nodes[ea.to][0] - g.nodes[ea.frm][0])
            d = (d + math.pi) % (2 * math.pi) - math.pi
            if abs(d) > math.radians(30.0):
                turn_count += 1
    local_len = sum(e.length_m for e in edges if e.road_class == 2)
    return np.array([
        seg_len / 1000.0,
        sum(e.eta_cong_s(band) for e in edges) / 60.0,
        float(sum(1 for e in edges if e.toll)),
        float(sum(1 for e in edges if e.light)),
        float(turn_count),
        sum(e.heat * e.length_m for e in edges) / seg_len,
        local_len / seg_len,
        seg_len / max(other_len_m, 1.0),
        seg_len / max(route_len, 1.0),
    ])


def comparison_features(routes: list, g: RoadGraph, band: str) -> np.ndarray:
    """Pairwise features on non-overlapping segments, shape [N, N, F_C].

    Entry (i, j) describes the part of route i that route j does not share,
    including the detour ratio of that part against route j's own unique
    part. The diagonal is exactly zero.
    """
    n = len(routes)
    out = np.zeros((n, n, F_C))
    seg_len_cache = {}
    segs = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            seg_ij, _ = non_overlap_segments(routes[i], routes[j])
            segs[(i, j)] = seg_ij
            seg_len_cache[(i, j)] = sum(g.edge(e).length_m for e in seg_ij)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            out[i, j] = _segment_row(g, routes[i], segs[(i, j)],
                                     seg_len_cache[(j, i)], band)
    return out


# -- history ---------------------------------------------------------------------


def history_representation(history_feats: np.ndarray, x_r: np.ndarray) -> np.ndarray:
    """Similarity-weighted mean of past selected-route features, per candidate.

    Weights are a softmax over history items of the dot product with the
    candidate row. Degenerates to the plain record for T=1 and to zeros for
    an empty history.
    """
    n = x_r.shape[0]
    t = history_feats.shape[0]
    if t == 0:
        return np.zeros((n, F_H))
    logits = x_r @ history_feats.T  # [N, T]
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w = w / w.sum(axis=1, keepdims=True)
    return w @ history_feats


def history_route_part(history: np.ndarray) -> np.ndarray:
    """Route-feature block of raw history records, shape [T, F_R]."""
    return history[:, F_S:]


# -- normalization -----------------------------------------------------------------


STD_FLOOR = 1e-6


@dataclass
class NormStats:
    """Per-column train-split statistics; frozen once fitted."""

    x_r_mean: np.ndarray
    x_r_std: np.ndarray
    x_c_mean: np.ndarray
    x_c_std: np.ndarray
    x_u_mean: np.ndarray
    x_u_std: np.ndarray

    @classmethod
    def fit(cls, samples: list) -> "NormStats":
        x_r_rows = np.concatenate([s.x_r for s in samples], axis=0)
        off_diag = []
        for s in samples:
            n = s.n_routes
            mask = ~np.eye(n, dtype=bool)
            off_diag.append(s.x_c[mask])
        x_c_rows = np.concatenate(off_diag, axis=0)
        x_u_rows = np.concatenate([s.x_u for s in samples], axis=0)

        def stats(rows):
            mean = rows.mean(axis=0)
            std = np.maximum(rows.std(axis=0), STD_FLOOR)
            return mean, std

        rm, rs = stats(x_r_rows)
        cm, cs = stats(x_c_rows)
        um, us = stats(x_u_rows)
        return cls(rm, rs, cm, cs, um, us)

    def apply(self, sample: Sample) -> Sample:
        n = sample.n_routes
        x_r = (sample.x_r - self.x_r_mean) / self.x_r_std
        x_c = (sample.x_c - self.x_c_mean) / self.x_c_std
        x_c[np.arange(n), np.arange(n), :] = 0.0
        x_u = (sample.x_u - self.x_u_mean) / self.x_u_std
        history = sample.history.copy()
        if history.shape[0]:
            history[:, F_S:] = (history[:, F_S:] - self.x_r_mean) / self.x_r_std
        out = replace(sample, x_r=x_r, x_c=x_c, x_u=x_u, history=history)
        out.x_h = history_representation(history_route_part(history), x_r)
        return out

    def named_arrays(self) -> dict:
        return {
            "norm.x_r_mean": self.x_r_mean, "norm.x_r_std": self.x_r_std,
            "norm.x_c_mean": self.x_c_mean, "norm.x_c_std": self.x_c_std,
            "norm.x_u_mean": self.x_u_mean, "norm.x_u_std": self.x_u_std,
        }

    @classmethod
    def from_named_arrays(cls, arrays: dict) -> "NormStats":
        return cls(
            arrays["norm.x_r_mean"], arrays["norm.x_r_std"],
            arrays["norm.x_c_mean"], arrays["norm.x_c_std"],
            arrays["norm.x_u_mean"], arrays["norm.x_u_std"],
        )


def normalize_split(train: list, test: list):
    """Fit stats on the train split only; apply to both splits."""
    stats = NormStats.fit(train)
    return stats, [stats.apply(s) for s in train], [stats.apply(s) for s in test]


# -- semantic field partition --------------------------------------------------------


@dataclass(frozen=True)
class FieldPartition:
    """Assignment of pair-input comparison columns to named semantic fields.

    Indices address the comparison block of the pair input, which lays out
    both directions of the route features followed by both directions of
    the pair features: [x_r(i) | x_r(j) | x_c(i,j) | x_c(j,i)].
    """

    names: tuple
    cols: dict  # field name -> tuple of column indices

    @property
    def n_fields(self) -> int:
        return len(self.names)

    @property
    def width(self) -> int:
        return sum(len(c) for c in self.cols.values())

    def validate(self) -> None:
        seen = set()
        for name in self.names:
            for c in self.cols[name]:
                if c in seen:
                    raise ValueError(f"column {c} assigned to more than one field")
                seen.add(c)
        expected = set(range(2 * F_R + 2 * F_C))
        if seen != expected:
            raise ValueError("field partition does not cover the comparison columns exactly")

    @classmethod
    def default(cls) -> "FieldPartition":
        cols = {name: [] for name in FIELD_NAMES}
        for k, (_, fname) in enumerate(X_R_COLS):
            cols[fname].extend([k, F_R + k])
        base = 2 * F_R
        for k, (_, fname) in enumerate(X_C_COLS):
            cols[fname].extend([base + k, base + F_C + k])
        part = cls(names=FIELD_NAMES, cols={k: tuple(sorted(v)) for k, v in cols.items()})
        part.validate()
        return part

    def to_manifest(self) -> dict:
        comparison = []
        for k, (name, fname) in enumerate(X_R_COLS):
            comparison.append({"index": k, "name": f"{name}_i", "field": fname})
        for k, (name, fname) in enumerate(X_R_COLS):
            comparison.append({"index": F_R + k, "name": f"{name}_j", "field": fname})
        base = 2 * F_R
        for k, (name, fname) in enumerate(X_C_COLS):
            comparison.append({"index": base + k, "name": f"{name}_ij", "field": fname})
        for k, (name, fname) in enumerate(X_C_COLS):
            comparison.append({"index": base + F_C + k, "name": f"{name}_ji", "field": fname})
        return {
            "fields": list(self.names),
            "comparison_columns": comparison,
            "x_r_columns": [{"index": k, "name": n, "field": f} for k, (n, f) in enumerate(X_R_COLS)],
            "x_c_columns": [{"index": k, "name": n, "field": f} for k, (n, f) in enumerate(X_C_COLS)],
            "x_u_columns": [{"index": k, "name": n, "field": None} for k, n in enumerate(X_U_COLS)],
            "x_s_columns": [{"index": k, "name": n, "field": None} for k, n in enumerate(X_S_COLS)],
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "FieldPartition":
        names = tuple(manifest["fields"])
        cols = {name: [] for name in names}
        for entry in manifest["comparison_columns"]:
            cols[entry["field"]].append(entry["index"])
        part = cls(names=names, cols={k: tuple(sorted(v)) for k, v in cols.items()})
        part.validate()
        return part


def write_manifest(path, partition: FieldPartition) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(partition.to_manifest(), fh, indent=1, sort_keys=True)


def read_manifest(path) -> FieldPartition:
    with open(path, "r", encoding="utf-8") as fh:
        return FieldPartition.from_manifest(json.load(fh))


# -- field gathering (tensor level) ----------------------------------------------------


def gather_fields(c_e: T.Tensor, partition: FieldPartition, x_u: T.Tensor,
                  x_h: T.Tensor) -> list:
    """Split the pair input into per-field tensors with user/history appended.

    ``c_e`` is [N, N, W] with the comparison block in its leading columns;
    ``x_u`` is [1, F_U] and ``x_h`` is [N, F_H]. Every output field tensor
    carries its own comparison columns plus the full user and history
    blocks.
    """
    n = c_e.shape[0]
    ones = T.Tensor(np.ones((n, 1), dtype=c_e.data.dtype))
    u_grid = T.tile_rows(T.matmul(ones, x_u))  # [N, N, F_U]
    h_grid = T.tile_rows(x_h)  # [N, N, F_H]
    out = []
    for name in partition.names:
        part = T.gather_last(c_e, partition.cols[name])
        out.append(T.concat_last([part, u_grid, h_grid]))
    return out


def field_input_width(partition: FieldPartition, name: str) -> int:
    return len(partition.cols[name]) + F_U + F_H
