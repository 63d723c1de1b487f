"""The comparison ranker: scenario-gated MLPs, pairwise comparison blocks,
an interpretable per-field pair scorer with a distillation teacher, and the
pointwise / self-attention baselines.

Architecture sketch (pairwise path): per-route features are lifted to an
N x N grid where cell (i, j) concatenates both routes' representations and
both directions of the pair features. A first multi-input block maps the
grid either through per-field scenario MLPs into an antisymmetric pair
probability matrix (interpretable path) or through one scenario MLP into
an implicit pair representation. Follow-up blocks aggregate each route's
row, lift again, and re-encode; a linear head, sum pooling over partners,
and a softmax produce the listwise route scores.

All scenario MLPs hold S parameter banks mixed by a softmax gate computed
from the scenario vector; every hidden layer is followed by batch
normalization and ReLU. Heads end in a plain zero-initialized linear
layer, so an untrained model scores routes uniformly and pair
probabilities start at exactly 0.5.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import features as F
from . import tensor as T


@dataclass
class ModelConfig:
    k_blocks: int = 2  # comparison blocks after the multi-input block
    n_banks: int = 4  # parameter banks per scenario MLP
    h1: int = 64
    h2: int = 32
    h3: int = 16
    h4: int = 1
    lam: float = 0.1  # pair-loss weight
    use_ps: bool = True  # supervise pair scores
    use_xc: bool = True  # feed pair features
    use_cco: bool = True  # pairwise grid interaction (False: attention/pointwise)
    distill: bool = True  # teacher + distillation losses
    ps_linear: bool = True  # field-restricted scorer (False: full-interaction scorer)
    f_r: int = F.F_R
    f_c: int = F.F_C
    f_u: int = F.F_U
    f_s: int = F.F_S
    f_h: int = F.F_H
    sa_max_routes: int = 8  # flatten width for the attention baseline
    d_att: int = 16
    field_cols: dict | None = None  # field name -> comparison column indices

    def __post_init__(self):
        if self.field_cols is None:
            self.field_cols = {k: list(v) for k, v in F.FieldPartition.default().cols.items()}
        self.validate()

    def validate(self) -> None:
        if self.k_blocks < 1 or self.n_banks < 1:
            raise ValueError("k_blocks and n_banks must be at least 1")
        if self.h4 != 1:
            raise ValueError("scoring heads must end in a single unit (h4 = 1)")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.use_ps and not self.use_cco:
            raise ValueError("pair scoring requires the pairwise interaction path")
        if self.distill and not (self.use_ps and self.ps_linear):
            raise ValueError("distillation requires the field-restricted pair scorer")

    def partition(self) -> F.FieldPartition:
        names = tuple(F.FIELD_NAMES)
        part = F.FieldPartition(names=names,
                                cols={k: tuple(self.field_cols[k]) for k in names})
        part.validate()
        return part

    def pair_input_width(self) -> int:
        return 2 * self.f_r + 2 * self.f_c + self.f_u + self.f_h

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


# -- parameter storage ----------------------------------------------------------


class ParamStore:
    """Named parameter tensors plus batch-norm running states."""

    def __init__(self, dtype):
        self.dtype = dtype
        self.params: dict = {}
        self.bn_states: dict = {}

    def add(self, name: str, array: np.ndarray) -> T.Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        t = T.Tensor(array, requires_grad=True, dtype=self.dtype)
        self.params[name] = t
        return t

    def add_bn(self, name: str, width: int) -> T.BatchNormState:
        if name in self.bn_states:
            raise ValueError(f"duplicate bn state name {name}")
        st = T.BatchNormState.create(width, dtype=self.dtype)
        self.bn_states[name] = st
        return st

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def named_arrays(self) -> dict:
        """Every persistent array, for checkpointing."""
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn_states.items():
            out[f"{name}.mean"] = st.mean
            out[f"{name}.var"] = st.var
            out[f"{name}.updates"] = np.array([float(st.updates)], dtype=st.mean.dtype)
        return out

    def load_arrays(self, arrays: dict) -> None:
        for name, p in self.params.items():
            src = arrays[name]
            if src.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {p.data.shape}")
            p.data = src.astype(p.data.dtype)
        for name, st in self.bn_states.items():
            st.mean = arrays[f"{name}.mean"].astype(st.mean.dtype)
            st.var = arrays[f"{name}.var"].astype(st.var.dtype)
            st.updates = int(arrays[f"{name}.updates"][0])


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# -- scenario-gated MLP -----------------------------------------------------------


class ScenarioMLP:
    """Four dense layers with gate-mixed parameter banks.

    Hidden layers run linear -> batch norm -> ReLU; when built as a head
    the final layer is a plain linear map to one unit and is
    zero-initialized, otherwise it is a full hidden layer of width h3.
    """

    def __init__(self, store: ParamStore, name: str, in_dim: int, cfg: ModelConfig,
                 rng: np.random.Generator, head: bool):
        self.name = name
        self.head = head
        self.n_banks = cfg.n_banks
        out_dim = cfg.h4 if head else cfg.h3
        widths = [in_dim, cfg.h1, cfg.h2, cfg.h3, out_dim]
        self.layers = []
        s = cfg.n_banks
        for li in range(4):
            din, dout = widths[li], widths[li + 1]
            last = li == 3
            zero = head and last
            w = np.zeros((s, din, dout)) if zero else np.stack(
                [_kaiming_uniform(rng, (din, dout), din) for _ in range(s)])
            layer = {
                "w": store.add(f"{name}.l{li}.w", w),
                "b": store.add(f"{name}.l{li}.b", np.zeros((s, dout))),
                "bn": None, "gamma": None, "beta": None,
            }
            if not (head and last):
                layer["gamma"] = store.add(f"{name}.l{li}.gamma", np.ones((s, dout)))
                layer["beta"] = store.add(f"{name}.l{li}.beta", np.zeros((s, dout)))
                layer["bn"] = store.add_bn(f"{name}.l{li}.bn", dout)
            self.layers.append(layer)
        self.gate_w = store.add(f"{name}.gate.w", _kaiming_uniform(rng, (cfg.f_s, s), cfg.f_s))
        self.gate_b = store.add(f"{name}.gate.b", np.zeros(s))

    def gate(self, x_s: T.Tensor) -> T.Tensor:
        logits = T.add(T.matmul(x_s, self.gate_w), self.gate_b)
        return T.reshape(T.softmax_last(logits), (self.n_banks,))

    def forward(self, x: T.Tensor, x_s: T.Tensor, mode: str) -> T.Tensor:
        gate = self.gate(x_s)
        h = x
        for li, layer in enumerate(self.layers):
            w = T.bank_mix(gate, layer["w"])
            b = T.bank_mix(gate, layer["b"])
            h = T.add(T.matmul(h, w), b)
            if layer["bn"] is not None:
                gamma = T.bank_mix(gate, layer["gamma"])
                beta = T.bank_mix(gate, layer["beta"])
                h = T.batch_norm(h, gamma, beta, layer["bn"], mode)
                h = T.relu(h)
        return h


class GatedLinear:
    """One gate-mixed linear layer, no activation or normalization."""

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 cfg: ModelConfig, rng: np.random.Generator, zero: bool):
        s = cfg.n_banks
        self.n_banks = s
        w = np.zeros((s, in_dim, out_dim)) if zero else np.stack(
            [_kaiming_uniform(rng, (in_dim, out_dim), in_dim) for _ in range(s)])
        self.w = store.add(f"{name}.w", w)
        self.b = store.add(f"{name}.b", np.zeros((s, out_dim)))
        self.gate_w = store.add(f"{name}.gate.w", _kaiming_uniform(rng, (cfg.f_s, s), cfg.f_s))
        self.gate_b = store.add(f"{name}.gate.b", np.zeros(s))

    def forward(self, x: T.Tensor, x_s: T.Tensor) -> T.Tensor:
        logits = T.add(T.matmul(x_s, self.gate_w), self.gate_b)
        gate = T.reshape(T.softmax_last(logits), (self.n_banks,))
        w = T.bank_mix(gate, self.w)
        b = T.bank_mix(gate, self.b)
        return T.add(T.matmul(x, w), b)


# -- pair lifting ------------------------------------------------------------------


def cross_concat(x: T.Tensor) -> T.Tensor:
    """Lift candidates to a pair grid where cell (i, j) sees both sides.

    Rank-2 input [N, F]: cell (i, j) = concat(x[i], x[j]). Pair-indexed
    input [N, N, F]: cell (i, j) = concat(x[i, j], x[j, i]). Either way the
    feature width doubles and the first halves of (i, j) match the second
    halves of (j, i).
    """
    if x.ndim == 2:
        tiled = T.tile_rows(x)
    elif x.ndim == 3:
        tiled = x
    else:
        raise T.ShapeError(f"cross_concat expects rank 2 or 3, got shape {x.shape}")
    return T.concat_last([tiled, T.pair_transpose(tiled)])


# -- forward artifacts ----------------------------------------------------------------


@dataclass
class ForwardArtifacts:
    """Everything a forward pass exposes for losses and explanations."""

    route_probs: T.Tensor  # [N]
    pair_probs: T.Tensor | None = None  # [N, N]
    teacher_probs: T.Tensor | None = None  # [N, N]
    field_scores: T.Tensor | None = None  # [N, N, M]
    pooled_scores: T.Tensor | None = None  # [N, N], pre-sigmoid
    pair_input: T.Tensor | None = None  # [N, N, W]
    block_outputs: list = dc_field(default_factory=list)
    attention: T.Tensor | None = None  # [N, N] rows of the attention baseline


class Ranker:
    """Listwise route scorer with configurable interaction style.

    ``use_cco=True`` builds the pairwise-grid model. ``use_cco=False``
    falls back to single-head self-attention over flattened rows when pair
    features are kept (``use_xc=True``) and to a pointwise scorer when they
    are dropped, which are the two reference baselines.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.dtype = T.get_default_dtype()
        self.partition = cfg.partition()
        self.store = ParamStore(self.dtype)
        rng = np.random.default_rng([seed, 0x52414E4B])

        if cfg.use_cco:
            w_pair = cfg.pair_input_width()
            if cfg.use_ps:
                if cfg.ps_linear:
                    self.field_mlps = {
                        name: ScenarioMLP(self.store, f"fields.{name}",
                                          F.field_input_width(self.partition, name),
                                          cfg, rng, head=False)
                        for name in self.partition.names
                    }
                    self.pair_mix = GatedLinear(self.store, "pair_mix", cfg.h3, 1,
                                                cfg, rng, zero=True)
                    if cfg.distill:
                        self.teacher = ScenarioMLP(self.store, "teacher", w_pair,
                                                   cfg, rng, head=True)
                else:
                    self.scorer = ScenarioMLP(self.store, "scorer", w_pair, cfg,
                                              rng, head=True)
            else:
                self.block0 = ScenarioMLP(self.store, "block0", w_pair, cfg, rng,
                                          head=False)
            in_dim = 2 * (1 if cfg.use_ps else cfg.h3)
            self.ccb_mlps = []
            for k in range(cfg.k_blocks):
                self.ccb_mlps.append(
                    ScenarioMLP(self.store, f"ccb{k}", in_dim, cfg, rng, head=False))
                in_dim = 2 * cfg.h3
            self.head_w = self.store.add("head.w", np.zeros((cfg.h3, 1)))
            self.head_b = self.store.add("head.b", np.zeros(1))
        elif cfg.use_xc:
            row_w = cfg.f_r + cfg.f_u + cfg.f_h + cfg.sa_max_routes * cfg.f_c
            self.att_q = self.store.add("att.q", _kaiming_uniform(rng, (row_w, cfg.d_att), row_w))
            self.att_k = self.store.add("att.k", _kaiming_uniform(rng, (row_w, cfg.d_att), row_w))
            self.att_v = self.store.add("att.v", _kaiming_uniform(rng, (row_w, cfg.d_att), row_w))
            self.row_head = ScenarioMLP(self.store, "row_head", row_w + cfg.d_att,
                                        cfg, rng, head=True)
        else:
            self.row_head = ScenarioMLP(self.store, "row_head",
                                        cfg.f_r + cfg.f_u + cfg.f_h, cfg, rng, head=True)

    # -- input prep ------------------------------------------------------------

    def _inputs(self, sample: F.Sample):
        dt = self.dtype
        n = sample.n_routes
        x_r = T.Tensor(sample.x_r, dtype=dt)
        x_u = T.Tensor(sample.x_u, dtype=dt)
        x_s = T.Tensor(sample.x_s, dtype=dt)
        x_c = T.Tensor(sample.x_c, dtype=dt)
        x_h = T.Tensor(sample.x_h if sample.x_h is not None else np.zeros((n, F.F_H)), dtype=dt)
        return x_r, x_u, x_s, x_c, x_h

    def _row_grid(self, x: T.Tensor, n: int) -> T.Tensor:
        """Broadcast a [1, F] vector to an [N, N, F] grid."""
        ones = T.Tensor(np.ones((n, 1), dtype=self.dtype))
        return T.tile_rows(T.matmul(ones, x))

    # -- forward ---------------------------------------------------------------

    def forward(self, sample: F.Sample, mode: str = "train") -> ForwardArtifacts:
        if self.cfg.use_cco:
            return self._forward_pairwise(sample, mode)
        if self.cfg.use_xc:
            return self._forward_attention(sample, mode)
        return self._forward_pointwise(sample, mode)

    def _forward_pairwise(self, sample: F.Sample, mode: str) -> ForwardArtifacts:
        cfg = self.cfg
        x_r, x_u, x_s, x_c, x_h = self._inputs(sample)
        n = sample.n_routes

        c_r = cross_concat(x_r)
        if cfg.use_xc:
            c_c = cross_concat(x_c)
        else:
            c_c = T.Tensor(np.zeros((n, n, 2 * cfg.f_c)), dtype=self.dtype)
        u_grid = self._row_grid(x_u, n)
        h_grid = T.tile_rows(x_h)
        c_e = T.concat_last([c_r, c_c, u_grid, h_grid])

        art = ForwardArtifacts(route_probs=None, pair_input=c_e)
        if cfg.use_ps:
            if cfg.ps_linear:
                fields = F.gather_fields(c_e, self.partition, x_u, x_h)
                d_prime = []
                for name, f_in in zip(self.partition.names, fields):
                    d_m = self.field_mlps[name].forward(f_in, x_s, mode)
                    d_prime.append(self.pair_mix.forward(d_m, x_s))
                d_prime = T.concat_last(d_prime)  # [N, N, M]
                s_e = T.sub(d_prime, T.pair_transpose(d_prime))
                pooled = T.sum_pool(s_e, axis=2)  # [N, N]
                p_e = T.sigmoid(pooled)
                art.field_scores = s_e
                art.pooled_scores = pooled
                art.pair_probs = p_e
                if cfg.distill:
                    d_hat = T.reshape(self.teacher.forward(c_e, x_s, mode), (n, n))
                    art.teacher_probs = T.sigmoid(T.sub(d_hat, T.pair_transpose(d_hat)))
            else:
                d_hat = T.reshape(self.scorer.forward(c_e, x_s, mode), (n, n))
                pooled = T.sub(d_hat, T.pair_transpose(d_hat))
                art.pooled_scores = pooled
                art.pair_probs = T.sigmoid(pooled)
            x_k = T.reshape(art.pair_probs, (n, n, 1))
        else:
            x_k = self.block0.forward(c_e, x_s, mode)
            art.block_outputs.append(x_k)

        for mlp in self.ccb_mlps:
            rows = T.sum_pool(x_k, axis=1)  # permutation-safe row aggregate
            x_k = mlp.forward(cross_concat(rows), x_s, mode)
            art.block_outputs.append(x_k)

        o = T.add(T.matmul(x_k, self.head_w), self.head_b)  # [N, N, 1]
        pooled_o = T.sum_pool(o, axis=1)  # [N, 1]
        art.route_probs = T.reshape(T.softmax_last(T.reshape(pooled_o, (1, n))), (n,))
        return art

    def _sa_rows(self, sample: F.Sample):
        """Rows for the attention baseline: route, user, history, and the
        flattened (pair-alignment-losing) pair features, zero-padded to the
        configured maximum candidate count."""
        cfg = self.cfg
        n = sample.n_routes
        flat = np.zeros((n, cfg.sa_max_routes * cfg.f_c))
        m = min(n, cfg.sa_max_routes)
        flat[:, : m * cfg.f_c] = sample.x_c[:, :m, :].reshape(n, m * cfg.f_c)
        return flat

    def _forward_attention(self, sample: F.Sample, mode: str) -> ForwardArtifacts:
        cfg = self.cfg
        x_r, x_u, x_s, _, x_h = self._inputs(sample)
        n = sample.n_routes
        ones = T.Tensor(np.ones((n, 1), dtype=self.dtype))
        u_rows = T.matmul(ones, x_u)
        xc_flat = T.Tensor(self._sa_rows(sample), dtype=self.dtype)
        rows = T.concat_last([x_r, u_rows, x_h, xc_flat])

        q = T.matmul(rows, self.att_q)
        k = T.matmul(rows, self.att_k)
        v = T.matmul(rows, self.att_v)
        att = T.softmax_last(T.mul(T.matmul(q, T.transpose2(k)), 1.0 / math.sqrt(cfg.d_att)))
        ctx = T.matmul(att, v)
        h = T.concat_last([rows, ctx])
        scores = self.row_head.forward(h, x_s, mode)  # [N, 1]
        p_r = T.reshape(T.softmax_last(T.reshape(scores, (1, n))), (n,))
        return ForwardArtifacts(route_probs=p_r, attention=att)

    def _forward_pointwise(self, sample: F.Sample, mode: str) -> ForwardArtifacts:
        x_r, x_u, x_s, _, x_h = self._inputs(sample)
        n = sample.n_routes
        ones = T.Tensor(np.ones((n, 1), dtype=self.dtype))
        rows = T.concat_last([x_r, T.matmul(ones, x_u), x_h])
        scores = self.row_head.forward(rows, x_s, mode)
        p_r = T.reshape(T.softmax_last(T.reshape(scores, (1, n))), (n,))
        return ForwardArtifacts(route_probs=p_r)

    # -- convenience -------------------------------------------------------------

    def parameters(self) -> dict:
        return self.store.params

    def n_params(self) -> int:
        return self.store.n_params()

    def recommend(self, sample: F.Sample) -> int:
        """Index of the top-scored route in eval mode, ties to the smallest."""
        art = self.forward(sample, mode="eval")
        return int(np.argmax(art.route_probs.data))


def baseline_pointwise(sample: F.Sample, model: Ranker) -> np.ndarray:
    """Per-route softmax scores from a rowwise scorer, no route interaction."""
    if model.cfg.use_cco or model.cfg.use_xc:
        raise ValueError("model is not configured as the pointwise baseline")
    return model.forward(sample, mode="eval").route_probs.data


def baseline_self_attention(sample: F.Sample, model: Ranker) -> np.ndarray:
    """Scores from the self-attention interaction over flattened pair rows."""
    if model.cfg.use_cco or not model.cfg.use_xc:
        raise ValueError("model is not configured as the self-attention baseline")
    return model.forward(sample, mode="eval").route_probs.data
