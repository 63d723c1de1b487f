"""Losses, the optimizer loop, and binary checkpointing.

The listwise loss is the cross-entropy of the softmax route scores against
the one-hot best-route label. When pair scoring is on, three more terms
are summed over the pairs that contain the labeled route: a pair loss and
a teacher loss against the strict pairwise label, and a distillation loss
that pushes the restricted pair scores toward the detached teacher
probabilities. Each term is a literal single-term sum -y * log(p); because
the mask holds both orientations of every pair and the scores are
antisymmetric, the distillation sum is equivalent to a full binary
cross-entropy per unordered pair (tested, not assumed).
"""

from __future__ import annotations

import csv
import io
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .features import NormStats, Sample
from .model import ForwardArtifacts, ModelConfig, Ranker


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss; carries the offending sample id."""

    def __init__(self, sample_id: str, value: float):
        super().__init__(f"non-finite loss {value!r} on sample {sample_id}")
        self.sample_id = sample_id


@dataclass
class LossBreakdown:
    l_r: float
    l_pair: float
    l_teacher: float
    l_distill: float

    @property
    def l_p(self) -> float:
        return self.l_pair + self.l_teacher + self.l_distill

    def total(self, lam: float) -> float:
        return self.l_r + lam * self.l_p


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    clip_norm: float = 5.0
    eval_every: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr must be positive and batch/epochs at least 1")


def pair_mask(n: int, l: int) -> np.ndarray:
    """Boolean [n, n] mask of off-diagonal pairs containing route l."""
    if not 0 <= l < n:
        raise ValueError(f"label index {l} out of range for {n} routes")
    idx = np.arange(n)
    mask = (idx[:, None] == l) | (idx[None, :] == l)
    np.fill_diagonal(mask, False)
    return mask


def loss_route(p_r: T.Tensor, y_r: np.ndarray) -> T.Tensor:
    return T.cross_entropy(p_r, y_r.astype(p_r.data.dtype))


def loss_pairs(p_e: T.Tensor, p_teacher: T.Tensor | None, y_e: np.ndarray, l: int):
    """Masked pair, teacher, and distillation losses (tensors, or 0.0)."""
    n = y_e.shape[0]
    mask = pair_mask(n, l).astype(p_e.data.dtype)
    y_masked = y_e.astype(p_e.data.dtype) * mask
    l_pair = T.cross_entropy(p_e, y_masked)
    if p_teacher is None:
        return l_pair, 0.0, 0.0
    l_teacher = T.cross_entropy(p_teacher, y_masked)
    soft = p_teacher.detach().data * mask
    l_distill = T.cross_entropy(p_e, soft)
    return l_pair, l_teacher, l_distill


def total_loss(art: ForwardArtifacts, sample: Sample, cfg: ModelConfig):
    """Combined loss tensor and its per-term breakdown."""
    l_r = loss_route(art.route_probs, sample.y_r)
    if cfg.use_ps and art.pair_probs is not None:
        l_pair, l_teacher, l_distill = loss_pairs(
            art.pair_probs, art.teacher_probs, sample.y_e, sample.l)
        l_p = l_pair
        if not isinstance(l_teacher, float):
            l_p = T.add(T.add(l_pair, l_teacher), l_distill)
        total = T.add(l_r, T.mul(l_p, cfg.lam))
        breakdown = LossBreakdown(
            l_r=float(l_r.data),
            l_pair=float(l_pair.data),
            l_teacher=float(l_teacher if isinstance(l_teacher, float) else l_teacher.data),
            l_distill=float(l_distill if isinstance(l_distill, float) else l_distill.data),
        )
    else:
        total = l_r
        breakdown = LossBreakdown(l_r=float(l_r.data), l_pair=0.0, l_teacher=0.0, l_distill=0.0)
    return total, breakdown


# -- optimizer ---------------------------------------------------------------------


class Adam:
    """Standard Adam on a named parameter dict, with global norm clipping."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float = 5.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grad_scale: float = 1.0) -> None:
        grads = {}
        sq = 0.0
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * grad_scale
            grads[k] = g
            sq += float((g * g).sum())
        norm = np.sqrt(sq)
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
            for k in grads:
                grads[k] = grads[k] * scale
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            p = self.params[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- training loop -------------------------------------------------------------------


METRIC_COLUMNS = ("epoch", "l_r", "l_pair", "l_teacher", "l_distill", "total",
                  "cr_off", "top1_acc", "pair_auc")


def train(train_samples: list, test_samples: list, model_cfg: ModelConfig,
          train_cfg: TrainConfig, metrics_path: str | None = None,
          log_fn=None) -> tuple:
    """Mini-batch training with per-sample forwards and averaged gradients.

    Candidate counts may vary per sample, so there is no padding; each
    sample runs its own forward/backward and gradients are averaged over
    the batch. Returns the trained model and the per-epoch metric rows.
    """
    from .evaluate import evaluate  # local import to avoid a cycle

    model = Ranker(model_cfg, seed=train_cfg.seed)
    opt = Adam(model.parameters(), lr=train_cfg.lr, clip_norm=train_cfg.clip_norm)
    order_rng = np.random.default_rng([train_cfg.seed, 0xB47C4])
    rows = []
    n = len(train_samples)
    for epoch in range(train_cfg.epochs):
        order = order_rng.permutation(n)
        sums = np.zeros(4)
        seen = 0
        for start in range(0, n, train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            opt.zero_grad()
            for si in batch:
                sample = train_samples[int(si)]
                art = model.forward(sample, mode="train")
                loss, breakdown = total_loss(art, sample, model_cfg)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NumericAbort(sample.sample_id, value)
                loss.backward()
                sums += (breakdown.l_r, breakdown.l_pair, breakdown.l_teacher,
                         breakdown.l_distill)
                seen += 1
            opt.step(grad_scale=1.0 / len(batch))
        means = sums / max(seen, 1)
        row = {
            "epoch": epoch,
            "l_r": means[0], "l_pair": means[1], "l_teacher": means[2],
            "l_distill": means[3],
            "total": means[0] + model_cfg.lam * (means[1] + means[2] + means[3]),
            "cr_off": "", "top1_acc": "", "pair_auc": "",
        }
        if test_samples and (epoch + 1) % train_cfg.eval_every == 0:
            report = evaluate(model, test_samples)
            row["cr_off"] = report.cr_off
            row["top1_acc"] = report.top1_acc
            row["pair_auc"] = "" if report.pair_auc is None else report.pair_auc
        rows.append(row)
        if log_fn is not None:
            log_fn(row)
    if metrics_path:
        write_metrics(metrics_path, rows)
    return model, rows


def write_metrics(path: str, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- checkpoints ----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CCN1"


class CheckpointError(RuntimeError):
    """Malformed, truncated, or incompatible checkpoint file."""


def save_checkpoint(model: Ranker, path: str, norm_stats: NormStats | None = None) -> None:
    """Binary little-endian dump of every named array plus the config."""
    arrays = dict(model.store.named_arrays())
    if norm_stats is not None:
        arrays.update(norm_stats.named_arrays())
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    cfg_b = model.cfg.to_dict()
    import json
    cfg_json = json.dumps(cfg_b, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError("truncated checkpoint file")
    return data


def load_checkpoint(path: str):
    """Rebuild a Ranker (and norm stats, when present) from a checkpoint.

    Every tensor shape is validated against the embedded config; any
    mismatch, bad magic, or truncation raises ``CheckpointError`` without a
    partial load.
    """
    import json
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}")
        (n_arrays,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = _read_exact(fh, 4 * count)
            arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        cfg_json = _read_exact(fh, cfg_len).decode("utf-8")
        if fh.read(1):
            raise CheckpointError("trailing bytes after config block")
    try:
        cfg = ModelConfig.from_dict(json.loads(cfg_json))
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc

    model = Ranker(cfg, seed=0)
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("norm.")}
    expected = set(model.store.named_arrays())
    if set(model_arrays) != expected:
        missing = expected - set(model_arrays)
        extra = set(model_arrays) - expected
        raise CheckpointError(f"tensor name mismatch (missing={sorted(missing)[:3]}, "
                              f"extra={sorted(extra)[:3]})")
    try:
        model.store.load_arrays(model_arrays)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc

    norm_names = {k for k in arrays if k.startswith("norm.")}
    norm_stats = None
    if norm_names:
        norm_stats = NormStats.from_named_arrays({k: arrays[k].astype(np.float64)
                                                  for k in norm_names})
    return model, norm_stats
