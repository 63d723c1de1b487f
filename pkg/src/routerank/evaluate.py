"""Offline metrics, rule baselines, the ablation harness, explanations, and
parameter accounting.

The headline metrics are the mean coverage rate of the recommended route
(cr_off), top-1 accuracy against the best-coverage label, and the AUC of
pair probabilities over the labeled pair mask pooled across samples (ties
count one half). A per-sample-averaged AUC is reported alongside but the
pooled number is the headline, since per-sample pair lists are tiny.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field

import numpy as np

from .features import Sample
from .model import ModelConfig, Ranker
from .training import TrainConfig, pair_mask, train


# -- AUC ------------------------------------------------------------------------


def auc_score(scores, labels) -> float | None:
    """Mann-Whitney AUC with midrank tie handling.

    Returns None when either class is absent.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0], dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < scores.shape[0]:
        j = i
        while j + 1 < scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# -- evaluation -----------------------------------------------------------------------


@dataclass
class EvalReport:
    model: str
    cr_off: float
    top1_acc: float
    pair_auc: float | None
    pair_auc_macro: float | None
    n_samples: int
    seed: int
    config_hash: str

    def as_row(self) -> dict:
        return {
            "model": self.model,
            "cr_off": self.cr_off,
            "top1_acc": self.top1_acc,
            "pair_auc": "" if self.pair_auc is None else self.pair_auc,
            "pair_auc_macro": "" if self.pair_auc_macro is None else self.pair_auc_macro,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


EVAL_COLUMNS = ("model", "cr_off", "top1_acc", "pair_auc", "pair_auc_macro",
                "n_samples", "seed", "config_hash")


def evaluate(model: Ranker, samples: list, name: str = "model",
             seed: int = 0) -> EvalReport:
    """Deterministic eval-mode pass over a normalized dataset."""
    if not samples:
        raise ValueError("evaluate needs a nonempty dataset")
    crs = []
    hits = 0
    pooled_scores = []
    pooled_labels = []
    per_sample_auc = []
    for sample in samples:
        art = model.forward(sample, mode="eval")
        rec = int(np.argmax(art.route_probs.data))
        crs.append(sample.routes[rec].cr)
        hits += int(rec == sample.l)
        if art.pair_probs is not None:
            mask = pair_mask(sample.n_routes, sample.l)
            s = art.pair_probs.data[mask]
            y = sample.y_e[mask]
            pooled_scores.append(s)
            pooled_labels.append(y)
            a = auc_score(s, y)
            if a is not None:
                per_sample_auc.append(a)
    pair_auc = None
    macro = None
    if pooled_scores:
        pair_auc = auc_score(np.concatenate(pooled_scores), np.concatenate(pooled_labels))
        macro = float(np.mean(per_sample_auc)) if per_sample_auc else None
    return EvalReport(
        model=name, cr_off=float(np.mean(crs)), top1_acc=hits / len(samples),
        pair_auc=pair_auc, pair_auc_macro=macro, n_samples=len(samples),
        seed=seed, config_hash=model.cfg.config_hash(),
    )


# -- rule baselines ----------------------------------------------------------------


def _select_by(samples: list, key, minimize: bool) -> tuple:
    crs = []
    hits = 0
    for s in samples:
        vals = np.array([key(r) for r in s.routes])
        pick = int(np.argmin(vals) if minimize else np.argmax(vals))
        crs.append(s.routes[pick].cr)
        hits += int(pick == s.l)
    return float(np.mean(crs)), hits / len(samples)


def run_baselines(samples: list) -> list:
    """Shortest-distance, shortest-ETA, and best-recall-score selectors."""
    if not samples:
        raise ValueError("run_baselines needs a nonempty dataset")
    out = []
    for name, key, minimize in (
        ("sd", lambda r: r.stats.length_m, True),
        ("st", lambda r: r.stats.eta_cong_s, True),
        ("recall", lambda r: r.recall_score, False),
    ):
        cr, top1 = _select_by(samples, key, minimize)
        out.append(EvalReport(model=name, cr_off=cr, top1_acc=top1, pair_auc=None,
                              pair_auc_macro=None, n_samples=len(samples), seed=0,
                              config_hash="-"))
    return out


def write_reports_csv(path: str, reports: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.as_row())


# -- ablation harness --------------------------------------------------------------


ABLATION_VARIANTS = {
    # mirrors the component and pair-scorer ablation grids
    "pointwise": dict(use_xc=False, use_cco=False, use_ps=False, distill=False),
    "sa": dict(use_xc=True, use_cco=False, use_ps=False, distill=False),
    "no_xc": dict(use_xc=False, use_cco=True, use_ps=True, distill=True),
    "no_ps": dict(use_xc=True, use_cco=True, use_ps=False, distill=False),
    "full": dict(use_xc=True, use_cco=True, use_ps=True, distill=True),
    "ps_plain": dict(use_xc=True, use_cco=True, use_ps=True, distill=False),
    "ps_free": dict(use_xc=True, use_cco=True, use_ps=True, distill=False,
                    ps_linear=False),
}


@dataclass
class AblationRow:
    variant: str
    seeds: list
    cr_off_mean: float
    cr_off_std: float
    top1_mean: float
    top1_std: float
    auc_mean: float | None
    auc_std: float | None
    reports: list = dc_field(default_factory=list)


def make_variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    d = base.to_dict()
    d.update(ABLATION_VARIANTS[variant])
    return ModelConfig.from_dict(d)


def run_ablation(train_samples: list, test_samples: list, base_cfg: ModelConfig,
                 train_cfg: TrainConfig, variants=None, seeds=(0, 1, 2),
                 log_fn=None) -> list:
    """Train every variant on each seed and tabulate mean and std metrics."""
    variants = list(variants or ABLATION_VARIANTS)
    rows = []
    for variant in variants:
        cfg = make_variant_config(base_cfg, variant)
        reports = []
        for seed in seeds:
            tc = TrainConfig(optimizer=train_cfg.optimizer, lr=train_cfg.lr,
                             batch_size=train_cfg.batch_size, epochs=train_cfg.epochs,
                             seed=seed, clip_norm=train_cfg.clip_norm,
                             eval_every=train_cfg.epochs)
            model, _ = train(train_samples, test_samples, cfg, tc)
            report = evaluate(model, test_samples, name=variant, seed=seed)
            reports.append(report)
            if log_fn is not None:
                log_fn(variant, seed, report)
        crs = np.array([r.cr_off for r in reports])
        top1 = np.array([r.top1_acc for r in reports])
        aucs = [r.pair_auc for r in reports if r.pair_auc is not None]
        rows.append(AblationRow(
            variant=variant, seeds=list(seeds),
            cr_off_mean=float(crs.mean()), cr_off_std=float(crs.std()),
            top1_mean=float(top1.mean()), top1_std=float(top1.std()),
            auc_mean=float(np.mean(aucs)) if aucs else None,
            auc_std=float(np.std(aucs)) if aucs else None,
            reports=reports,
        ))
    return rows


def write_ablation_csv(path: str, rows: list) -> None:
    cols = ("variant", "seeds", "cr_off_mean", "cr_off_std", "top1_mean",
            "top1_std", "auc_mean", "auc_std")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([
                r.variant, " ".join(str(s) for s in r.seeds),
                r.cr_off_mean, r.cr_off_std, r.top1_mean, r.top1_std,
                "" if r.auc_mean is None else r.auc_mean,
                "" if r.auc_std is None else r.auc_std,
            ])


# -- explanations -----------------------------------------------------------------


class ExplanationError(RuntimeError):
    """Explanation requested from a model without the field scorer."""


@dataclass
class Explanation:
    """Field-level decomposition of one pair probability."""

    sample_id: str
    i: int
    j: int
    field_scores: dict  # field name -> signed score
    score_sum: float
    pair_prob: float

    def ranked_fields(self) -> list:
        return sorted(self.field_scores, key=lambda k: -abs(self.field_scores[k]))

    def render(self) -> str:
        lines = [f"pair ({self.i}, {self.j}) of {self.sample_id}: "
                 f"P(better) = {self.pair_prob:.4f}"]
        for name in self.ranked_fields():
            v = self.field_scores[name]
            favored = self.i if v > 0 else self.j
            tag = f"favors route {favored}" if v != 0 else "neutral"
            lines.append(f"  {name:<12} {v:+.4f}  ({tag})")
        lines.append(f"  {'sum':<12} {self.score_sum:+.4f}")
        return "\n".join(lines)


def explain(model: Ranker, sample: Sample, i: int, j: int) -> Explanation:
    """Per-field scores for 'route i is better than route j'.

    The field scores are read from the same forward pass that produced the
    pair probability, so their sum reproduces the pre-sigmoid pooled score
    bit for bit.
    """
    if not (model.cfg.use_ps and model.cfg.ps_linear):
        raise ExplanationError("explanations require the field-restricted pair scorer")
    n = sample.n_routes
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"pair ({i}, {j}) out of range for {n} routes")
    art = model.forward(sample, mode="eval")
    scores = art.field_scores.data[i, j]
    return Explanation(
        sample_id=sample.sample_id, i=i, j=j,
        field_scores={name: float(v) for name, v in zip(model.partition.names, scores)},
        score_sum=float(art.pooled_scores.data[i, j]),
        pair_prob=float(art.pair_probs.data[i, j]),
    )


def explain_recommendation(model: Ranker, sample: Sample) -> str:
    """Text report for the recommended route against every alternative."""
    rec = model.recommend(sample)
    parts = [f"recommended route {rec} for {sample.sample_id}"]
    for j in range(sample.n_routes):
        if j == rec:
            continue
        parts.append(explain(model, sample, rec, j).render())
    return "\n".join(parts)


# -- parameter accounting ------------------------------------------------------------


@dataclass
class ParamCountReport:
    exact: int
    approx: int
    ratio: float
    f32_bytes: int

    def render(self) -> str:
        return (f"exact parameters: {self.exact}\n"
                f"block-formula approximation: {self.approx}\n"
                f"exact / approx ratio: {self.ratio:.3f}\n"
                f"f32 size: {self.f32_bytes} bytes ({self.f32_bytes / 2**20:.2f} MiB)")


def param_count(cfg: ModelConfig) -> ParamCountReport:
    """Exact parameter count next to the block-formula approximation.

    The approximation multiplies the per-block dense-layer weight count by
    the bank count and the number of comparison blocks including the
    multi-input one; it omits gates, normalization parameters, biases, and
    heads, so the exact count always exceeds it.
    """
    model = Ranker(cfg, seed=0)
    exact = model.n_params()
    f = cfg.pair_input_width()
    per_block = f * cfg.h1 + cfg.h1 * cfg.h2 + cfg.h2 * cfg.h3 + cfg.h3 * cfg.h4
    approx = (cfg.k_blocks + 1) * cfg.n_banks * per_block
    return ParamCountReport(exact=exact, approx=approx, ratio=exact / approx,
                            f32_bytes=4 * exact)
