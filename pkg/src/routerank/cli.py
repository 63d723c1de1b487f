"""Command-line surface: data generation, training, evaluation, ablations,
explanations, gradient checks, and parameter accounting.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import features as F
from . import tensor as T
from .config import ConfigError, load_config
from .evaluate import (evaluate, explain, explain_recommendation, param_count,
                       run_ablation, run_baselines, write_ablation_csv,
                       write_reports_csv, ExplanationError)
from .model import Ranker
from .training import (CheckpointError, NumericAbort, load_checkpoint,
                       save_checkpoint, train)
from .world import generate_dataset, split_dataset

logger = logging.getLogger("routerank")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class DataError(RuntimeError):
    pass


def _build_parser() -> _Parser:
    parser = _Parser(prog="routerank", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, *, config=False, seed=False, out=False, dataset=False,
               checkpoint=False, sample_id=False, pair=False):
        if config:
            p.add_argument("--config", metavar="PATH", default=None)
        if seed:
            p.add_argument("--seed", metavar="U64", type=int, default=None)
        if out:
            p.add_argument("--out", metavar="PATH", default=None)
        if dataset:
            p.add_argument("--dataset", metavar="PATH", default=None)
        if checkpoint:
            p.add_argument("--checkpoint", metavar="PATH", default=None)
        if sample_id:
            p.add_argument("--sample-id", metavar="ID", default=None)
        if pair:
            p.add_argument("--pair", metavar=("I", "J"), type=int, nargs=2, default=None)

    common(sub.add_parser("gen-data", help="generate a synthetic dataset"),
           config=True, seed=True, out=True)
    common(sub.add_parser("train", help="train a model on a dataset"),
           config=True, seed=True, out=True, dataset=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint plus rule baselines"),
           config=True, out=True, dataset=True, checkpoint=True)
    common(sub.add_parser("ablate", help="train and compare ablation variants"),
           config=True, seed=True, out=True, dataset=True)
    common(sub.add_parser("explain", help="field-level explanation for a pair"),
           config=True, dataset=True, checkpoint=True, sample_id=True, pair=True)
    common(sub.add_parser("grad-check", help="verify gradients against finite differences"),
           config=True, seed=True)
    common(sub.add_parser("param-count", help="exact and approximate parameter counts"),
           config=True)
    return parser


def _require(args, parser, **named):
    for flag, value in named.items():
        if value is None:
            parser.error(f"--{flag} is required for {args.command}")


def _load_normalized(dataset_path, run_cfg, norm_stats=None):
    samples = F.load_dataset(dataset_path)
    train_raw, test_raw = split_dataset(samples, run_cfg.dataset)
    if norm_stats is None:
        norm_stats, train_n, test_n = F.normalize_split(train_raw, test_raw)
    else:
        train_n = [norm_stats.apply(s) for s in train_raw]
        test_n = [norm_stats.apply(s) for s in test_raw]
    return norm_stats, train_n, test_n


def _cmd_gen_data(args, parser) -> int:
    _require(args, parser, out=args.out)
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else 0
    stats = generate_dataset(cfg.dataset, seed, args.out)
    for k, v in stats.items():
        print(f"{k}: {v}")
    return EXIT_OK


def _cmd_train(args, parser) -> int:
    _require(args, parser, dataset=args.dataset, out=args.out)
    cfg = load_config(args.config)
    tc = cfg.train
    if args.seed is not None:
        tc = type(tc)(optimizer=tc.optimizer, lr=tc.lr, batch_size=tc.batch_size,
                      epochs=tc.epochs, seed=args.seed, clip_norm=tc.clip_norm,
                      eval_every=tc.eval_every)
    norm_stats, train_n, test_n = _load_normalized(args.dataset, cfg)
    model, rows = train(train_n, test_n, cfg.model, tc,
                        metrics_path=args.out + ".metrics.csv",
                        log_fn=lambda row: logger.info("epoch %s total %.4f cr_off %s",
                                                       row["epoch"], row["total"],
                                                       row["cr_off"]))
    save_checkpoint(model, args.out, norm_stats)
    final = evaluate(model, test_n, seed=tc.seed)
    print(f"cr_off: {final.cr_off:.4f}")
    print(f"top1_acc: {final.top1_acc:.4f}")
    print(f"pair_auc: {final.pair_auc if final.pair_auc is not None else 'n/a'}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def _cmd_eval(args, parser) -> int:
    _require(args, parser, dataset=args.dataset, checkpoint=args.checkpoint)
    cfg = load_config(args.config)
    model, norm_stats = load_checkpoint(args.checkpoint)
    if norm_stats is None:
        raise DataError("checkpoint has no normalization stats")
    _, _, test_n = _load_normalized(args.dataset, cfg, norm_stats)
    reports = [evaluate(model, test_n)] + run_baselines(test_n)
    for r in reports:
        auc = f"{r.pair_auc:.4f}" if r.pair_auc is not None else "n/a"
        print(f"{r.model:<10} cr_off={r.cr_off:.4f} top1={r.top1_acc:.4f} pair_auc={auc}")
    if args.out:
        write_reports_csv(args.out, reports)
    return EXIT_OK


def _cmd_ablate(args, parser) -> int:
    _require(args, parser, dataset=args.dataset, out=args.out)
    cfg = load_config(args.config)
    _, train_n, test_n = _load_normalized(args.dataset, cfg)
    rows = run_ablation(train_n, test_n, cfg.model, cfg.train,
                        variants=cfg.ablate.variants, seeds=cfg.ablate.seeds,
                        log_fn=lambda v, s, r: logger.info(
                            "%s seed %s cr_off %.4f", v, s, r.cr_off))
    write_ablation_csv(args.out, rows)
    for r in rows:
        print(f"{r.variant:<10} cr_off={r.cr_off_mean:.4f}±{r.cr_off_std:.4f} "
              f"top1={r.top1_mean:.4f}")
    return EXIT_OK


def _cmd_explain(args, parser) -> int:
    _require(args, parser, dataset=args.dataset, checkpoint=args.checkpoint,
             **{"sample-id": args.sample_id})
    cfg = load_config(args.config)
    model, norm_stats = load_checkpoint(args.checkpoint)
    if norm_stats is None:
        raise DataError("checkpoint has no normalization stats")
    samples = F.load_dataset(args.dataset)
    match = [s for s in samples if s.sample_id == args.sample_id]
    if not match:
        raise DataError(f"sample id {args.sample_id!r} not found in {args.dataset}")
    sample = norm_stats.apply(match[0])
    if args.pair is not None:
        i, j = args.pair
        print(explain(model, sample, i, j).render())
    else:
        print(explain_recommendation(model, sample))
    return EXIT_OK


def _cmd_grad_check(args, parser) -> int:
    from .model import ModelConfig
    from .training import total_loss
    from .world import DatasetConfig, build_sample, generate_graph
    from .roadnet import GraphConfig

    seed = args.seed if args.seed is not None else 0
    T.set_default_dtype(np.float64)
    try:
        checks = []
        rng = np.random.default_rng(seed)
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        checks.append(("matmul", T.grad_check(lambda: T.sum_all(T.matmul(x, w)), [x, w])))
        y = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        checks.append(("sigmoid_chain", T.grad_check(
            lambda: T.sum_all(T.sigmoid(T.mul(y, y))), [y])))

        g = generate_graph(GraphConfig(grid_w=4, grid_h=4), seed=seed)
        ds = DatasetConfig(n_samples=1, n_routes=3, n_graphs=1, min_od_dist_m=900.0,
                           graph=GraphConfig(grid_w=4, grid_h=4))
        sample = build_sample("s0", g, g.largest_component(), ds,
                              np.random.default_rng([seed, 3]))
        sample.x_h = np.zeros((sample.n_routes, F.F_H))
        cfg = ModelConfig(k_blocks=1, n_banks=2, h1=6, h2=5, h3=4)
        model = Ranker(cfg, seed=seed)
        params = list(model.parameters().values())

        def full():
            art = model.forward(sample, mode="eval")
            loss, _ = total_loss(art, sample, cfg)
            return loss

        checks.append(("full_graph", T.grad_check(full, params, tol=1e-4)))
        ok = True
        for name, report in checks:
            status = "PASS" if report.passed else "FAIL"
            print(f"{status} {name}: max_rel_error={report.max_rel_error:.3e} "
                  f"(tol {report.tol:g}, {report.n_elements} elements)")
            ok = ok and report.passed
        return EXIT_OK if ok else EXIT_NUMERIC
    finally:
        T.set_default_dtype(np.float32)


def _cmd_param_count(args, parser) -> int:
    cfg = load_config(args.config)
    print(param_count(cfg.model).render())
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "explain": _cmd_explain,
    "grad-check": _cmd_grad_check,
    "param-count": _cmd_param_count,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args, parser)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, CheckpointError, ExplanationError,
            FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
