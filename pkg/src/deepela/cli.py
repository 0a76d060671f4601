"""Command-line entry point: ``deepela <command> [options]``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time

import numpy as np

from . import tensor as F
from .config import ConfigError, load_config


def _int_list(text: str) -> list[int]:
    """Parse ``"1-5,8,10-12"`` into a sorted list of integers."""
    out: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
            out.update(range(int(lo), int(hi) + 1))
        else:
            out.add(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty integer list {text!r}")
    return sorted(out)


def _write_text(path, text: str) -> None:
    from .model import atomic_write_bytes

    atomic_write_bytes(path, text.encode("utf-8"))


def _load_model(path):
    from .model import load_checkpoint, model_from_checkpoint

    return model_from_checkpoint(load_checkpoint(path))


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    from .randgen import GenerationStats, generate_corpus, serialize_instance

    cfg, n, dims = load_config(args.config).generator_config()
    if args.n is not None:
        n = args.n
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    stats = GenerationStats()
    t0 = time.perf_counter()
    corpus = generate_corpus(n, cfg, dims, stats)
    elapsed = time.perf_counter() - t0
    _write_text(args.out, "".join(serialize_instance(inst) + "\n" for inst in corpus))
    report = {"instances": len(corpus), "attempts": stats.attempts, "accepted": stats.accepted,
              "acceptance_rate": stats.acceptance_rate, "operator_counts": dict(sorted(stats.op_counts.items()))}
    _write_text(args.out + ".stats.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(corpus)} instances to {args.out} "
          f"(acceptance rate {stats.acceptance_rate:.3f}, {elapsed:.1f} s)")
    return 0


def cmd_pretrain(args) -> int:
    from .model import DeepELA
    from .pretrain import TrainState, resume, save_training_checkpoint, train, write_metrics
    from .randgen import read_corpus

    settings = load_config(args.config)
    pool = read_corpus(args.corpus) if args.corpus else None
    if args.resume:
        state = resume(args.resume, pool)
        every = args.checkpoint_every or 0
        steps = args.steps
    else:
        mcfg = settings.model_config(args.preset)
        tcfg, steps, every = settings.train_config(mcfg.nu)
        if args.seed is not None:
            tcfg = dataclasses.replace(tcfg, seed=args.seed)
        if pool is not None:
            bad = [(i.d, i.m) for i in pool if i.d + i.m > mcfg.nu]
            if bad:
                raise ValueError(f"corpus holds instances with d + m > nu = {mcfg.nu}, e.g. (d, m) = {bad[0]}")
            tcfg = dataclasses.replace(tcfg, corpus_size=len(pool))
        state = TrainState(DeepELA(mcfg, seed=tcfg.seed), tcfg, pool)
        if args.steps is not None:
            steps = args.steps
        every = args.checkpoint_every if args.checkpoint_every is not None else every
    total = steps if steps is not None else state.cfg.steps
    metrics = args.metrics or args.out + ".metrics.csv"

    def log(rec):
        if rec.step % 50 == 0 or rec.step == total - 1:
            print(f"step {rec.step:6d} loss {rec.loss:.5f} pos {rec.pos_cos:+.3f} neg {rec.neg_cos:+.3f} lr {rec.lr:.2e}")

    train(state, total, log if not args.quiet else None, args.out, every)
    save_training_checkpoint(args.out, state)
    write_metrics(metrics, state.history)
    print(f"checkpoint {args.out}, metrics {metrics}")
    return 0


def _dataset(args, source: str):
    from .downstream import extract_features

    model = _load_model(args.checkpoint) if source == "deep" else None
    return extract_features(model, args.fids, args.seeds, args.dims, args.multiplier, args.reps,
                            args.seed or 0, args.sampler, source)


def cmd_extract(args) -> int:
    from .downstream import write_features_csv

    ds = _dataset(args, "deep" if args.checkpoint else "ela")
    write_features_csv(args.out, ds)
    for msg in ds.skipped:
        print(f"skipped {msg}", file=sys.stderr)
    print(f"wrote {len(ds)} feature rows to {args.out}")
    return 0


def cmd_ela(args) -> int:
    from .ela import write_feature_csv

    ds = _dataset(args, "ela")
    rows = []
    for i, key in enumerate(ds.keys):
        for j, name in enumerate(ds.names):
            rows.append((f"{key}_r{ds.reps[i]}", ds.fids[i], ds.dims[i], ds.seeds[i], name, ds.X[i, j]))
    write_feature_csv(args.out, rows)
    print(f"wrote {len(rows)} feature values to {args.out}")
    return 0


def cmd_report(args) -> int:
    from .downstream import read_features_csv
    from .ela import corr_report, grouped_snr, render_heatmap, write_corr_csv, write_snr_csv

    ds = read_features_csv(args.features)
    groups = [f"{f}_{d}" if args.group == "function-dim" else f"{f}_{s}_{d}"
              for f, s, d in zip(ds.fids, ds.seeds, ds.dims)]
    if args.kind == "snr":
        vals = grouped_snr(ds.X, groups)
        write_snr_csv(args.out, ds.names, vals)
        print(f"wrote SNR for {len(ds.names)} features to {args.out}")
    else:
        rep = corr_report(ds.X, groups, ds.names)
        write_corr_csv(args.out, rep)
        png = args.heatmap or args.out.rsplit(".", 1)[0] + ".png"
        render_heatmap(png, rep)
        print(f"wrote correlation matrix over {rep.n_groups} groups to {args.out} and {png}")
    return 0


def cmd_hlp(args) -> int:
    from .downstream import extract_features, hlp_experiment, write_hlp_csv

    source = "deep" if args.checkpoint else "ela"
    model = _load_model(args.checkpoint) if args.checkpoint else None
    common = dict(dims=args.dims, multiplier=args.multiplier, repetitions=args.reps,
                  seed=args.seed or 0, sampler=args.sampler, source=source)
    train = extract_features(model, args.fids, args.train_seeds, **common)
    test = extract_features(model, args.fids, args.test_seeds, **common)
    results = hlp_experiment(train, test, k=args.k)
    write_hlp_csv(args.out, results)
    for r in results:
        print(f"d={r.dim} {r.prop:17s} macro-F1 {r.f1:.3f} (majority {r.baseline:.3f})")
    return 0


def cmd_aas(args) -> int:
    from .downstream import aas_experiment, read_features_csv, read_perf_csv, write_selection_csv

    ds = read_features_csv(args.features)
    perf = read_perf_csv(args.perf, args.failure_penalty)
    train_seeds, test_seeds = set(args.train_seeds), set(args.test_seeds)
    perf_keys = set(perf.instances)
    train_keys = sorted({k for k, s in zip(ds.keys, ds.seeds) if s in train_seeds and k in perf_keys})
    test_keys = sorted({k for k, s in zip(ds.keys, ds.seeds) if s in test_seeds and k in perf_keys})
    rep = aas_experiment(ds, perf, train_keys, test_keys, k=args.k, multiplier=args.multiplier)
    write_selection_csv(args.out, rep)
    print(f"SBS = {rep.sbs}")
    for r in rep.rows:
        print(f"{r['group']:10s} n={r['n']:4d} SBS {r['sbs']:.4f} selector {r['selector']:.4f} VBS {r['vbs']:.4f}")
    return 0


PARAMS_ASSUMPTIONS = {
    "table1": "embedding linear with bias, all other linear layers bias-free; feed-forward d_model -> "
              "4 d_model, GLU to 2 d_model, back to d_model; two layer norms per block plus a final one; "
              "extractor d_model -> 2 n_feat with GLU; head hidden width 4 n_feat, three bias-free linears, "
              "non-affine batch norm; total adds student head, teacher head and teacher extractor",
    "literal": "every linear layer with bias; feed-forward d_model -> 8 d_model, GLU to 4 d_model, back "
               "to d_model; head hidden width 2 n_feat; otherwise as above",
}


def cmd_params(args) -> int:
    from .model import params_report

    rep = params_report(args.preset)
    lines = [f"preset {rep['preset']}",
             f"reference backbone {rep['reference_backbone']}  reference total {rep['reference_total']}"]
    for conv, row in rep["conventions"].items():
        line = f"[{conv}] backbone {row['backbone']} total {row['total']}"
        if "backbone_delta" in row:
            line += (f"  delta backbone {row['backbone_delta']:+d} ({100 * row['backbone_rel_delta']:+.2f}%)"
                     f"  delta total {row['total_delta']:+d}")
        lines.append(line)
        lines.append(f"  assumptions: {PARAMS_ASSUMPTIONS[conv]}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        rep["assumptions"] = PARAMS_ASSUMPTIONS
        _write_text(args.out, json.dumps(rep, indent=2, sort_keys=True) + "\n")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_suite_args(p, default_seeds: str = "1-5") -> None:
    p.add_argument("--fids", type=_int_list, default=_int_list("1-24"))
    p.add_argument("--seeds", type=_int_list, default=_int_list(default_seeds))
    p.add_argument("--dims", type=_int_list, default=[2])
    p.add_argument("--multiplier", type=int, default=50)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--sampler", choices=("lhs", "uniform"), default="lhs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepela", description="Deep landscape features toolkit")
    parser.add_argument("--seed", type=int, default=None, help="global seed")
    parser.add_argument("--precision", type=int, choices=(32, 64), default=64)
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a random problem corpus")
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--preset", choices=("tiny", "medium", "large", "micro"))
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume")
    p.add_argument("--metrics")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="deep (or classical without --checkpoint) features over the suite")
    p.add_argument("--checkpoint")
    _add_suite_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("ela", help="classical features in long CSV format")
    _add_suite_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ela)

    p = sub.add_parser("report", help="SNR or correlation report from a feature CSV")
    p.add_argument("kind", choices=("snr", "corr"))
    p.add_argument("--features", required=True)
    p.add_argument("--group", choices=("function-dim", "instance"), default="function-dim")
    p.add_argument("--heatmap")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("hlp", help="high-level property classification")
    p.add_argument("--checkpoint")
    p.add_argument("--fids", type=_int_list, default=_int_list("1-24"))
    p.add_argument("--train-seeds", type=_int_list, default=_int_list("1-40"))
    p.add_argument("--test-seeds", type=_int_list, default=_int_list("41-50"))
    p.add_argument("--dims", type=_int_list, default=[2])
    p.add_argument("--multiplier", type=int, default=50)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--sampler", choices=("lhs", "uniform"), default="lhs")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hlp)

    p = sub.add_parser("aas", help="kNN algorithm selection over a performance table")
    p.add_argument("--features", required=True)
    p.add_argument("--perf", required=True)
    p.add_argument("--train-seeds", type=_int_list, required=True)
    p.add_argument("--test-seeds", type=_int_list, required=True)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--multiplier", type=int, default=50)
    p.add_argument("--failure-penalty", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aas)

    p = sub.add_parser("params", help="parameter counts against published reference values")
    p.add_argument("--preset", choices=("medium", "large", "tiny", "micro"), default="medium")
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)
    return parser


def _set_threads(n: int) -> None:
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    previous = F.get_default_dtype()
    F.set_default_dtype(np.float32 if args.precision == 32 else np.float64)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        F.set_default_dtype(previous)


if __name__ == "__main__":
    sys.exit(main())
