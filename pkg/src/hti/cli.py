"""Command-line pipeline: ingest, train, evaluate, ablate, explain, bench.

Configuration comes from an optional JSON file (flat keys) with
command-line flags taking precedence; unknown config keys are rejected.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
``--threads`` pins the BLAS thread pools (set before numpy loads), with
``--threads 1`` as the deterministic mode; heavy imports are deferred
until after that so the pin takes effect.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

CONFIG_KEYS = {
    "batch_size", "learning_rate", "l2_lambda", "dropout", "embed_dim", "k1", "k_lat",
    "kernel_sizes", "layer2_kernel", "max_epochs", "patience", "grad_clip", "seed",
    "dtype", "train_ratio", "vocab_size", "quantile", "stopwords_path", "embeddings_path",
    "seeds",
}


class UsageError(Exception):
    pass


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from e
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def merged_settings(args, cfg):
    """Flag overrides on top of config-file values on top of defaults."""
    merged = dict(cfg)
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def build_hyper(settings):
    from .model import HyperParams

    fields = {k: v for k, v in settings.items() if k in HyperParams.__dataclass_fields__}
    try:
        hyper = HyperParams.from_dict({**HyperParams().to_dict(), **fields})
        hyper.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    return hyper


def _add_common(p):
    p.add_argument("--config", help="JSON config file (flat keys)")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (1 = deterministic mode)")
    p.add_argument("--seed", type=int, default=None)


def make_parser():
    parser = argparse.ArgumentParser(prog="hti",
                                     description="hierarchical text-interaction rating prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a corpus file from NDJSON reviews")
    _add_common(p)
    p.add_argument("--input", required=True, help="NDJSON reviews (.gz ok)")
    p.add_argument("--out", required=True, help="corpus output (.json or .json.gz)")
    p.add_argument("--train-ratio", dest="train_ratio", type=float, default=None,
                   choices=[0.8, 0.6, 0.4])
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=None)
    p.add_argument("--quantile", type=float, default=None)
    p.add_argument("--stopwords-path", dest="stopwords_path", default=None)

    p = sub.add_parser("train", help="train a model on a corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--variant", default="full",
                   choices=["full", "wavg", "wmax", "davg", "dmax"])
    p.add_argument("--embeddings-path", dest="embeddings_path", default=None,
                   help="pretrained embedding text file (token v1 ... vN)")
    for flag, typ in [("--batch-size", int), ("--learning-rate", float), ("--l2-lambda", float),
                      ("--dropout", float), ("--embed-dim", int), ("--k1", int),
                      ("--k-lat", int), ("--max-epochs", int), ("--patience", int),
                      ("--grad-clip", float)]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ, default=None)

    p = sub.add_parser("evaluate", help="MAE/RMSE of a checkpoint on a split")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", default=None, help="metrics JSON output path")

    p = sub.add_parser("ablate", help="train and compare model variants")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--variants", default="full,wavg,wmax,davg,dmax")
    p.add_argument("--seeds", default=None, help="comma-separated seed list (default 0,1,2)")
    p.add_argument("--embeddings-path", dest="embeddings_path", default=None)
    for flag, typ in [("--batch-size", int), ("--learning-rate", float), ("--l2-lambda", float),
                      ("--max-epochs", int), ("--patience", int), ("--k1", int), ("--k-lat", int),
                      ("--embed-dim", int)]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ, default=None)

    p = sub.add_parser("explain", help="export an attention trace for one pair")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", required=True, help="user and item ids as u:<id> i:<id>", nargs=2)
    p.add_argument("--top", type=int, default=4)
    p.add_argument("--out", default=None, help="trace JSON output path")

    p = sub.add_parser("bench", help="interaction-module scaling benchmark")
    _add_common(p)
    p.add_argument("--sweep", default="5,10,20", help="comma-separated review counts")
    p.add_argument("--k-lat", dest="k_lat", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV output path")

    return parser


def cmd_ingest(args, settings):
    from .corpus import PreprocessConfig, default_stopwords, ingest_file, load_stopwords

    ratio = settings.get("train_ratio", 0.8)
    stop = (load_stopwords(settings["stopwords_path"]) if settings.get("stopwords_path")
            else default_stopwords())
    config = PreprocessConfig(
        vocab_size=int(settings.get("vocab_size", 20000)),
        quantile=float(settings.get("quantile", 0.90)),
        ratios=(ratio, 0.1, 0.1),  # val/test fixed at 10%; remainder unused
        seed=int(settings.get("seed", 0)),
        stopwords=stop,
    )
    corpus = ingest_file(args.input, config)
    corpus.save(args.out)
    s = corpus.summary()
    lim = corpus.padding_limits
    print(json.dumps({
        "n_users": s["n_users"], "n_items": s["n_items"], "n_ratings": s["n_ratings"],
        "docs_per_user": round(s["docs_per_user"], 3),
        "docs_per_item": round(s["docs_per_item"], 3),
        "words_per_doc": round(s["words_per_doc"], 3),
        "density": float(f"{s['density']:.3g}"),
        "vocab_size": len(corpus.vocabulary),
        "max_review_len": lim.max_review_len,
        "max_user_reviews": lim.max_user_reviews,
        "max_item_reviews": lim.max_item_reviews,
        "out": args.out,
    }, sort_keys=True))
    return EXIT_OK


def cmd_train(args, settings):
    import numpy as np

    from .corpus import Corpus
    from .trainer import train
    from .word_encoder import load_pretrained_embeddings

    corpus = Corpus.load(args.corpus)
    hyper = build_hyper(settings)
    embeddings = None
    if settings.get("embeddings_path"):
        rng = np.random.default_rng(hyper.seed)
        embeddings, n_hit = load_pretrained_embeddings(
            settings["embeddings_path"], corpus.vocabulary, hyper.embed_dim, rng,
            dtype=hyper.np_dtype())
        print(f"loaded pretrained vectors for {n_hit} tokens", file=sys.stderr)
    os.makedirs(args.out_dir, exist_ok=True)
    result = train(corpus, hyper, variant=args.variant, embeddings=embeddings, verbose=True)
    ckpt = os.path.join(args.out_dir, f"model_{args.variant}_seed{hyper.seed}.ckpt")
    result.model.save_checkpoint(ckpt, extra_meta={"best_epoch": result.best_epoch,
                                                   "best_val_mae": result.best_val_mae})
    result.log.write_ndjson(os.path.join(args.out_dir,
                                         f"train_log_{args.variant}_seed{hyper.seed}.ndjson"))
    print(json.dumps({"checkpoint": ckpt, "best_epoch": result.best_epoch,
                      "best_val_mae": result.best_val_mae, "diverged": result.diverged},
                     sort_keys=True))
    if result.diverged:
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_evaluate(args, settings):
    from .corpus import Corpus
    from .evaluator import evaluate
    from .model import HTIModel

    corpus = Corpus.load(args.corpus)
    model, _ = HTIModel.load_checkpoint(args.checkpoint)
    report = evaluate(model, corpus, args.split)
    payload = json.dumps(report.to_dict(), sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(payload + "\n")
    print(payload)
    return EXIT_OK


def cmd_ablate(args, settings):
    import numpy as np

    from .corpus import Corpus
    from .evaluator import run_ablation
    from .model import VARIANTS
    from .word_encoder import load_pretrained_embeddings

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s): {bad}; expected subset of {list(VARIANTS)}")
    seeds_raw = settings.get("seeds", args.seeds) or "0,1,2"
    if isinstance(seeds_raw, str):
        seeds = tuple(int(s) for s in seeds_raw.split(","))
    else:
        seeds = tuple(int(s) for s in seeds_raw)
    corpus = Corpus.load(args.corpus)
    hyper = build_hyper(settings)
    embeddings = None
    if settings.get("embeddings_path"):
        rng = np.random.default_rng(hyper.seed)
        embeddings, _ = load_pretrained_embeddings(
            settings["embeddings_path"], corpus.vocabulary, hyper.embed_dim, rng,
            dtype=hyper.np_dtype())
    os.makedirs(args.out_dir, exist_ok=True)
    results = {}
    for variant in variants:
        report = run_ablation(variant, corpus, hyper, seeds=seeds, embeddings=embeddings,
                              verbose=False)
        results[variant] = report.to_dict()
        print(f"{variant}: mae={report.mae:.4f} rmse={report.rmse:.4f}", file=sys.stderr)
    out = os.path.join(args.out_dir, "ablation.json")
    with open(out, "w", encoding="utf-8") as f:
        json.dump({"seeds": list(seeds), "results": results}, f, sort_keys=True, indent=2)
    print(json.dumps({"out": out, "results": {v: r["mae"] for v, r in results.items()}},
                     sort_keys=True))
    return EXIT_OK


def _parse_pair(parts):
    user_id = item_id = None
    for part in parts:
        if part.startswith("u:"):
            user_id = part[2:]
        elif part.startswith("i:"):
            item_id = part[2:]
    if user_id is None or item_id is None:
        raise UsageError("--pair expects two values: u:<user_id> i:<item_id>")
    return user_id, item_id


def cmd_explain(args, settings):
    from .corpus import Corpus
    from .evaluator import export_attention_trace
    from .model import HTIModel

    user_id, item_id = _parse_pair(args.pair)
    corpus = Corpus.load(args.corpus)
    model, _ = HTIModel.load_checkpoint(args.checkpoint)
    out = args.out or f"trace_{user_id}_{item_id}.json"
    payload = export_attention_trace(model, corpus, user_id, item_id, top_r=args.top, path=out)
    print(json.dumps({"out": out, "predicted_rating": payload["predicted_rating"],
                      "true_rating": payload["true_rating"]}, sort_keys=True))
    return EXIT_OK


def cmd_bench(args, settings):
    from .evaluator import benchmark_interaction, fit_mn_scaling, write_benchmark_csv

    sweep = tuple(int(s) for s in args.sweep.split(","))
    k_lat = int(settings.get("k_lat") or 32)
    rows = benchmark_interaction(sweep=sweep, k_lat=k_lat)
    max_dev, _ = fit_mn_scaling(rows)
    if args.out:
        write_benchmark_csv(rows, args.out)
    for r in rows:
        print(f"m={r['m']} n={r['n']} k={r['k']} seconds={r['seconds']:.6f} flops={r['flops']}")
    print(json.dumps({"max_relative_deviation": max_dev, "out": args.out}, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "explain": cmd_explain,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        _set_threads(args.threads)
    try:
        cfg = load_config(args.config)
        settings = merged_settings(args, cfg)
        return COMMANDS[args.command](args, settings)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_USAGE
    except Exception as e:  # classified below
        from .corpus import DataError

        try:
            from .trainer import NumericalError
        except Exception:
            NumericalError = ()
        if isinstance(e, DataError) or isinstance(e, FileNotFoundError):
            print(f"data error: {e}", file=sys.stderr)
            return EXIT_DATA
        if isinstance(e, (FloatingPointError,)) or (NumericalError and isinstance(e, NumericalError)):
            print(f"numerical failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
