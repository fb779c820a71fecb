"""Operator command line: ingest, prepare, encode, train, evaluate, recommend,
serve. Exit codes: 0 success, 2 usage error, 3 data-integrity error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dataset as dsm
from . import evaluation as ev
from . import model as mdl
from . import semantics as sem
from .config import RunConfig, apply_overrides, load_config, save_config

EXIT_USAGE = 2
EXIT_INTEGRITY = 3


def _load_world(rc: RunConfig):
    ds = dsm.load_dataset(rc.dataset)
    split = dsm.split_by_time(ds.records, rc.t1, rc.t2)
    mats = dsm.build_interaction_matrices(split, ds.n_users, ds.n_files, ds.n_repos)
    return ds, split, mats


def _load_features(rc: RunConfig, ds) -> np.ndarray:
    path = rc.features_path()
    if not os.path.isfile(path):
        raise dsm.DataFormatError(
            f"feature file {path} not found; run `coderec encode` first")
    feature_map = sem.import_segment_features(path, ds)
    return sem.stack_segment_features(feature_map, ds.n_files)


def _restore_model(rc: RunConfig):
    ds, split, mats = _load_world(rc)
    feats = _load_features(rc, ds)
    model = mdl.load_checkpoint(rc.checkpoint_path(), ds, split, mats, feats)
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    from .miner import ApiClient, CrawlCache, RepoFilter, mine

    with open(args.topics_file, encoding="utf-8") as fh:
        topics = [line.strip() for line in fh if line.strip()]
    flt = RepoFilter(min_stars=args.min_stars, min_contributors=args.min_contributors,
                     topics=topics, sample_size=args.max_repos)
    cache = CrawlCache(args.cache or os.path.join(args.out, "_cache"))
    client = ApiClient(base_url=args.base_url, cache=cache,
                       token=os.environ.get("CODEREC_API_TOKEN"))
    summary = mine(client, flt, seed=args.seed, out_dir=args.out)
    print(f"mined {summary['n_repos']} repos, {summary['n_users']} users, "
          f"{summary['n_interactions']} interactions into {args.out}")
    if summary["warnings"]:
        print(f"({summary['warnings']} warnings, see {summary['warning_ledger']})")
    return 0


def cmd_prepare(args) -> int:
    rc = _config_from_args(args)
    ds, split, mats = _load_world(rc)
    summary = {
        "n_users": ds.n_users, "n_files": ds.n_files, "n_repos": ds.n_repos,
        "n_interactions": len(ds.records),
        "n_train_commit_pairs": mats.Y.nnz,
        "density": mats.Y.density(),
        "split_sizes": {"train": len(split.train), "val": len(split.val),
                        "test": len(split.test)},
        "boundaries": [rc.t1, rc.t2],
        "mapping_hash": ds.mapping_hash(),
    }
    from .report import format_table, summary_table, write_dataset_summary

    paths = write_dataset_summary(rc.workdir, summary)
    headers, rows = summary_table(summary)
    print(format_table(headers, rows))
    print(f"wrote {paths['json']}, {paths['tsv']}, {paths['png']}")
    return 0


def cmd_encode(args) -> int:
    rc = _config_from_args(args)
    ds, split, _ = _load_world(rc)
    out_path = args.out_file or rc.features_path()
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    if args.import_file:
        shape = sem.validate_feature_file(args.import_file)
        sem.import_segment_features(args.import_file, ds)  # referential check
        if os.path.abspath(args.import_file) != os.path.abspath(out_path):
            with open(args.import_file, "rb") as src, open(out_path, "wb") as dst:
                dst.write(src.read())
        print(f"imported features {shape} -> {out_path}")
        return 0
    # TF-IDF encoding over the dataset's source text
    n_seg = args.segments
    train_files = sorted({r.target.index for r in split.train if r.behavior == "commit"})
    if not train_files:
        raise dsm.DataIntegrityError("no train-split files to build a vocabulary from")
    docs = [sem.tokenize_source(ds.code.get(ds.files[j], "")) for j in train_files]
    tfidf = sem.TfidfModel(docs, max_features=args.max_features)
    if tfidf.size == 0:
        raise dsm.DataIntegrityError("empty TF-IDF vocabulary; dataset has no code text")
    feats = np.zeros((ds.n_files, n_seg, tfidf.size), dtype=np.float32)
    for j in range(ds.n_files):
        segs = sem.segment_code(sem.tokenize_source(ds.code.get(ds.files[j], "")), n_seg)
        feats[j] = sem.encode_segments_tfidf(segs, tfidf)
    sem.write_feature_file(out_path, ds.files, feats)
    print(f"encoded TF-IDF features ({ds.n_files} files x {n_seg} segments x "
          f"{tfidf.size} terms) -> {out_path}")
    return 0


def cmd_train(args) -> int:
    rc = _config_from_args(args)
    ds, split, mats = _load_world(rc)
    feats = _load_features(rc, ds)
    if rc.flags.tfidf_features:
        print("note: tfidf_features flag set; make sure the feature file was "
              "produced by `coderec encode` without --import")

    def log_fn(entry):
        if "file_bpr" in entry:
            msg = f"epoch {entry['epoch']:4d}  loss {entry['total']:.4f}"
            if "val_ndcg10" in entry:
                msg += f"  val ndcg@10 {entry['val_ndcg10']:.4f}"
            print(msg)

    model, history = mdl.train_model(ds, split, mats, feats, rc.hyper, rc.flags,
                                     seed=rc.seed, log_fn=log_fn if args.verbose else None)
    os.makedirs(rc.workdir, exist_ok=True)
    ckpt = rc.checkpoint_path()
    mdl.save_checkpoint(ckpt, model)
    save_config(os.path.join(rc.workdir, "config.ini"), rc)
    from .report import write_training_log

    paths = write_training_log(rc.workdir, history)
    print(f"saved checkpoint {ckpt} (variant {rc.flags.variant_tag()}, "
          f"hash {mdl.checkpoint_hash(ckpt)[:12]})")
    print(f"wrote {paths['tsv']}, {paths['png']}")
    return 0


def cmd_evaluate(args) -> int:
    rc = _config_from_args(args)
    model = _restore_model(rc)
    ks = rc.ks if args.protocol != "cold" or args.ks else ev.KS_COLD
    report = ev.evaluate_protocol(model.score_all(), model.dataset, model.split,
                                  args.protocol or rc.protocol, ks=ks,
                                  variant=model.flags.variant_tag())
    if args.timing:
        hb = mdl.Hyperparams(d=rc.hyper.d, n_att=rc.hyper.n_att, layers=rc.hyper.layers)
        feats = _load_features(rc, model.dataset)
        mf = ev.BaselineModel("mf", model.dataset, model.split, model.matrices,
                              feats, hb, seed=rc.seed)
        lgn = ev.BaselineModel("lightgcn", model.dataset, model.split, model.matrices,
                               feats, hb, seed=rc.seed)
        tasks, _ = ev.build_tasks(model.dataset, model.split, args.protocol or rc.protocol)
        report.timing = ev.measure_inference(
            {"mf": mf.score_all, "lightgcn": lgn.score_all, "coderec": model.score_all},
            tasks, assert_ordering=False)
    from .report import format_table, metric_table, write_metric_report

    outdir = os.path.join(rc.workdir, "reports")
    paths = write_metric_report(outdir, report)
    headers, rows = metric_table(report)
    print(f"variant {report.variant} | protocol {report.protocol} | "
          f"{report.n_users} users ({report.n_skipped} skipped)")
    print(format_table(headers, rows))
    print(f"wrote {paths['json']}, {paths['tsv']}, {paths['png']}")
    return 0


def cmd_recommend(args) -> int:
    rc = _config_from_args(args)
    model = _restore_model(rc)
    from .report import format_table
    from .service import ModelSnapshot

    snap = ModelSnapshot(dataset=model.dataset, split=model.split,
                         scores=model.score_all(),
                         model_hash=mdl.checkpoint_hash(rc.checkpoint_path()))
    if not 0 <= args.user < model.dataset.n_users:
        print(f"error: unknown user {args.user}", file=sys.stderr)
        return EXIT_INTEGRITY
    items = snap.recommend(args.user, args.k, args.scope)
    rows = [[it["file"], it["repo"], f"{it['score']:.5f}"] for it in items]
    print(format_table(["file", "repo", "score"], rows))
    return 0


def cmd_serve(args) -> int:
    rc = _config_from_args(args)
    model = _restore_model(rc)
    from . import service

    snap = service.make_snapshot(model, mdl.checkpoint_hash(rc.checkpoint_path()))
    server = service.serve(snap, port=args.port, host=args.host)
    print(f"serving on http://{args.host}:{server.server_address[1]} "
          f"(model {snap.model_hash[:12]})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _config_from_args(args) -> RunConfig:
    rc = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    rc = apply_overrides(rc, args)
    if not rc.dataset:
        raise SystemExit("error: --dataset (or a config file with one) is required")
    return rc


def _add_common(p):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--workdir", help="run directory for checkpoints and reports")
    p.add_argument("--seed", type=int)
    p.add_argument("--t1", type=int, help="train/val boundary (unix seconds)")
    p.add_argument("--t2", type=int, help="val/test boundary (unix seconds)")
    p.add_argument("--features", help="segment-feature file path")


def _add_hyper(p):
    p.add_argument("--d", type=int, help="embedding size")
    p.add_argument("--layers", type=int, help="propagation depth")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lambda-project", dest="lambda_project", type=float)
    p.add_argument("--lambda-contrast", dest="lambda_contrast", type=float)
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--eta", type=int)
    p.add_argument("--behaviors", help="comma list from star,watch,fork")
    p.add_argument("--flag", action="append",
                   help="ablation flag (repeatable): disable_fusion, "
                        "disable_contrastive, tfidf_features, "
                        "disable_project_level, disable_structural")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coderec",
                                     description="code recommendation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="mine a dataset from a code-hosting API")
    p.add_argument("--topics-file", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-repos", type=int, default=300)
    p.add_argument("--min-stars", type=int, default=250)
    p.add_argument("--min-contributors", type=int, default=3)
    p.add_argument("--base-url", default="https://api.github.com")
    p.add_argument("--cache", help="crawl cache directory")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("prepare", help="split a dataset and print its summary")
    _add_common(p)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("encode", help="build or import segment features")
    _add_common(p)
    p.add_argument("--tfidf", action="store_true", help="TF-IDF encode source text")
    p.add_argument("--import", dest="import_file", help="import a feature file")
    p.add_argument("--segments", type=int, default=8)
    p.add_argument("--max-features", type=int, default=512)
    p.add_argument("--out-file", help="output feature path")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    _add_common(p)
    _add_hyper(p)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="rank test interactions under a protocol")
    _add_common(p)
    _add_hyper(p)
    p.add_argument("--protocol", choices=["intra", "cross", "cold"])
    p.add_argument("--k", dest="ks", help="comma list of cutoffs, e.g. 5,10,20")
    p.add_argument("--timing", action="store_true",
                   help="also measure per-example inference cost vs baselines")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("recommend", help="print top-K files for a user")
    _add_common(p)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--scope", choices=["intra", "cross"], default="intra")
    p.set_defaults(fn=cmd_recommend)

    p = sub.add_parser("serve", help="HTTP endpoint over a trained checkpoint")
    _add_common(p)
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except dsm.DataIntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except dsm.DataFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def miner_main(argv=None) -> int:
    """Entry point for the standalone `miner` command."""
    parser = argparse.ArgumentParser(prog="miner",
                                     description="mine a dataset from a code-hosting API")
    parser.add_argument("--topics-file", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-repos", type=int, default=300)
    parser.add_argument("--min-stars", type=int, default=250)
    parser.add_argument("--min-contributors", type=int, default=3)
    parser.add_argument("--base-url", default="https://api.github.com")
    parser.add_argument("--cache")
    args = parser.parse_args(argv)
    return main(["ingest", "--topics-file", args.topics_file, "--out", args.out,
                 "--seed", str(args.seed), "--max-repos", str(args.max_repos),
                 "--min-stars", str(args.min_stars),
                 "--min-contributors", str(args.min_contributors),
                 "--base-url", args.base_url]
                + (["--cache", args.cache] if args.cache else []))


if __name__ == "__main__":
    sys.exit(main())
