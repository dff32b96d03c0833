"""Command-line entry point: gen-data, train, eval, extract, analyze, verify.

Every subcommand validates its configuration before touching model state or
writing artifacts. The SPARSE_MT_THREADS environment variable caps worker
fan-out during evaluation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, config, verification
from .corpus import Corpus, generate
from .errors import SparseMTError
from .gating import SubNetworkMask, export_scores_csv
from .inference import (
    DecodeConfig,
    count_params,
    evaluate,
    format_report_table,
    measure_throughput,
    prepare_pair_model,
)
from .model import extract_subnetwork, save_checkpoint
from .trainer import load_model_table, run


def _workers() -> int:
    raw = os.environ.get("SPARSE_MT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="TOML config path")
    p.add_argument("--preset", choices=config.PRESETS, default="desk")
    p.add_argument("--seed", type=int, default=None, help="override config seeds")
    p.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-mt",
        description="Adaptive language-conditioned sparse Transformer toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    _add_common(p)

    p = sub.add_parser("train", help="run the two-phase training schedule")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None, help="corpus directory")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume")

    p = sub.add_parser("eval", help="BLEU and efficiency report")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("valid", "test"))
    p.add_argument("--no-extraction", action="store_true",
                   help="evaluate via hard-masked full model instead of extraction")
    p.add_argument("--throughput", action="store_true",
                   help="also measure decode tokens/sec")

    p = sub.add_parser("extract", help="write per-pair compact checkpoints")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--pairs", default=None,
                   help="comma-separated src-tgt list (default: all corpus directions)")

    p = sub.add_parser("analyze", help="sparsity pattern reports")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--report", type=Path, default=None,
                   help="eval report JSON for the resource-tier breakdown")

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--fast", action="store_true", help="reduced case counts")
    return parser


def _bundle(args) -> config.Bundle:
    overrides: dict = {}
    if args.seed is not None:
        overrides = {"train": {"seed": args.seed}, "data": {"seed": args.seed}}
    raw = config.load_raw(args.config, args.preset, overrides)
    return config.parse(raw)


def cmd_gen_data(args) -> int:
    bundle = _bundle(args)
    if bundle.data is None:
        print("config declares no [data] section to generate", file=sys.stderr)
        return 1
    out = args.out / "corpus"
    generate(bundle.data, out)
    print(f"wrote corpus ({len(bundle.data.directions)} directions) to {out}")
    return 0


def cmd_train(args) -> int:
    bundle = _bundle(args)
    data_dir = args.data or (Path(bundle.data_dir) if bundle.data_dir else args.out / "corpus")
    corpus = Corpus(data_dir)
    result = run(bundle.model, bundle.train, corpus, args.out, resume_from=args.resume)
    counts = count_params(result.model)
    print(f"trained {bundle.train.steps} steps; checkpoint at {result.checkpoint_dir}")
    print(f"parameters (excl. embeddings): {counts['total']:,}")
    return 0


def cmd_eval(args) -> int:
    bundle = _bundle(args)
    corpus = Corpus(args.data)
    model, table = load_model_table(args.checkpoint)
    report = evaluate(model, table, corpus, bundle.decode, split=args.split,
                      batch_tokens=bundle.train.batch_tokens,
                      use_extraction=not args.no_extraction,
                      workers=_workers())
    if args.throughput:
        batches = _throughput_batches(corpus, bundle.train.batch_tokens)
        if table is not None:
            masks = SubNetworkMask.from_scores(table)
            d0 = corpus.directions[0]
            sub, _ = prepare_pair_model(model, table, d0.src, d0.tgt, True, masks)
            report.tokens_per_sec = measure_throughput(
                sub, batches, bundle.decode)["tokens_per_sec"]
        else:
            report.tokens_per_sec = measure_throughput(
                model, batches, bundle.decode)["tokens_per_sec"]
    args.out.mkdir(parents=True, exist_ok=True)
    out_path = args.out / "eval_report.json"
    out_path.write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True))
    name = "sparse" if table is not None else "dense"
    print(format_report_table([(name, report)]))
    print(f"report written to {out_path}")
    return 0


def _throughput_batches(corpus: Corpus, batch_tokens: int) -> list[np.ndarray]:
    from .corpus import batch_iter
    d0 = corpus.directions[0]
    return [src for src, _tgt in batch_iter(corpus.pairs(d0.key, "test"), batch_tokens)]


def cmd_extract(args) -> int:
    corpus = Corpus(args.data)
    model, table = load_model_table(args.checkpoint)
    if table is None:
        print("checkpoint has no selection scores; nothing to extract", file=sys.stderr)
        return 1
    masks = SubNetworkMask.from_scores(table)
    masks.validate()
    if args.pairs:
        pairs = [tuple(p.split("-")) for p in args.pairs.split(",")]
    else:
        pairs = [(d.src, d.tgt) for d in corpus.directions]
    for src_lang, tgt_lang in pairs:
        sub = extract_subnetwork(model, masks, src_lang, tgt_lang, score_table=table)
        dest = args.out / "extracted" / f"{src_lang}-{tgt_lang}"
        save_checkpoint(dest, sub, meta={"pair": f"{src_lang}-{tgt_lang}"})
        counts = count_params(sub)
        print(f"{src_lang}-{tgt_lang}: active {counts['active']:,} "
              f"of {counts['total']:,} params -> {dest}")
    return 0


def cmd_analyze(args) -> int:
    model, table = load_model_table(args.checkpoint)
    if table is None:
        print("checkpoint has no selection scores; nothing to analyze", file=sys.stderr)
        return 1
    args.out.mkdir(parents=True, exist_ok=True)
    families: dict[str, str] = {}
    tiers_available = False
    corpus = None
    if args.data is not None:
        corpus = Corpus(args.data)
        families = {lid: lang.family for lid, lang in corpus.languages.items()}
        tiers_available = True

    masks = SubNetworkMask.from_scores(table)
    export_scores_csv(table, args.out / "scores.csv", masks)

    langs, vectors = analysis.language_vectors(table)
    coords, info = analysis.pca_project(vectors, dims=2)
    analysis.write_pca_csv(langs, coords, args.out / "pca.csv")
    analysis.write_pca_svg(langs, coords, families, args.out / "pca.svg")

    overlap = analysis.selection_overlap(masks, families if families else None)
    analysis.write_overlap_csv(overlap, args.out / "overlap.csv")

    summary = {"pca": info, "overlap_summary": overlap["summary"]}
    if args.report is not None and corpus is not None and tiers_available:
        from .inference import EvalReport
        raw = json.loads(Path(args.report).read_text())
        report = EvalReport(per_direction=raw["per_direction"],
                            task_averages=raw["task_averages"],
                            active_params=raw["active_params"],
                            total_params=raw["total_params"])
        summary["resource_breakdown"] = analysis.resource_breakdown(report, corpus)
    (args.out / "analysis.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(f"analysis artifacts in {args.out}")
    s = overlap["summary"]
    if s and s["within_family_mean"] is not None and s["cross_family_mean"] is not None:
        print(f"within-family Jaccard {s['within_family_mean']:.3f} "
              f"vs cross-family {s['cross_family_mean']:.3f}")
    return 0


def cmd_verify(args) -> int:
    ok, results = verification.run_all(fast=args.fast)
    for name, passed, detail in results:
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        if detail:
            line += f"  ({detail})"
        print(line)
    print(f"{'all suites green' if ok else 'FAILURES PRESENT'}")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "extract": cmd_extract,
        "analyze": cmd_analyze,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except (SparseMTError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
