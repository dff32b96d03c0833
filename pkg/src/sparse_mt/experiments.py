"""Desk-scale comparative experiment: the gated model against a dense
baseline with the same active architecture, over seeds.

Each variant run is self-contained and returns a plain-dict summary, so
seeded runs can fan out across worker processes.
"""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config
from .analysis import selection_overlap
from .corpus import Corpus
from .errors import ConfigurationError
from .inference import evaluate
from .model import equal_active_config, extract_subnetwork
from .trainer import run

SPARSE = "sparse"
DENSE = "dense"


def run_variant(variant: str, seed: int, corpus_dir: str, out_root: str,
                preset: str = "desk", overrides: dict | None = None) -> dict:
    """Train one variant at one seed, evaluate it, summarize for comparison."""
    if variant not in (SPARSE, DENSE):
        raise ConfigurationError(f"variant must be sparse or dense, got {variant!r}")
    bundle = config.load(preset_name=preset, overrides=overrides)
    train_cfg = replace(bundle.train, seed=seed)
    model_cfg = bundle.model if variant == SPARSE else equal_active_config(bundle.model)
    corpus = Corpus(corpus_dir)
    out_dir = Path(out_root) / f"{variant}_s{seed}"

    t0 = time.time()
    result = run(model_cfg, train_cfg, corpus, out_dir)
    train_minutes = (time.time() - t0) / 60.0

    table = result.table if variant == SPARSE else None
    report = evaluate(result.model, table, corpus, bundle.decode,
                      batch_tokens=train_cfg.batch_tokens)

    summary: dict = {
        "variant": variant,
        "seed": seed,
        "out_dir": str(out_dir),
        "checkpoint_dir": str(result.checkpoint_dir),
        "train_minutes": train_minutes,
        "per_direction": report.per_direction,
        "task_averages": report.task_averages,
        "active_params": report.active_params,
        "total_params": report.total_params,
    }
    zero_keys = {d.key for d in corpus.zero_shot_directions()}
    supervised = [v for k, v in report.per_direction.items() if k not in zero_keys]
    summary["supervised_mean_bleu"] = float(np.mean(supervised)) if supervised else 0.0
    summary["zero_shot_bleu"] = {k: report.per_direction[k]
                                 for k in zero_keys if k in report.per_direction}

    if variant == SPARSE:
        result.masks.validate()
        summary["budgets_ok"] = _extraction_budgets_ok(result, corpus)
        families = {lid: lang.family for lid, lang in corpus.languages.items()}
        summary["overlap_summary"] = selection_overlap(result.masks, families)["summary"]
        summary["l_t_trend"] = _topk_trend(result.log_path)
    return summary


def _extraction_budgets_ok(result, corpus: Corpus) -> bool:
    b = result.model.config.budgets
    for d in corpus.directions:
        sub = extract_subnetwork(result.model, result.masks, d.src, d.tgt,
                                 score_table=result.table)
        if (sub.config.enc_layers, sub.config.dec_layers,
                sub.config.heads, sub.config.blocks) != (
                b.enc_layers_active, b.dec_layers_active,
                b.heads_active, b.blocks_active):
            return False
    return True


def _topk_trend(log_path) -> dict:
    """Windowed means of the score-to-mask distance over the last 20% of
    phase-2 steps: the training signal that scores are committing."""
    lines = [json.loads(l) for l in Path(log_path).read_text().splitlines()]
    lt = [l["l_t"] for l in lines if l["phase"] == 2]
    if len(lt) < 10:
        return {"first_half": None, "second_half": None, "decreasing": None}
    tail = lt[-max(10, len(lt) // 5):]
    half = len(tail) // 2
    first, second = float(np.mean(tail[:half])), float(np.mean(tail[half:]))
    return {"first_half": first, "second_half": second,
            "decreasing": second < first}
