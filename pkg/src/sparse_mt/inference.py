"""Decoding, BLEU, throughput, and parameter accounting.

Decoding works identically on a full model with a score assignment and on
an extracted sub-network with no scores at all; the two must agree token
for token, which the test suite enforces for trained checkpoints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID, Corpus, batch_iter
from .errors import ConfigurationError, InputError
from .gating import DECODER, ENCODER, ScoreTable, SubNetworkMask, apply_hard, sample_scores
from .model import SparseTransformer, extract_subnetwork
from .tensor import Tensor, no_grad

EMBEDDING_PARAM_NAMES = ("embedding", "out_proj")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    beam_size: int = 1
    length_penalty: float = 1.0
    max_out_len: int = 24

    def validate(self) -> None:
        if self.strategy not in ("greedy", "beam"):
            raise ConfigurationError(f"unknown decode strategy {self.strategy!r}")
        if self.beam_size < 1:
            raise ConfigurationError("beam size must be >= 1")
        if (self.strategy == "greedy") != (self.beam_size == 1):
            raise ConfigurationError("greedy decoding is exactly beam size 1")
        if self.max_out_len < 1:
            raise ConfigurationError("max_out_len must be positive")


def decode(model: SparseTransformer, src_tokens: np.ndarray, cfg: DecodeConfig,
           scores: Mapping | None = None, pad_id: int = PAD_ID,
           bos_id: int = BOS_ID, eos_id: int = EOS_ID) -> list[list[int]]:
    """Autoregressive generation until the end token or the length cap."""
    cfg.validate()
    src_tokens = np.asarray(src_tokens)
    max_len = min(cfg.max_out_len, model.config.max_len - 1)
    with no_grad():
        if cfg.beam_size == 1:
            return _greedy(model, src_tokens, scores, pad_id, bos_id, eos_id, max_len)
        return [_beam_single(model, src_tokens[i:i + 1], cfg, scores,
                             pad_id, bos_id, eos_id, max_len)
                for i in range(src_tokens.shape[0])]


def _greedy(model, src, scores, pad_id, bos_id, eos_id, max_len) -> list[list[int]]:
    enc_scores = scores.get(ENCODER) if scores else None
    dec_scores = scores.get(DECODER) if scores else None
    memory = model.encode(src, enc_scores, pad_id)
    b = src.shape[0]
    tgt_in = np.full((b, 1), bos_id, dtype=np.int64)
    finished = np.zeros(b, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(b)]
    for _ in range(max_len):
        logits = model.decode(tgt_in, memory, src, dec_scores, pad_id)
        nxt = np.argmax(logits.data[:, -1, :], axis=-1)
        for i in range(b):
            if finished[i]:
                nxt[i] = pad_id
            elif nxt[i] == eos_id:
                finished[i] = True
            else:
                outputs[i].append(int(nxt[i]))
        if finished.all():
            break
        tgt_in = np.concatenate([tgt_in, nxt[:, None]], axis=1)
    return outputs


def _beam_single(model, src_row, cfg, scores, pad_id, bos_id, eos_id, max_len) -> list[int]:
    enc_scores = scores.get(ENCODER) if scores else None
    dec_scores = scores.get(DECODER) if scores else None
    memory_one = model.encode(src_row, enc_scores, pad_id)
    k = cfg.beam_size
    beams: list[tuple[float, list[int]]] = [(0.0, [bos_id])]
    finished: list[tuple[float, list[int]]] = []

    def normalized(logp: float, seq: list[int]) -> float:
        # generated length excludes the begin token
        return logp / max(1, len(seq) - 1) ** cfg.length_penalty

    for _ in range(max_len):
        width = len(beams)
        tgt_in = np.array([seq for _lp, seq in beams], dtype=np.int64)
        memory = Tensor(np.repeat(memory_one.data, width, axis=0))
        src_rep = np.repeat(src_row, width, axis=0)
        logits = model.decode(tgt_in, memory, src_rep, dec_scores, pad_id).data[:, -1, :]
        logz = _log_softmax(logits)
        candidates: list[tuple[float, list[int]]] = []
        for bi, (lp, seq) in enumerate(beams):
            order = np.argsort(-logz[bi], kind="stable")[:k]
            for tok in order:
                candidates.append((lp + float(logz[bi, tok]), seq + [int(tok)]))
        candidates.sort(key=lambda c: -c[0])
        beams = []
        for lp, seq in candidates:
            if seq[-1] == eos_id:
                finished.append((normalized(lp, seq), seq))
            elif len(beams) < k:
                beams.append((lp, seq))
        if not beams or len(finished) >= k:
            break
    finished.extend((normalized(lp, seq), seq) for lp, seq in beams)
    _score, best = max(finished, key=lambda c: c[0])
    return [t for t in best[1:] if t != eos_id]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens: Sequence, n: int) -> dict:
    out: dict = {}
    for i in range(len(tokens) - n + 1):
        key = tuple(tokens[i:i + n])
        out[key] = out.get(key, 0) + 1
    return out


def bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4,
         smooth: bool = False) -> float:
    """Corpus-level BLEU in [0, 100]: clipped n-gram precision up to max_n,
    geometric mean, brevity penalty.

    Inputs are aligned corpora of token sequences (strings are split on
    whitespace). `smooth` applies add-one smoothing to orders above 1, for
    short synthetic sentences where empty 4-gram counts are routine.
    """
    if len(hypotheses) != len(references):
        raise InputError(
            f"corpus sizes differ: {len(hypotheses)} vs {len(references)}")
    if not hypotheses:
        raise InputError("empty corpus")
    hyps = [h.split() if isinstance(h, str) else list(h) for h in hypotheses]
    refs = [r.split() if isinstance(r, str) else list(r) for r in references]
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    hyp_len = 0
    ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hgrams = _ngrams(h, n)
            rgrams = _ngrams(r, n)
            matches[n - 1] += sum(min(c, rgrams.get(g, 0)) for g, c in hgrams.items())
            totals[n - 1] += max(0, len(h) - n + 1)
    if hyp_len == 0:
        return 0.0
    precisions = np.zeros(max_n)
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1.0, t + 1.0
        if m == 0 or t == 0:
            return 0.0
        precisions[n] = m / t
    bp = 1.0 if hyp_len > ref_len else np.exp(1.0 - ref_len / hyp_len)
    return float(100.0 * bp * np.exp(np.log(precisions).mean()))


# ---------------------------------------------------------------------------
# throughput and parameter accounting


def measure_throughput(model: SparseTransformer, batches: Sequence[np.ndarray],
                       cfg: DecodeConfig, warmup: int = 1, repeats: int = 5,
                       scores: Mapping | None = None, pad_id: int = PAD_ID) -> dict:
    """Decoded tokens per wall-clock second: median and IQR over repeats."""
    if warmup < 1 or repeats < 3:
        raise InputError("need warmup >= 1 and repeats >= 3")
    if not batches:
        raise InputError("no batches to measure")
    for _ in range(warmup):
        for batch in batches:
            decode(model, batch, cfg, scores, pad_id)
    rates = []
    tokens = 0
    for _ in range(repeats):
        t0 = time.perf_counter()
        tokens = 0
        for batch in batches:
            outs = decode(model, batch, cfg, scores, pad_id)
            tokens += sum(len(o) for o in outs)
        dt = time.perf_counter() - t0
        rates.append(tokens / dt if dt > 0 else float("inf"))
    rates = np.array(rates)
    q1, med, q3 = np.percentile(rates, [25, 50, 75])
    return {"tokens_per_sec": float(med), "iqr": float(q3 - q1),
            "tokens": int(tokens), "repeats": repeats}


def count_params(model: SparseTransformer, include_embeddings: bool = False) -> dict:
    """Active vs. total stored parameters; embeddings excluded by default."""
    active = sum(p.data.size for n, p in model.params.items()
                 if include_embeddings or n not in EMBEDDING_PARAM_NAMES)
    if model.origin_param_count is not None:
        total = model.origin_param_count[include_embeddings]
    else:
        total = active
    return {"active": int(active), "total": int(total)}


def mac_count(config, src_len: int, tgt_len: int) -> int:
    """Multiply-accumulates of one forward pass (matmuls only, no output
    projection or embeddings), for cost comparisons between architectures."""
    d, hd = config.d, config.head_dim
    ht = config.heads * hd
    dp = config.d_prime
    enc_attn = src_len * (3 * d * ht + 2 * src_len * ht + ht * d)
    enc_ffn = src_len * 2 * d * dp
    dec_self = tgt_len * (3 * d * ht + 2 * tgt_len * ht + ht * d)
    dec_cross = tgt_len * (d * ht + ht * d) + src_len * 2 * d * ht + 2 * tgt_len * src_len * ht
    dec_ffn = tgt_len * 2 * d * dp
    return (config.enc_layers * (enc_attn + enc_ffn)
            + config.dec_layers * (dec_self + dec_cross + dec_ffn))


# ---------------------------------------------------------------------------
# evaluation reports


@dataclass
class EvalReport:
    per_direction: dict[str, float]
    task_averages: dict[str, float]
    active_params: int
    total_params: int
    tokens_per_sec: float | None = None
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "per_direction": self.per_direction,
            "task_averages": self.task_averages,
            "active_params": self.active_params,
            "total_params": self.total_params,
            "tokens_per_sec": self.tokens_per_sec,
            "meta": self.meta,
        }


def prepare_pair_model(model: SparseTransformer, table: ScoreTable | None,
                       src_lang: str, tgt_lang: str, use_extraction: bool,
                       masks: SubNetworkMask | None = None):
    """(model, scores) ready to decode one direction.

    Dense models pass through; gated models either extract the pair's
    sub-network or run the full model under hard-masked scores.
    """
    if table is None:
        return model, None
    if masks is None:
        masks = SubNetworkMask.from_scores(table)
    if use_extraction:
        sub = extract_subnetwork(model, masks, src_lang, tgt_lang, score_table=table)
        return sub, None
    with no_grad():
        hard = {}
        for site, lang in ((ENCODER, src_lang), (DECODER, tgt_lang)):
            s = sample_scores(table, lang, site, training=False)
            hard[site] = apply_hard(s, masks.slice_map(lang, table.layout(site)))
    return model, hard


def evaluate(model: SparseTransformer, table: ScoreTable | None, corpus: Corpus,
             decode_cfg: DecodeConfig, split: str = "test", batch_tokens: int = 512,
             use_extraction: bool = True, smooth: bool = True,
             masks: SubNetworkMask | None = None,
             directions: Sequence[str] | None = None,
             workers: int = 1) -> EvalReport:
    """BLEU per direction plus task averages for one model variant.

    With workers > 1, directions fan out over a thread pool; each worker
    owns its own extracted replica and the base model is only read.
    """
    if table is not None and masks is None:
        masks = SubNetworkMask.from_scores(table)
    chosen = [d for d in corpus.directions
              if (directions is None or d.key in directions) and getattr(d, split) > 0]
    per_direction: dict[str, float] = {}
    task_scores: dict[str, list[float]] = {}
    active = total = None

    def score_direction(d) -> float:
        pair_model, pair_scores = prepare_pair_model(
            model, table, d.src, d.tgt, use_extraction, masks)
        hyps: list[list[int]] = []
        refs: list[list[int]] = []
        for src, tgt in batch_iter(corpus.pairs(d.key, split), batch_tokens):
            hyps.extend(decode(pair_model, src, decode_cfg, pair_scores))
            refs.extend([int(t) for t in row if t != PAD_ID] for row in tgt)
        return bleu(hyps, refs, smooth=smooth)

    if chosen:
        probe_model, _ = prepare_pair_model(model, table, chosen[0].src,
                                            chosen[0].tgt, use_extraction, masks)
        counts = count_params(probe_model)
        active, total = counts["active"], counts["total"]
        if table is not None:
            total = count_params(model)["total"]
    if workers > 1 and len(chosen) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score_direction, chosen))
    else:
        results = [score_direction(d) for d in chosen]
    for d, score in zip(chosen, results):
        per_direction[d.key] = score
        task_scores.setdefault(corpus.task_of(d), []).append(score)
    task_averages = {task: float(np.mean(vals)) for task, vals in task_scores.items()}
    return EvalReport(per_direction=per_direction, task_averages=task_averages,
                      active_params=int(active or 0), total_params=int(total or 0),
                      meta={"split": split, "smooth": smooth,
                            "extraction": use_extraction})


def format_report_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Fixed-width summary: params in millions (total in brackets), decode
    speed, and mean BLEU, one row per model variant."""
    header = f"{'Model':<24}{'#Params (M)':>16}{'Decode (tok/s)':>16}{'BLEU':>8}"
    lines = [header, "-" * len(header)]
    for name, report in rows:
        params = f"{report.active_params / 1e6:.3f} ({report.total_params / 1e6:.3f})"
        speed = "-" if report.tokens_per_sec is None else f"{report.tokens_per_sec:.1f}"
        all_bleu = list(report.per_direction.values())
        mean_bleu = float(np.mean(all_bleu)) if all_bleu else 0.0
        lines.append(f"{name:<24}{params:>16}{speed:>16}{mean_bleu:>8.2f}")
    return "\n".join(lines)
