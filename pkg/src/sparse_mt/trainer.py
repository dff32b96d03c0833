"""Two-phase training.

Phase 1 (steps 1..phase1_steps): every component stays active; scores are
noisy relaxed draws and the objective is translation loss plus the weighted
sparsity loss over all languages' scores.

Phase 2 (remaining steps): each step recomputes binary top-k masks from the
freshly sampled scores, the forward pass sees the masked (sparse) scores,
and the objective swaps the sparsity loss for the disparity loss on sparse
scores plus the top-k loss pulling scores toward their masks. Selection
logits receive gradient only through surviving soft scores; the top-k
selection itself is not differentiated through.

All randomness (direction choice, batch sampling, relaxation noise,
dropout) is drawn from counter-based streams keyed by the step number, so a
resumed run replays the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import (
    PAD_ID,
    Corpus,
    sample_direction,
    sample_training_batch,
    teacher_forcing,
)
from .errors import BatchingError, ConfigurationError, DivergenceError
from .gating import (
    DECODER,
    ENCODER,
    ScoreTable,
    SiteScores,
    SubNetworkMask,
    apply_hard,
    export_scores_csv,
    sample_scores,
    top_k_mask,
)
from .model import ModelConfig, SparseTransformer, load_checkpoint, save_checkpoint
from .objectives import (
    LossBreakdown,
    disparity_loss,
    phase_loss,
    sparsity_loss,
    topk_loss,
)
from .tensor import (
    RNG_BATCH,
    RNG_DIRECTION,
    RNG_GUMBEL,
    RNG_INIT,
    Adam,
    CounterRng,
    Tape,
    add,
    clip_grad_norm,
    cross_entropy,
)

SITES = (ENCODER, DECODER)


@dataclass
class TrainConfig:
    steps: int
    phase1_steps: int
    lr: float = 0.002
    warmup: int = 400
    batch_tokens: int = 512
    seed: int = 0
    c_s: float = 0.1
    c_d: float = 0.02
    c_t: float = 0.1
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    direction_tau: float = 5.0
    temperature: float = 1.0
    prior: float = 0.5
    # spread of the uniform init of selection logits; languages must start
    # with distinct multiplicative signatures or nothing can condition on
    # them (scores sigma(+-scale) around 0.5)
    mu_init_scale: float = 1.0

    def validate(self) -> None:
        if self.steps < 1 or not 0 <= self.phase1_steps <= self.steps:
            raise ConfigurationError(
                f"need 0 <= phase1_steps <= steps, got {self.phase1_steps}/{self.steps}")
        if self.lr <= 0 or self.warmup < 1 or self.batch_tokens < 1:
            raise ConfigurationError("lr, warmup and batch_tokens must be positive")
        if self.mu_init_scale < 0:
            raise ConfigurationError("mu_init_scale must be nonnegative")


@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_lang: str
    tgt_lang: str

    @classmethod
    def from_rows(cls, rows: list[tuple[np.ndarray, np.ndarray, str, str]],
                  pad_id: int = PAD_ID) -> "Batch":
        langs = {(src_lang, tgt_lang) for _s, _t, src_lang, tgt_lang in rows}
        if len(langs) != 1:
            raise BatchingError(f"batch mixes language directions: {sorted(langs)}")
        from .corpus import _pad_batch
        src, tgt = _pad_batch([(s, t) for s, t, _sl, _tl in rows], pad_id)
        tgt_in, tgt_out = teacher_forcing(tgt, pad_id=pad_id)
        (src_lang, tgt_lang), = langs
        return cls(src, tgt_in, tgt_out, src_lang, tgt_lang)


class TrainState:
    """Step counter, phase schedule, and optimizer state for theta and mu."""

    def __init__(self, model: SparseTransformer, table: ScoreTable,
                 cfg: TrainConfig, src_langs: set[str], tgt_langs: set[str]):
        cfg.validate()
        self.model = model
        self.table = table
        self.cfg = cfg
        self.src_langs = sorted(src_langs)
        self.tgt_langs = sorted(tgt_langs)
        self.t = 0
        params = dict(model.parameters())
        params.update(table.parameters())
        self.opt = Adam(params)
        self.rng = CounterRng(cfg.seed)
        self._lang_index = {lang: i for i, lang in enumerate(table.languages)}

    def phase_at(self, t: int) -> int:
        return 1 if t <= self.cfg.phase1_steps else 2

    @property
    def phase(self) -> int:
        return self.phase_at(max(self.t, 1))

    def lr_at(self, t: int) -> float:
        w = self.cfg.warmup
        if t <= w:
            return self.cfg.lr * t / w
        return self.cfg.lr * math.sqrt(w / t)


def train_step(state: TrainState, batch: Batch, pad_id: int = PAD_ID) -> LossBreakdown:
    """One optimizer update following the phase schedule; returns the losses."""
    cfg = state.cfg
    model, table = state.model, state.table
    t = state.t + 1
    phase = state.phase_at(t)
    state.opt.zero_grad()

    with Tape() as tape:
        scores: dict[str, dict[str, SiteScores]] = {}
        for lang in table.languages:
            li = state._lang_index[lang]
            scores[lang] = {
                site: sample_scores(
                    table, lang, site,
                    rng=state.rng.stream(RNG_GUMBEL, t, li, si), training=True)
                for si, site in enumerate(SITES)
            }

        if phase == 1:
            assignment = {ENCODER: scores[batch.src_lang][ENCODER],
                          DECODER: scores[batch.tgt_lang][DECODER]}
            logits = model.forward(batch.src, batch.tgt_in, assignment,
                                   pad_id=pad_id, training=True, step=t)
            l_cp = cross_entropy(logits, batch.tgt_out, pad_id,
                                 label_smoothing=model.config.label_smoothing)
            vectors = [scores[lang][site].vector
                       for lang in table.languages for site in SITES]
            l_s = sparsity_loss(vectors, prior_p=table.prior_p)
            total, breakdown = phase_loss(1, l_cp, l_s=l_s,
                                          c_s=cfg.c_s, c_d=cfg.c_d, c_t=cfg.c_t)
        else:
            masks = {lang: {site: top_k_mask(scores[lang][site].as_map(),
                                             table.spec.budgets)
                            for site in SITES} for lang in table.languages}
            sparse = {lang: {site: apply_hard(scores[lang][site], masks[lang][site])
                             for site in SITES} for lang in table.languages}
            assignment = {ENCODER: sparse[batch.src_lang][ENCODER],
                          DECODER: sparse[batch.tgt_lang][DECODER]}
            logits = model.forward(batch.src, batch.tgt_in, assignment,
                                   pad_id=pad_id, training=True, step=t)
            l_cp = cross_entropy(logits, batch.tgt_out, pad_id,
                                 label_smoothing=model.config.label_smoothing)
            # components are contested per side: encoder rows across source
            # languages, decoder rows across target languages
            l_d = add(disparity_loss([sparse[lang][ENCODER].vector for lang in state.src_langs]),
                      disparity_loss([sparse[lang][DECODER].vector for lang in state.tgt_langs]))
            l_t = topk_loss(
                [scores[lang][site].vector for lang in table.languages for site in SITES],
                [table.layout(site).vector_from_map(masks[lang][site])
                 for lang in table.languages for site in SITES])
            total, breakdown = phase_loss(2, l_cp, l_d=l_d, l_t=l_t,
                                          c_s=cfg.c_s, c_d=cfg.c_d, c_t=cfg.c_t)

    if not np.isfinite(total.item()):
        raise DivergenceError(
            f"non-finite loss at step {t} (phase {phase}): {breakdown.as_dict()}")
    tape.backward(total)
    all_params = list(state.opt.params.values())
    clip_grad_norm(all_params, cfg.clip_norm)
    state.opt.step(state.lr_at(t))
    state.t = t
    return breakdown


@dataclass
class RunResult:
    model: SparseTransformer
    table: ScoreTable
    masks: SubNetworkMask
    out_dir: Path
    log_path: Path
    checkpoint_dir: Path


def run(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: Corpus,
        out_dir, resume_from=None) -> RunResult:
    """Execute the full schedule over a corpus and write artifacts.

    Writes a JSON-lines training log, periodic and final checkpoints (model
    parameters, selection logits, optimizer moments), and the final score
    table with masks as CSV.
    """
    train_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_dirs = corpus.train_directions()
    if not train_dirs:
        raise ConfigurationError("corpus declares no trainable directions")
    for d in train_dirs:
        corpus.pairs(d.key, "train")  # missing files surface before any step
    sizes = {d.key: d.train for d in train_dirs}
    src_langs = {d.src for d in corpus.directions}
    tgt_langs = {d.tgt for d in corpus.directions}
    languages = sorted(corpus.languages)

    if resume_from is not None:
        model, table, state, start_meta = load_train_checkpoint(
            resume_from, train_cfg, src_langs, tgt_langs)
    else:
        model = SparseTransformer(model_cfg, seed=train_cfg.seed)
        mu_rng = CounterRng(train_cfg.seed).stream(RNG_INIT, 1)
        table = ScoreTable(languages,
                           model_cfg.gating_spec(train_cfg.temperature, train_cfg.prior),
                           dtype=np.float32, init_rng=mu_rng,
                           init_scale=train_cfg.mu_init_scale)
        state = TrainState(model, table, train_cfg, src_langs, tgt_langs)

    log_path = out_dir / "train_log.jsonl"
    ckpt_dir = out_dir / "checkpoint"
    mode = "a" if resume_from is not None else "w"
    with open(log_path, mode) as log:
        for t in range(state.t + 1, train_cfg.steps + 1):
            key = sample_direction(sizes, train_cfg.direction_tau,
                                   state.rng.stream(RNG_DIRECTION, t))
            d = corpus.direction(key)
            src, tgt = sample_training_batch(corpus.pairs(key, "train"),
                                             train_cfg.batch_tokens,
                                             state.rng.stream(RNG_BATCH, t))
            tgt_in, tgt_out = teacher_forcing(tgt)
            batch = Batch(src, tgt_in, tgt_out, d.src, d.tgt)
            breakdown = train_step(state, batch)
            log.write(json.dumps({"step": t, "direction": key,
                                  **breakdown.as_dict()}) + "\n")
            if train_cfg.checkpoint_every and t % train_cfg.checkpoint_every == 0:
                save_train_checkpoint(ckpt_dir, state)
    save_train_checkpoint(ckpt_dir, state)
    masks = SubNetworkMask.from_scores(table)
    masks.validate()
    export_scores_csv(table, out_dir / "scores.csv", masks)
    return RunResult(model, table, masks, out_dir, log_path, ckpt_dir)


def save_train_checkpoint(directory, state: TrainState) -> None:
    extras: dict[str, np.ndarray] = {}
    for name, p in state.table.parameters().items():
        extras[name] = p.data
    for name in state.opt.params:
        extras[f"adam/m/{name}"] = state.opt.m[name]
        extras[f"adam/v/{name}"] = state.opt.v[name]
    meta = {
        "step": state.t,
        "seed": state.cfg.seed,
        "temperature": state.table.temperature,
        "prior": state.table.prior_p,
        "languages": state.table.languages,
    }
    save_checkpoint(directory, state.model, extras, meta)


def load_model_table(directory) -> tuple[SparseTransformer, ScoreTable | None]:
    """Checkpoint loader for evaluation: the model plus its score table (if
    the checkpoint carries selection logits)."""
    model, extras, meta = load_checkpoint(directory)
    table = None
    if any(name.startswith("mu/") for name in extras):
        table = ScoreTable(meta["languages"],
                           model.config.gating_spec(meta["temperature"], meta["prior"]),
                           dtype=model.dtype)
        for name, p in table.parameters().items():
            p.data[...] = extras[name]
    return model, table


def load_train_checkpoint(directory, train_cfg: TrainConfig,
                          src_langs: set[str], tgt_langs: set[str]):
    model, extras, meta = load_checkpoint(directory)
    table = ScoreTable(meta["languages"],
                       model.config.gating_spec(meta["temperature"], meta["prior"]),
                       dtype=model.dtype)
    for name, p in table.parameters().items():
        p.data[...] = extras[name]
    state = TrainState(model, table, train_cfg, src_langs, tgt_langs)
    for name in state.opt.params:
        state.opt.m[name][...] = extras[f"adam/m/{name}"]
        state.opt.v[name][...] = extras[f"adam/v/{name}"]
    state.t = int(meta["step"])
    state.opt.t = state.t
    return model, table, state, meta
