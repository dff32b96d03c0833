"""Encoder-decoder Transformer whose heads, FFN blocks, and layers are
modulated by per-language selection scores.

The dense path is a standard pre-norm Transformer. With scores attached,
each attention head's output is scaled by its head score before the output
projection, each FFN block (a contiguous column group of W1 and the paired
rows of W2) is scaled by its block score on both sides of the ReLU, and a
whole layer's two (decoder: three) residual branches are scaled by the
layer score, so a zero layer score is an exact identity skip.

All-ones scores reproduce the ungated model bit for bit; binary scores are
equivalent to physically slicing the corresponding sub-architecture, which
is what `extract_subnetwork` does.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError
from .gating import (
    DECODER,
    ENCODER,
    KIND_BLOCK,
    KIND_CROSS_HEAD,
    KIND_HEAD,
    KIND_LAYER,
    ALL_SPARSITY,
    Budgets,
    ComponentId,
    ComponentLayout,
    GatingSpec,
    ScoreTable,
    SiteScores,
    SubNetworkMask,
    sample_scores,
)
from .tensor import (
    RNG_DROPOUT,
    CounterRng,
    Tensor,
    add,
    as_tensor,
    dropout,
    embedding_gather,
    layer_norm,
    matmul,
    mul,
    relu,
    repeat_interleave,
    reshape,
    scale,
    softmax,
    transpose,
)

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d: int
    d_prime: int
    heads: int
    blocks: int
    enc_layers: int
    dec_layers: int
    vocab_size: int
    max_len: int
    budgets: Budgets
    dropout_p: float = 0.1
    head_dim: int = 0  # 0 means d // heads
    sparsity_kinds: tuple[str, ...] = ALL_SPARSITY
    tie_embeddings: bool = True
    label_smoothing: float = 0.0
    # set on extracted sub-networks and equal-active baselines, where the
    # architecture is already reduced and d_prime may equal d
    compact: bool = False

    def __post_init__(self):
        if self.head_dim == 0:
            object.__setattr__(self, "head_dim", self.d // self.heads)

    def validate(self) -> None:
        if not self.compact:
            if self.d % self.heads != 0:
                raise ConfigurationError(f"d={self.d} not divisible by heads={self.heads}")
            if self.d_prime <= self.d:
                raise ConfigurationError(f"d_prime={self.d_prime} must exceed d={self.d}")
        if self.d_prime % self.blocks != 0:
            raise ConfigurationError(
                f"d_prime={self.d_prime} not divisible by blocks={self.blocks}")
        if min(self.enc_layers, self.dec_layers, self.vocab_size, self.max_len) < 1:
            raise ConfigurationError("layer counts, vocab and max_len must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p={self.dropout_p} outside [0, 1)")
        self.gating_spec().validate()

    @property
    def block_width(self) -> int:
        return self.d_prime // self.blocks

    def gating_spec(self, temperature: float = 1.0, prior: float = 0.5) -> GatingSpec:
        return GatingSpec(
            enc_layers=self.enc_layers, dec_layers=self.dec_layers,
            heads=self.heads, blocks=self.blocks,
            kinds=self.sparsity_kinds, budgets=self.budgets,
            temperature=temperature, prior=prior)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["budgets"] = Budgets(**raw["budgets"])
        raw["sparsity_kinds"] = tuple(raw["sparsity_kinds"])
        return cls(**raw)


def equal_active_config(cfg: ModelConfig) -> ModelConfig:
    """Dense architecture matching the sub-network a budget carves out."""
    b = cfg.budgets
    return ModelConfig(
        d=cfg.d, d_prime=b.blocks_active * cfg.block_width,
        heads=b.heads_active, blocks=b.blocks_active,
        enc_layers=b.enc_layers_active, dec_layers=b.dec_layers_active,
        vocab_size=cfg.vocab_size, max_len=cfg.max_len,
        budgets=Budgets(b.enc_layers_active, b.dec_layers_active,
                        b.heads_active, b.blocks_active),
        dropout_p=cfg.dropout_p, head_dim=cfg.head_dim,
        sparsity_kinds=(), tie_embeddings=cfg.tie_embeddings,
        label_smoothing=cfg.label_smoothing, compact=True)


# scores handed to a forward pass: one SiteScores per site, or None for dense
ScoreAssignment = dict


class SparseTransformer:
    """Model instance: named parameters plus the gated forward passes."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict[str, Tensor] | None = None):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.rng = CounterRng(seed)
        # set on extracted models: origin sizes keyed by include_embeddings
        self.origin_param_count: dict[bool, int] | None = None
        self.params = params if params is not None else self._init_params(seed)
        self._positions = _sinusoidal_positions(config.max_len, config.d).astype(dtype)

    # ------------------------------------------------------------------
    # parameters

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.config
        rng = self.rng.stream(0)
        params: dict[str, Tensor] = {}

        def xavier(*shape):
            limit = math.sqrt(6.0 / (shape[0] + shape[-1]))
            return Tensor(rng.uniform(-limit, limit, shape).astype(self.dtype),
                          requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)

        params["embedding"] = Tensor(
            (rng.standard_normal((cfg.vocab_size, cfg.d)) / math.sqrt(cfg.d)).astype(self.dtype),
            requires_grad=True)
        if not cfg.tie_embeddings:
            params["out_proj"] = xavier(cfg.d, cfg.vocab_size)

        def attn_params(prefix: str):
            # per-head projections stored stacked: head h owns columns
            # [h*head_dim, (h+1)*head_dim) of q/k/v and the same rows of out
            for name in ("q", "k", "v"):
                params[f"{prefix}/{name}"] = xavier(cfg.d, cfg.heads * cfg.head_dim)
            params[f"{prefix}/out"] = xavier(cfg.heads * cfg.head_dim, cfg.d)

        def ln_params(prefix: str):
            params[f"{prefix}/gain"] = ones(cfg.d)
            params[f"{prefix}/bias"] = zeros(cfg.d)

        for r in range(cfg.enc_layers):
            ln_params(f"enc/{r}/ln1")
            attn_params(f"enc/{r}/attn")
            ln_params(f"enc/{r}/ln2")
            params[f"enc/{r}/ffn/w1"] = xavier(cfg.d, cfg.d_prime)
            params[f"enc/{r}/ffn/b1"] = zeros(cfg.d_prime)
            params[f"enc/{r}/ffn/w2"] = xavier(cfg.d_prime, cfg.d)
            params[f"enc/{r}/ffn/b2"] = zeros(cfg.d)
        for r in range(cfg.dec_layers):
            ln_params(f"dec/{r}/ln1")
            attn_params(f"dec/{r}/attn")
            ln_params(f"dec/{r}/ln2")
            attn_params(f"dec/{r}/cross")
            ln_params(f"dec/{r}/ln3")
            params[f"dec/{r}/ffn/w1"] = xavier(cfg.d, cfg.d_prime)
            params[f"dec/{r}/ffn/b1"] = zeros(cfg.d_prime)
            params[f"dec/{r}/ffn/w2"] = xavier(cfg.d_prime, cfg.d)
            params[f"dec/{r}/ffn/b2"] = zeros(cfg.d)
        ln_params("enc_final")
        ln_params("dec_final")
        return params

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # ------------------------------------------------------------------
    # forward

    def _embed(self, tokens: np.ndarray, drops: "_DropoutStreams") -> Tensor:
        cfg = self.config
        seq = tokens.shape[1]
        if seq > cfg.max_len:
            raise InputError(f"sequence length {seq} exceeds max_len {cfg.max_len}")
        e = embedding_gather(self.params["embedding"], tokens)
        e = scale(e, math.sqrt(cfg.d))
        e = add(e, as_tensor(self._positions[:seq]))
        return drops(e)

    def _attention(self, prefix: str, x: Tensor, kv: Tensor,
                   alphas: Tensor | None, add_mask: np.ndarray) -> Tensor:
        cfg = self.config
        heads, hd = cfg.heads, cfg.head_dim
        b, sq = x.shape[0], x.shape[1]
        sk = kv.shape[1]
        inv = 1.0 / math.sqrt(hd)

        def heads_first(t: Tensor, s: int) -> Tensor:
            return transpose(reshape(t, (b, s, heads, hd)), (0, 2, 1, 3))

        q = heads_first(matmul(x, self.params[f"{prefix}/q"]), sq)
        k = heads_first(matmul(kv, self.params[f"{prefix}/k"]), sk)
        v = heads_first(matmul(kv, self.params[f"{prefix}/v"]), sk)
        logits = add(scale(matmul(q, transpose(k, (0, 1, 3, 2))), inv),
                     as_tensor(np.broadcast_to(add_mask, (b, heads, sq, sk))))
        attn = softmax(logits, axis=-1)
        cat = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, sq, heads * hd))
        if alphas is not None:
            # head score tiles across its head_dim slice of the
            # concatenated pre-projection vector
            cat = mul(cat, repeat_interleave(alphas, hd))
        return matmul(cat, self.params[f"{prefix}/out"])

    def _ffn(self, prefix: str, y: Tensor, betas: Tensor | None) -> Tensor:
        h = matmul(y, self.params[f"{prefix}/w1"])
        tiled = None
        if betas is not None:
            tiled = repeat_interleave(betas, self.config.block_width)
            h = mul(h, tiled)
        h = relu(add(h, self.params[f"{prefix}/b1"]))
        if tiled is not None:
            h = mul(h, tiled)
        return add(matmul(h, self.params[f"{prefix}/w2"]), self.params[f"{prefix}/b2"])

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.params[f"{prefix}/gain"], self.params[f"{prefix}/bias"])

    @staticmethod
    def _gate(branch: Tensor, gamma: Tensor | None) -> Tensor:
        return branch if gamma is None else mul(branch, gamma)

    def encode(self, src_tokens: np.ndarray, scores: SiteScores | None = None,
               pad_id: int = 0, training: bool = False, step: int = 0) -> Tensor:
        drops = _DropoutStreams(self, training, step, site=0)
        src_mask = _pad_mask(src_tokens, pad_id, self.dtype)
        u = self._embed(src_tokens, drops)
        for r in range(self.config.enc_layers):
            gamma = scores.piece(r, KIND_LAYER) if scores else None
            alphas = scores.piece(r, KIND_HEAD) if scores else None
            betas = scores.piece(r, KIND_BLOCK) if scores else None
            a = drops(self._attention(f"enc/{r}/attn", self._ln(f"enc/{r}/ln1", u),
                                      self._ln(f"enc/{r}/ln1", u), alphas, src_mask))
            v = add(u, self._gate(a, gamma))
            f = drops(self._ffn(f"enc/{r}/ffn", self._ln(f"enc/{r}/ln2", v), betas))
            u = add(v, self._gate(f, gamma))
        return self._ln("enc_final", u)

    def decode(self, tgt_in: np.ndarray, memory: Tensor, src_tokens: np.ndarray,
               scores: SiteScores | None = None, pad_id: int = 0,
               training: bool = False, step: int = 0) -> Tensor:
        drops = _DropoutStreams(self, training, step, site=1)
        t = tgt_in.shape[1]
        self_mask = _pad_mask(tgt_in, pad_id, self.dtype) + _causal_mask(t, self.dtype)
        cross_mask = _pad_mask(src_tokens, pad_id, self.dtype)
        u = self._embed(tgt_in, drops)
        for r in range(self.config.dec_layers):
            gamma = scores.piece(r, KIND_LAYER) if scores else None
            alphas = scores.piece(r, KIND_HEAD) if scores else None
            cross_alphas = scores.piece(r, KIND_CROSS_HEAD) if scores else None
            betas = scores.piece(r, KIND_BLOCK) if scores else None
            a = drops(self._attention(f"dec/{r}/attn", self._ln(f"dec/{r}/ln1", u),
                                      self._ln(f"dec/{r}/ln1", u), alphas, self_mask))
            u = add(u, self._gate(a, gamma))
            c = drops(self._attention(f"dec/{r}/cross", self._ln(f"dec/{r}/ln2", u),
                                      memory, cross_alphas, cross_mask))
            u = add(u, self._gate(c, gamma))
            f = drops(self._ffn(f"dec/{r}/ffn", self._ln(f"dec/{r}/ln3", u), betas))
            u = add(u, self._gate(f, gamma))
        out = self._ln("dec_final", u)
        if self.config.tie_embeddings:
            w_out = transpose(self.params["embedding"], (1, 0))
        else:
            w_out = self.params["out_proj"]
        return matmul(out, w_out)

    def forward(self, src_tokens: np.ndarray, tgt_in: np.ndarray,
                scores: ScoreAssignment | None = None, pad_id: int = 0,
                training: bool = False, step: int = 0) -> Tensor:
        """Teacher-forced logits (batch, tgt_len, vocab)."""
        src_tokens = np.asarray(src_tokens)
        tgt_in = np.asarray(tgt_in)
        _check_tokens(src_tokens, self.config.vocab_size)
        _check_tokens(tgt_in, self.config.vocab_size)
        enc_scores = scores.get(ENCODER) if scores else None
        dec_scores = scores.get(DECODER) if scores else None
        memory = self.encode(src_tokens, enc_scores, pad_id, training, step)
        return self.decode(tgt_in, memory, src_tokens, dec_scores, pad_id, training, step)


class _DropoutStreams:
    """Counter-based dropout streams: (seed, tag, step, site, call-index)."""

    def __init__(self, model: SparseTransformer, training: bool, step: int, site: int):
        self.model = model
        self.active = training and model.config.dropout_p > 0.0
        self.step = step
        self.site = site
        self.calls = 0

    def __call__(self, x: Tensor) -> Tensor:
        if not self.active:
            return x
        stream = self.model.rng.stream(RNG_DROPOUT, self.step, self.site, self.calls)
        self.calls += 1
        return dropout(x, self.model.config.dropout_p, stream, training=True)


def _check_tokens(tokens: np.ndarray, vocab: int) -> None:
    if tokens.ndim != 2:
        raise InputError(f"token batch must be 2-D, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise InputError("token id outside vocabulary")


def _pad_mask(tokens: np.ndarray, pad_id: int, dtype) -> np.ndarray:
    """(batch, 1, 1, key_len) additive mask hiding pad keys."""
    mask = np.where(tokens == pad_id, NEG_INF, 0.0).astype(dtype)
    return mask[:, None, None, :]


def _causal_mask(t: int, dtype) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF, dtype=dtype), k=1)[None, None, :, :]


def _sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def forward_for_pair(model: SparseTransformer, table: ScoreTable,
                     src_tokens: np.ndarray, tgt_in: np.ndarray,
                     src_lang: str, tgt_lang: str, pad_id: int = 0,
                     training: bool = False, step: int = 0,
                     rngs: dict[str, np.random.Generator] | None = None) -> Tensor:
    """Forward with encoder scores from the source language, decoder scores
    from the target language."""
    enc = sample_scores(table, src_lang, ENCODER,
                        rng=rngs.get(ENCODER) if rngs else None, training=training)
    dec = sample_scores(table, tgt_lang, DECODER,
                        rng=rngs.get(DECODER) if rngs else None, training=training)
    return model.forward(src_tokens, tgt_in, {ENCODER: enc, DECODER: dec},
                         pad_id=pad_id, training=training, step=step)


# ---------------------------------------------------------------------------
# sub-network extraction


def extract_subnetwork(model: SparseTransformer, mask: SubNetworkMask,
                       src_lang: str, tgt_lang: str,
                       score_table: ScoreTable | None = None,
                       scores: dict[str, np.ndarray] | None = None) -> SparseTransformer:
    """Physically smaller model equivalent to the hard-masked full forward.

    Skipped layers are dropped, unselected head projections and their output
    rows removed, unselected FFN blocks sliced out of W1/b1/W2, and the
    surviving soft score values baked into the output-side weights as
    multiplicative constants.

    Score vectors (canonical site order) come from `scores` or, when absent,
    from the table's evaluation-mode scores for (src_lang, tgt_lang).
    """
    cfg = model.config
    if scores is None:
        if score_table is None:
            raise ConfigurationError("extraction needs a score table or explicit scores")
        scores = {
            ENCODER: sample_scores(score_table, src_lang, ENCODER, training=False).values(),
            DECODER: sample_scores(score_table, tgt_lang, DECODER, training=False).values(),
        }
    spec = cfg.gating_spec()
    layouts = {site: ComponentLayout(spec, site) for site in (ENCODER, DECODER)}
    lang_of = {ENCODER: src_lang, DECODER: tgt_lang}

    def lookup(site: str, r: int, kind: str, idx: int) -> tuple[int, float]:
        """(mask bit, baked score) for one component; ungated kinds are (1, 1)."""
        layout = layouts[site]
        cid = ComponentId(site, r, kind, idx)
        if cid not in layout.index:
            return 1, 1.0
        m = mask.get(lang_of[site], cid)
        s = float(scores[site][layout.index[cid]])
        return m, s

    b = cfg.budgets
    new_params: dict[str, Tensor] = {}

    def keep_tensor(data: np.ndarray) -> Tensor:
        return Tensor(np.ascontiguousarray(data), requires_grad=True)

    def extract_attention(site: str, r_old: int, r_new: int, kind: str,
                          old_prefix: str, new_prefix: str, gamma: float) -> int:
        kept_heads = [h for h in range(cfg.heads) if lookup(site, r_old, kind, h)[0] == 1]
        hd = cfg.head_dim
        out_w = model.params[f"{old_prefix}/out"].data
        for name in ("q", "k", "v"):
            w = model.params[f"{old_prefix}/{name}"].data
            cols = [w[:, h * hd:(h + 1) * hd] for h in kept_heads]
            new_params[f"{new_prefix}/{name}"] = keep_tensor(np.concatenate(cols, axis=1))
        rows = []
        for h in kept_heads:
            _, s = lookup(site, r_old, kind, h)
            rows.append(out_w[h * hd:(h + 1) * hd] * (s * gamma))
        new_params[f"{new_prefix}/out"] = keep_tensor(np.concatenate(rows, axis=0))
        return len(kept_heads)

    def extract_ffn(site: str, r_old: int, old_prefix: str, new_prefix: str,
                    gamma: float) -> int:
        w = cfg.block_width
        kept = []
        for k in range(cfg.blocks):
            m, s = lookup(site, r_old, KIND_BLOCK, k)
            if m == 1:
                kept.append((k, s))
        w1 = model.params[f"{old_prefix}/w1"].data
        b1 = model.params[f"{old_prefix}/b1"].data
        w2 = model.params[f"{old_prefix}/w2"].data
        b2 = model.params[f"{old_prefix}/b2"].data
        cols, b1_parts, rows = [], [], []
        for k, s in kept:
            sl = slice(k * w, (k + 1) * w)
            cols.append(w1[:, sl] * s)      # block score masks W1 columns
            b1_parts.append(b1[sl])         # b1 stays unmasked
            rows.append(w2[sl, :] * (s * gamma))
        new_params[f"{new_prefix}/w1"] = keep_tensor(np.concatenate(cols, axis=1))
        new_params[f"{new_prefix}/b1"] = keep_tensor(np.concatenate(b1_parts))
        new_params[f"{new_prefix}/w2"] = keep_tensor(np.concatenate(rows, axis=0))
        new_params[f"{new_prefix}/b2"] = keep_tensor(b2 * gamma)
        return len(kept)

    def copy_ln(old_prefix: str, new_prefix: str) -> None:
        for part in ("gain", "bias"):
            new_params[f"{new_prefix}/{part}"] = keep_tensor(
                model.params[f"{old_prefix}/{part}"].data)

    counts = {}
    for site, tag, depth in ((ENCODER, "enc", cfg.enc_layers), (DECODER, "dec", cfg.dec_layers)):
        kept_layers = [r for r in range(depth) if lookup(site, r, KIND_LAYER, 0)[0] == 1]
        counts[site] = {"layers": len(kept_layers)}
        for r_new, r_old in enumerate(kept_layers):
            gamma = lookup(site, r_old, KIND_LAYER, 0)[1]
            copy_ln(f"{tag}/{r_old}/ln1", f"{tag}/{r_new}/ln1")
            n_heads = extract_attention(site, r_old, r_new, KIND_HEAD,
                                        f"{tag}/{r_old}/attn", f"{tag}/{r_new}/attn", gamma)
            copy_ln(f"{tag}/{r_old}/ln2", f"{tag}/{r_new}/ln2")
            if site == DECODER:
                extract_attention(site, r_old, r_new, KIND_CROSS_HEAD,
                                  f"{tag}/{r_old}/cross", f"{tag}/{r_new}/cross", gamma)
                copy_ln(f"{tag}/{r_old}/ln3", f"{tag}/{r_new}/ln3")
            n_blocks = extract_ffn(site, r_old, f"{tag}/{r_old}/ffn",
                                   f"{tag}/{r_new}/ffn", gamma)
            counts[site].update({"heads": n_heads, "blocks": n_blocks})

    new_params["embedding"] = keep_tensor(model.params["embedding"].data)
    if not cfg.tie_embeddings:
        new_params["out_proj"] = keep_tensor(model.params["out_proj"].data)
    copy_ln("enc_final", "enc_final")
    copy_ln("dec_final", "dec_final")

    heads_new = counts[ENCODER].get("heads", cfg.heads)
    blocks_new = counts[ENCODER].get("blocks", cfg.blocks)
    new_cfg = ModelConfig(
        d=cfg.d, d_prime=blocks_new * cfg.block_width,
        heads=heads_new, blocks=blocks_new,
        enc_layers=counts[ENCODER]["layers"], dec_layers=counts[DECODER]["layers"],
        vocab_size=cfg.vocab_size, max_len=cfg.max_len,
        budgets=Budgets(counts[ENCODER]["layers"], counts[DECODER]["layers"],
                        heads_new, blocks_new),
        dropout_p=cfg.dropout_p, head_dim=cfg.head_dim, sparsity_kinds=(),
        tie_embeddings=cfg.tie_embeddings, label_smoothing=cfg.label_smoothing,
        compact=True)
    sub = SparseTransformer(new_cfg, seed=model.rng.seed, dtype=model.dtype,
                            params=new_params)
    sub.origin_param_count = {
        True: sum(p.data.size for p in model.params.values()),
        False: sum(p.data.size for n, p in model.params.items()
                   if n not in ("embedding", "out_proj")),
    }
    return sub


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + one raw little-endian blob


def save_checkpoint(directory, model: SparseTransformer,
                    extras: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    named: list[tuple[str, np.ndarray]] = [
        (f"model/{name}", p.data) for name, p in model.params.items()
    ]
    for name, arr in (extras or {}).items():
        named.append((name, arr))
    dtype = np.dtype(model.dtype).name
    for name, arr in named:
        raw = np.ascontiguousarray(arr, dtype=model.dtype)
        blob = raw.astype("<" + np.dtype(model.dtype).str[1:], copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        "config": model.config.to_dict(),
        "dtype": dtype,
        "entries": entries,
        "meta": meta or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (directory / "params.bin").write_bytes(b"".join(chunks))


def load_checkpoint(directory) -> tuple[SparseTransformer, dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = (directory / "params.bin").read_bytes()
    dtype = np.dtype(manifest["dtype"])
    config = ModelConfig.from_dict(manifest["config"])
    params: dict[str, Tensor] = {}
    extras: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<" + dtype.str[1:]).astype(dtype).reshape(entry["shape"]).copy()
        if entry["name"].startswith("model/"):
            params[entry["name"][len("model/"):]] = Tensor(arr, requires_grad=True)
        else:
            extras[entry["name"]] = arr
    model = SparseTransformer(config, seed=int(manifest["meta"].get("seed", 0)),
                              dtype=dtype.type, params=params)
    return model, extras, manifest["meta"]
