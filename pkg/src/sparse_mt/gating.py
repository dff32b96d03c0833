"""Per-language latent component selection: scores, hard masks, priors.

Every gateable unit of the model (an attention head, an FFN block, or a
whole layer) is a component. Each language owns one selection logit mu per
component; a relaxed Bernoulli (Gumbel-sigmoid) draw turns logits into
scores in (0,1), which both weigh the component's output in the forward
pass and drive the hard top-k selection.

Canonical component order (stable, documented here, relied on by the
analysis tooling): encoder components before decoder components; within a
site, layers in ascending order; within a layer, the layer gate first, then
self-attention heads, then (decoder only) cross-attention heads, then FFN
blocks, each in ascending index order. Disabled sparsity kinds contribute
no components.

Decoder cross-attention heads are gated separately from self-attention
heads, with their own component kind; both are keyed by the target
language.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, DomainError, UnknownLanguageError
from .tensor import Tensor, add, as_tensor, mul, scale, sigmoid, split

ENCODER = "encoder"
DECODER = "decoder"

KIND_LAYER = "layer"
KIND_HEAD = "head"
KIND_CROSS_HEAD = "cross_head"
KIND_BLOCK = "ffn_block"

# sparsity-kind switches (config vocabulary) -> component kinds they enable
SPARSITY_HEAD = "head"
SPARSITY_FFN = "ffn"
SPARSITY_LAYER = "layer"
ALL_SPARSITY = (SPARSITY_HEAD, SPARSITY_FFN, SPARSITY_LAYER)


@dataclass(frozen=True, order=True)
class ComponentId:
    site: str
    layer_index: int
    kind: str
    index_within_kind: int


@dataclass(frozen=True)
class Budgets:
    """Kept counts: layers per stack, heads and blocks per layer."""

    enc_layers_active: int
    dec_layers_active: int
    heads_active: int
    blocks_active: int

    def layers_active(self, site: str) -> int:
        return self.enc_layers_active if site == ENCODER else self.dec_layers_active


@dataclass(frozen=True)
class GatingSpec:
    enc_layers: int
    dec_layers: int
    heads: int
    blocks: int
    kinds: tuple[str, ...]
    budgets: Budgets
    temperature: float = 1.0
    prior: float = 0.5

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 < self.prior < 1.0:
            raise ConfigurationError(f"prior must lie in (0,1), got {self.prior}")
        for k in self.kinds:
            if k not in ALL_SPARSITY:
                raise ConfigurationError(f"unknown sparsity kind {k!r}")
        b = self.budgets
        checks = [
            (b.enc_layers_active, self.enc_layers, "encoder layers"),
            (b.dec_layers_active, self.dec_layers, "decoder layers"),
            (b.heads_active, self.heads, "heads"),
            (b.blocks_active, self.blocks, "ffn blocks"),
        ]
        for active, full, what in checks:
            if not 1 <= active <= full:
                raise ConfigurationError(f"budget {active} for {what} outside [1, {full}]")


def site_components(spec: GatingSpec, site: str) -> list[ComponentId]:
    """Enabled components of one site in canonical order."""
    depth = spec.enc_layers if site == ENCODER else spec.dec_layers
    out: list[ComponentId] = []
    for r in range(depth):
        if SPARSITY_LAYER in spec.kinds:
            out.append(ComponentId(site, r, KIND_LAYER, 0))
        if SPARSITY_HEAD in spec.kinds:
            out.extend(ComponentId(site, r, KIND_HEAD, h) for h in range(spec.heads))
            if site == DECODER:
                out.extend(ComponentId(site, r, KIND_CROSS_HEAD, h) for h in range(spec.heads))
        if SPARSITY_FFN in spec.kinds:
            out.extend(ComponentId(site, r, KIND_BLOCK, k) for k in range(spec.blocks))
    return out


class ComponentLayout:
    """Index bookkeeping between a site's component list and flat vectors."""

    def __init__(self, spec: GatingSpec, site: str):
        self.spec = spec
        self.site = site
        self.components = site_components(spec, site)
        self.index = {cid: i for i, cid in enumerate(self.components)}
        # contiguous (layer, kind) chunks, in order
        self.piece_keys: list[tuple[int, str]] = []
        self.piece_sizes: list[int] = []
        prev = None
        for cid in self.components:
            key = (cid.layer_index, cid.kind)
            if key != prev:
                self.piece_keys.append(key)
                self.piece_sizes.append(0)
                prev = key
            self.piece_sizes[-1] += 1

    @property
    def size(self) -> int:
        return len(self.components)

    def vector_from_map(self, values: Mapping[ComponentId, float], dtype=np.float64) -> np.ndarray:
        out = np.empty(self.size, dtype=dtype)
        for cid, i in self.index.items():
            out[i] = values[cid]
        return out


def category_of(cid: ComponentId) -> tuple:
    """Budget category: layers compete per stack, heads/blocks per layer."""
    if cid.kind == KIND_LAYER:
        return (cid.site, KIND_LAYER)
    return (cid.site, cid.layer_index, cid.kind)


def _category_budget(cat: tuple, budgets: Budgets) -> int:
    if cat[1] == KIND_LAYER:
        return budgets.layers_active(cat[0])
    kind = cat[2]
    if kind in (KIND_HEAD, KIND_CROSS_HEAD):
        return budgets.heads_active
    return budgets.blocks_active


class SiteScores:
    """Scores for one site, both as a flat tape tensor and per-layer views.

    Per-layer views are split off lazily: the split must happen on the tape
    that will consume them, and most languages' views are never needed in a
    given step.
    """

    def __init__(self, layout: ComponentLayout, vector: Tensor):
        self.layout = layout
        self.vector = vector
        self._pieces: dict[tuple[int, str], Tensor] | None = None

    def piece(self, layer_index: int, kind: str) -> Tensor | None:
        """Per-layer score tensor for a kind, or None when the kind is ungated."""
        if self._pieces is None:
            if self.layout.size:
                parts = split(self.vector, self.layout.piece_sizes)
                self._pieces = dict(zip(self.layout.piece_keys, parts))
            else:
                self._pieces = {}
        return self._pieces.get((layer_index, kind))

    def as_map(self) -> dict[ComponentId, float]:
        vals = self.vector.data
        return {cid: float(vals[i]) for cid, i in self.layout.index.items()}

    def values(self) -> np.ndarray:
        return self.vector.data.copy()

    def apply_mask(self, mask_vector: np.ndarray) -> "SiteScores":
        """Hard-mask: s_bar = m * s, gradient only through surviving entries."""
        masked = mul(self.vector, as_tensor(mask_vector.astype(self.vector.dtype)))
        return SiteScores(self.layout, masked)


def ones_scores(layout: ComponentLayout, dtype=np.float64) -> SiteScores:
    """Constant all-ones scores (no gradient); reproduces the ungated model."""
    return SiteScores(layout, Tensor(np.ones(layout.size, dtype=dtype)))


class ScoreTable:
    """Per-language selection logits mu and the machinery to score them."""

    def __init__(self, languages: Iterable[str], spec: GatingSpec,
                 dtype=np.float32, init_rng: np.random.Generator | None = None,
                 init_scale: float = 0.01):
        spec.validate()
        self.spec = spec
        self.languages = list(languages)
        self.temperature = spec.temperature
        self.prior_p = spec.prior
        self.layouts = {site: ComponentLayout(spec, site) for site in (ENCODER, DECODER)}
        self.mu: dict[str, dict[str, Tensor]] = {}
        for lang in self.languages:
            rows = {}
            for site in (ENCODER, DECODER):
                n = self.layouts[site].size
                if init_rng is None:
                    init = np.zeros(n, dtype=dtype)
                else:
                    init = init_rng.uniform(-init_scale, init_scale, n).astype(dtype)
                rows[site] = Tensor(init, requires_grad=True)
            self.mu[lang] = rows

    def layout(self, site: str) -> ComponentLayout:
        return self.layouts[site]

    def parameters(self) -> dict[str, Tensor]:
        return {f"mu/{lang}/{site}": self.mu[lang][site]
                for lang in self.languages for site in (ENCODER, DECODER)}

    def _mu_row(self, language: str, site: str) -> Tensor:
        try:
            return self.mu[language][site]
        except KeyError:
            raise UnknownLanguageError(f"language {language!r} not registered") from None

    def language_vector(self, language: str) -> np.ndarray:
        """Evaluation-mode scores over all components in canonical order."""
        parts = [sample_scores(self, language, site, training=False).values()
                 for site in (ENCODER, DECODER)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def all_components(self) -> list[ComponentId]:
        return self.layouts[ENCODER].components + self.layouts[DECODER].components


def sample_scores(table: ScoreTable, language: str, site: str,
                  rng: np.random.Generator | None = None,
                  training: bool = False) -> SiteScores:
    """Relaxed selection scores for one (language, site).

    Training mode perturbs mu with one logistic-Gumbel noise vector (shared
    by the whole batch) before the tempered sigmoid; evaluation mode is the
    deterministic sigmoid(mu / temperature).
    """
    mu = table._mu_row(language, site)
    layout = table.layout(site)
    if layout.size == 0:
        return SiteScores(layout, Tensor(np.zeros(0, dtype=mu.dtype)))
    if training:
        if rng is None:
            raise ConfigurationError("training-mode sampling needs an rng")
        u = np.clip(rng.random(layout.size), 1e-12, 1.0 - 1e-12)
        noise = (np.log(u) - np.log1p(-u)).astype(mu.dtype)
        pre = scale(add(mu, as_tensor(noise)), 1.0 / table.temperature)
    else:
        pre = scale(mu, 1.0 / table.temperature)
    return SiteScores(layout, sigmoid(pre))


def top_k_mask(scores: Mapping[ComponentId, float], budgets: Budgets) -> dict[ComponentId, int]:
    """Budgeted hard selection: per category, the highest-scoring components.

    Ties break deterministically toward the lower component index. Masks are
    produced for every category present, including head/block masks of
    layers whose layer gate ends up unselected.
    """
    groups: dict[tuple, list[ComponentId]] = {}
    for cid in scores:
        groups.setdefault(category_of(cid), []).append(cid)
    mask: dict[ComponentId, int] = {}
    for cat, members in groups.items():
        budget = _category_budget(cat, budgets)
        if budget > len(members):
            raise ConfigurationError(
                f"budget {budget} exceeds category size {len(members)} for {cat}")
        ranked = sorted(members, key=lambda c: (-scores[c], c.layer_index, c.index_within_kind))
        keep = set(ranked[:budget])
        for cid in members:
            mask[cid] = 1 if cid in keep else 0
    return mask


def apply_hard(scores: SiteScores, mask: Mapping[ComponentId, int]) -> SiteScores:
    """Sparse scores s_bar = m * s (elementwise over the site's components)."""
    layout = scores.layout
    if set(mask) != set(layout.index):
        raise ConfigurationError("mask and scores cover different component sets")
    mvec = layout.vector_from_map(mask, dtype=np.float64)
    return scores.apply_mask(mvec)


class SubNetworkMask:
    """Binary selection per (language, component), meeting the budgets."""

    def __init__(self, budgets: Budgets):
        self.budgets = budgets
        self.m: dict[tuple[str, ComponentId], int] = {}

    @classmethod
    def from_scores(cls, table: ScoreTable,
                    scores: Mapping[str, Mapping[str, SiteScores]] | None = None) -> "SubNetworkMask":
        """Masks for every language, from given scores or evaluation scores."""
        out = cls(table.spec.budgets)
        for lang in table.languages:
            for site in (ENCODER, DECODER):
                if scores is not None:
                    site_scores = scores[lang][site]
                else:
                    site_scores = sample_scores(table, lang, site, training=False)
                out.set_slice(lang, top_k_mask(site_scores.as_map(), table.spec.budgets))
        return out

    def set_slice(self, language: str, mask_slice: Mapping[ComponentId, int]) -> None:
        for cid, v in mask_slice.items():
            if v not in (0, 1):
                raise DomainError(f"mask value {v} is not binary")
            self.m[(language, cid)] = int(v)

    def get(self, language: str, cid: ComponentId) -> int:
        return self.m[(language, cid)]

    def site_vector(self, language: str, layout: ComponentLayout) -> np.ndarray:
        return np.array([self.m[(language, cid)] for cid in layout.components], dtype=np.float64)

    def slice_map(self, language: str, layout: ComponentLayout) -> dict[ComponentId, int]:
        return {cid: self.m[(language, cid)] for cid in layout.components}

    def selected(self, language: str) -> set[ComponentId]:
        return {cid for (lang, cid), v in self.m.items() if lang == language and v == 1}

    def languages(self) -> list[str]:
        return sorted({lang for (lang, _cid) in self.m})

    def validate(self) -> None:
        """Exact budget counts per category, for every stored language."""
        counts: dict[tuple[str, tuple], tuple[int, int]] = {}
        for (lang, cid), v in self.m.items():
            cat = category_of(cid)
            kept, total = counts.get((lang, cat), (0, 0))
            counts[(lang, cat)] = (kept + v, total + 1)
        for (lang, cat), (kept, _total) in counts.items():
            budget = _category_budget(cat, self.budgets)
            if kept != budget:
                raise ConfigurationError(
                    f"language {lang}: category {cat} keeps {kept}, budget is {budget}")


def count_selection_params(D: int, H: int, K: int, L: int) -> int:
    """Selection-parameter count: D*H*L heads + D*K*L blocks + D*L layers."""
    if min(D, H, K) < 0 or L < 0:
        raise ConfigurationError("counts must be nonnegative")
    return D * H * L + D * K * L + D * L


def export_scores_csv(table: ScoreTable, path, masks: SubNetworkMask | None = None) -> None:
    """Write language,site,layer,kind,index,mu,score,mask rows for all languages."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["language", "site", "layer", "kind", "index", "mu", "score", "mask"])
        for lang in table.languages:
            for site in (ENCODER, DECODER):
                layout = table.layout(site)
                mu = table.mu[lang][site].data
                svals = sample_scores(table, lang, site, training=False).values()
                for cid, i in sorted(layout.index.items(), key=lambda kv: kv[1]):
                    mask_val = "" if masks is None else masks.get(lang, cid)
                    writer.writerow([lang, site, cid.layer_index, cid.kind,
                                     cid.index_within_kind,
                                     f"{float(mu[i]):.8g}", f"{float(svals[i]):.8g}", mask_val])
