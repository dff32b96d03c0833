"""Deterministic synthetic multilingual translation tasks.

A synthetic language is a transform from a shared interlingua (random
content-token sequences) to surface form: identity, reversal, adjacent-pair
swap, or a token cipher. Languages may additionally carry a per-language
cipher permutation, which is how members of one family differ while sharing
the structural transform kind. A sentence pair for direction (l1, l2) is
(T_l1(i), T_l2(i)) for one interlingua sentence i, so translating amounts
to composing l1's inverse with l2's transform.

Token ids: 0 = pad, 1 = begin, 2 = end, content tokens start at 3.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .tensor import RNG_BATCH, CounterRng

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
FIRST_CONTENT = 3

KIND_COPY = "copy"
KIND_REVERSE = "reverse"
KIND_CIPHER = "token_cipher"
KIND_SWAP = "local_swap"
TRANSFORM_KINDS = (KIND_COPY, KIND_REVERSE, KIND_CIPHER, KIND_SWAP)

# rng stream tags local to corpus generation
_GEN_SENTENCES = 10
_GEN_CIPHER = 11


@dataclass(frozen=True)
class SyntheticLanguage:
    lang_id: str
    family: str
    kind: str
    size: int
    tier: str = "medium"
    ciphered: bool | None = None  # default: only token_cipher languages

    def uses_cipher(self) -> bool:
        return self.kind == KIND_CIPHER if self.ciphered is None else self.ciphered


@dataclass(frozen=True)
class Direction:
    src: str
    tgt: str
    train: int = 0
    valid: int = 0
    test: int = 0
    zero_shot: bool = False

    @property
    def key(self) -> str:
        return f"{self.src}-{self.tgt}"


@dataclass
class CorpusSpec:
    vocab_size: int
    min_len: int
    max_len: int
    seed: int
    languages: list[SyntheticLanguage]
    directions: list[Direction]
    pivot: str | None = None

    def validate(self) -> None:
        if self.vocab_size < 8:
            raise ConfigurationError(f"vocab_size must be >= 8, got {self.vocab_size}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigurationError("need 1 <= min_len <= max_len")
        ids = [l.lang_id for l in self.languages]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("duplicate language ids")
        for lang in self.languages:
            if lang.kind not in TRANSFORM_KINDS:
                raise ConfigurationError(f"unknown transform kind {lang.kind!r}")
            if lang.size <= 0:
                raise ConfigurationError(f"resource size must be positive for {lang.lang_id}")
        by_family: dict[str, set[str]] = {}
        for lang in self.languages:
            by_family.setdefault(lang.family, set()).add(lang.kind)
        for fam, kinds in by_family.items():
            if len(kinds) > 1:
                raise ConfigurationError(f"family {fam} mixes transform kinds {sorted(kinds)}")
        known = set(ids)
        for d in self.directions:
            if d.src not in known or d.tgt not in known:
                raise ConfigurationError(f"direction {d.key} references unknown language")
            if d.zero_shot and (d.train > 0 or d.test <= 0):
                raise ConfigurationError(
                    f"zero-shot direction {d.key} must have no train pairs and some test pairs")


class LanguageTransform:
    """Invertible surface transform of one language."""

    def __init__(self, lang: SyntheticLanguage, vocab_size: int, seed: int, lang_index: int):
        self.lang = lang
        n_content = vocab_size - FIRST_CONTENT
        if lang.uses_cipher():
            rng = CounterRng(seed).stream(_GEN_CIPHER, lang_index)
            self.perm = rng.permutation(n_content) + FIRST_CONTENT
        else:
            self.perm = np.arange(n_content) + FIRST_CONTENT
        self.inv_perm = np.empty_like(self.perm)
        self.inv_perm[self.perm - FIRST_CONTENT] = np.arange(n_content) + FIRST_CONTENT

    def _structure(self, tokens: np.ndarray, inverse: bool) -> np.ndarray:
        kind = self.lang.kind
        if kind in (KIND_COPY, KIND_CIPHER):
            return tokens
        if kind == KIND_REVERSE:
            return tokens[::-1]
        if kind == KIND_SWAP:
            out = tokens.copy()
            for i in range(0, len(out) - 1, 2):
                out[i], out[i + 1] = out[i + 1], out[i]
            return out
        raise ConfigurationError(f"unknown kind {kind}")

    def apply(self, interlingua: np.ndarray) -> np.ndarray:
        return self.perm[self._structure(interlingua, inverse=False) - FIRST_CONTENT]

    def invert(self, surface: np.ndarray) -> np.ndarray:
        return self._structure(self.inv_perm[surface - FIRST_CONTENT], inverse=True)


def generate(spec: CorpusSpec, out_dir) -> Path:
    """Write corpus files and manifest; byte-identical for equal (spec, seed)."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    transforms = {
        lang.lang_id: LanguageTransform(lang, spec.vocab_size, spec.seed, i)
        for i, lang in enumerate(spec.languages)
    }
    crng = CounterRng(spec.seed)
    for d_idx, d in enumerate(spec.directions):
        rng = crng.stream(_GEN_SENTENCES, d_idx)
        seen: set[bytes] = set()
        sentences: list[np.ndarray] = []
        need = d.train + d.valid + d.test
        while len(sentences) < need:
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            sent = rng.integers(FIRST_CONTENT, spec.vocab_size, size=length)
            key = sent.tobytes()
            if key in seen:
                continue
            seen.add(key)
            sentences.append(sent)
        offsets = {"train": (0, d.train), "valid": (d.train, d.train + d.valid),
                   "test": (d.train + d.valid, need)}
        for split, (lo, hi) in offsets.items():
            lines = []
            for sent in sentences[lo:hi]:
                src = transforms[d.src].apply(sent)
                tgt = transforms[d.tgt].apply(sent)
                lines.append(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)))
            path = out_dir / f"{d.key}.{split}.tsv"
            path.write_text("\n".join(lines) + ("\n" if lines else ""))
    manifest = {
        "vocab_size": spec.vocab_size,
        "min_len": spec.min_len,
        "max_len": spec.max_len,
        "seed": spec.seed,
        "pivot": spec.pivot,
        "languages": [asdict(l) for l in spec.languages],
        "directions": [asdict(d) for d in spec.directions],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir


class Corpus:
    """On-disk corpus access keyed by (direction, split)."""

    def __init__(self, directory):
        self.directory = Path(directory)
        manifest = json.loads((self.directory / "manifest.json").read_text())
        self.vocab_size = manifest["vocab_size"]
        self.min_len = manifest["min_len"]
        self.max_len = manifest["max_len"]
        self.seed = manifest["seed"]
        self.pivot = manifest.get("pivot")
        self.languages = {l["lang_id"]: SyntheticLanguage(**l) for l in manifest["languages"]}
        self.directions = [Direction(**d) for d in manifest["directions"]]
        self._cache: dict[tuple[str, str], list[tuple[np.ndarray, np.ndarray]]] = {}

    def direction(self, key: str) -> Direction:
        for d in self.directions:
            if d.key == key:
                return d
        raise ConfigurationError(f"unknown direction {key}")

    def train_directions(self) -> list[Direction]:
        return [d for d in self.directions if d.train > 0]

    def zero_shot_directions(self) -> list[Direction]:
        return [d for d in self.directions if d.zero_shot]

    def pairs(self, key: str, split: str) -> list[tuple[np.ndarray, np.ndarray]]:
        cache_key = (key, split)
        if cache_key not in self._cache:
            path = self.directory / f"{key}.{split}.tsv"
            if not path.exists():
                raise ConfigurationError(f"missing corpus file {path.name}")
            out = []
            for line in path.read_text().splitlines():
                if not line:
                    continue
                src_txt, tgt_txt = line.split("\t")
                out.append((np.array([int(t) for t in src_txt.split()]),
                            np.array([int(t) for t in tgt_txt.split()])))
            self._cache[cache_key] = out
        return self._cache[cache_key]

    def task_of(self, d: Direction) -> str:
        if d.zero_shot:
            return "zero_shot"
        if self.pivot is not None:
            if d.src == self.pivot:
                return "o2m"
            if d.tgt == self.pivot:
                return "m2o"
        return "m2m"


def sample_direction(sizes: Mapping[str, int], tau: float,
                     rng: np.random.Generator) -> str:
    """Pick a direction with probability proportional to size^(1/tau)."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    keys = sorted(sizes)
    if not keys:
        raise ConfigurationError("no directions to sample")
    weights = np.array([float(sizes[k]) ** (1.0 / tau) for k in keys])
    probs = weights / weights.sum()
    return keys[int(rng.choice(len(keys), p=probs))]


def batch_iter(pairs: Sequence[tuple[np.ndarray, np.ndarray]], batch_tokens: int,
               pad_id: int = PAD_ID,
               rng: np.random.Generator | None = None) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    """Length-bucketed padded batches covering every pair exactly once.

    A pair's cost is max(len(src), len(tgt)); a batch's footprint is
    rows x widest cost, kept within `batch_tokens`. Batch order is shuffled
    when an rng is supplied; contents are deterministic either way.
    """
    if not pairs:
        return
    costs = [max(len(s), len(t)) for s, t in pairs]
    if max(costs) > batch_tokens:
        raise InputError(
            f"sequence of {max(costs)} tokens exceeds batch budget {batch_tokens}")
    order = sorted(range(len(pairs)), key=lambda i: (costs[i], i))
    batches: list[list[int]] = []
    current: list[int] = []
    width = 0
    for i in order:
        new_width = max(width, costs[i])
        if current and (len(current) + 1) * new_width > batch_tokens:
            batches.append(current)
            current, width = [], 0
            new_width = costs[i]
        current.append(i)
        width = new_width
    if current:
        batches.append(current)
    if rng is not None:
        rng.shuffle(batches)
    for members in batches:
        yield _pad_batch([pairs[i] for i in members], pad_id)


def _pad_batch(members: list[tuple[np.ndarray, np.ndarray]],
               pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    s_len = max(len(s) for s, _ in members)
    t_len = max(len(t) for _, t in members)
    src = np.full((len(members), s_len), pad_id, dtype=np.int64)
    tgt = np.full((len(members), t_len), pad_id, dtype=np.int64)
    for i, (s, t) in enumerate(members):
        src[i, :len(s)] = s
        tgt[i, :len(t)] = t
    return src, tgt


def teacher_forcing(tgt: np.ndarray, pad_id: int = PAD_ID, bos_id: int = BOS_ID,
                    eos_id: int = EOS_ID) -> tuple[np.ndarray, np.ndarray]:
    """(decoder input, prediction targets) from a padded raw target batch."""
    b, t = tgt.shape
    tgt_in = np.full((b, t + 1), pad_id, dtype=tgt.dtype)
    tgt_out = np.full((b, t + 1), pad_id, dtype=tgt.dtype)
    tgt_in[:, 0] = bos_id
    tgt_in[:, 1:] = tgt
    lengths = (tgt != pad_id).sum(axis=1)
    tgt_out[:, :t] = tgt
    for i, n in enumerate(lengths):
        tgt_out[i, n] = eos_id
        tgt_in[i, n + 1:] = pad_id
    return tgt_in, tgt_out


def sample_training_batch(pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                          batch_tokens: int, rng: np.random.Generator,
                          pad_id: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    """Random batch of distinct pairs filling the padded token budget."""
    if not pairs:
        raise InputError("cannot sample a batch from an empty split")
    perm = rng.permutation(len(pairs))
    members: list[tuple[np.ndarray, np.ndarray]] = []
    width = 0
    for i in perm:
        s, t = pairs[int(i)]
        cost = max(len(s), len(t))
        if cost > batch_tokens:
            raise InputError(f"sequence of {cost} tokens exceeds batch budget {batch_tokens}")
        new_width = max(width, cost)
        if members and (len(members) + 1) * new_width > batch_tokens:
            break
        members.append((s, t))
        width = new_width
    return _pad_batch(members, pad_id)


def split_hashes(corpus: Corpus, key: str) -> dict[str, set[str]]:
    """Sentence-level hashes per split, for disjointness checks."""
    out = {}
    for split in ("train", "valid", "test"):
        hashes = set()
        for s, t in corpus.pairs(key, split):
            hashes.add(hashlib.sha256(s.tobytes() + b"|" + t.tobytes()).hexdigest())
        out[split] = hashes
    return out
