"""Configuration: TOML files with [model], [gating], [train], [data]
sections, plus named presets.

The `desk` preset is the runnable desk-scale experiment (6 synthetic
languages in 2 families). The `paper-public24` and `paper-opus100` presets
carry the published hyperparameters for reference and selection-parameter
accounting; executing them is out of scope for this artifact.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import CorpusSpec, Direction, SyntheticLanguage
from .errors import ConfigurationError
from .gating import Budgets
from .inference import DecodeConfig
from .model import ModelConfig
from .trainer import TrainConfig

PRESETS = ("desk", "paper-public24", "paper-opus100")


@dataclass
class Bundle:
    model: ModelConfig
    train: TrainConfig
    decode: DecodeConfig
    data: CorpusSpec | None
    data_dir: str | None

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.decode.validate()
        if self.data is not None:
            self.data.validate()


def desk_preset() -> dict:
    """Runnable desk-scale setup: 6 languages, 2 families, ~20k pairs."""
    langs = [
        # family "straight": pure token ciphers (word order preserved)
        {"lang_id": "s1", "family": "straight", "kind": "token_cipher", "size": 4400, "tier": "high"},
        {"lang_id": "s2", "family": "straight", "kind": "token_cipher", "size": 2200, "tier": "medium"},
        {"lang_id": "s3", "family": "straight", "kind": "token_cipher", "size": 1100, "tier": "low"},
        # family "mirror": reversed word order, each with its own cipher
        {"lang_id": "m1", "family": "mirror", "kind": "reverse", "size": 4400, "tier": "high", "ciphered": True},
        {"lang_id": "m2", "family": "mirror", "kind": "reverse", "size": 2200, "tier": "medium", "ciphered": True},
        {"lang_id": "m3", "family": "mirror", "kind": "reverse", "size": 1100, "tier": "low", "ciphered": True},
    ]
    dirs = []
    for src, tgt, n in [("s1", "s2", 2600), ("s2", "s1", 2600),
                        ("m1", "m2", 2600), ("m2", "m1", 2600),
                        ("s1", "m1", 2600), ("m1", "s1", 2600),
                        ("s3", "s1", 2000), ("m1", "m3", 2000)]:
        dirs.append({"src": src, "tgt": tgt, "train": n, "valid": 64, "test": 128})
    dirs.append({"src": "s3", "tgt": "m3", "zero_shot": True, "test": 128})
    return {
        "model": {
            "d": 32, "ffn_dim": 64, "heads": 4, "ffn_blocks": 8,
            "enc_layers": 4, "dec_layers": 4, "vocab_size": 64, "max_len": 24,
            "dropout": 0.1, "sparsity": ["head", "ffn", "layer"],
            "tie_embeddings": True, "label_smoothing": 0.0,
        },
        "gating": {
            "heads_active": 3, "blocks_active": 4,
            "enc_layers_active": 3, "dec_layers_active": 3,
            "temperature": 1.0, "prior": 0.5,
        },
        "train": {
            "steps": 3000, "phase1_steps": 1000, "lr": 0.003, "warmup": 150,
            "batch_tokens": 1024, "seed": 0, "c_s": 0.1, "c_d": 0.02, "c_t": 0.1,
            "clip_norm": 1.0, "checkpoint_every": 1000, "direction_tau": 5.0,
            "mu_init_scale": 1.5,
        },
        "decode": {"strategy": "greedy", "beam_size": 1, "length_penalty": 1.0,
                   "max_out_len": 16},
        "data": {
            "vocab_size": 64, "min_len": 4, "max_len": 12, "seed": 1,
            "pivot": None, "languages": langs, "directions": dirs,
        },
    }


def paper_public24_preset() -> dict:
    """Published medium-scale hyperparameters (reference only)."""
    return {
        "model": {
            "d": 512, "ffn_dim": 2048, "heads": 4, "ffn_blocks": 8,
            "enc_layers": 6, "dec_layers": 12, "vocab_size": 250_000,
            "max_len": 256, "dropout": 0.1, "sparsity": ["head", "ffn", "layer"],
            "tie_embeddings": True, "label_smoothing": 0.0,
        },
        "gating": {
            "heads_active": 3, "blocks_active": 4,
            "enc_layers_active": 6, "dec_layers_active": 6,
            "temperature": 1.0, "prior": 0.5,
        },
        "train": {
            "steps": 100_000, "phase1_steps": 8_000, "lr": 0.0007,
            "warmup": 4000, "batch_tokens": 150_000, "seed": 0,
            "c_s": 0.1, "c_d": 0.02, "c_t": 0.1, "clip_norm": 1.0,
            "checkpoint_every": 10_000, "direction_tau": 5.0,
        },
        "decode": {"strategy": "beam", "beam_size": 5, "length_penalty": 1.0,
                   "max_out_len": 256},
        "data": None,
    }


def paper_opus100_preset() -> dict:
    """Published large-scale hyperparameters (reference only)."""
    return {
        "model": {
            "d": 512, "ffn_dim": 4096, "heads": 8, "ffn_blocks": 16,
            "enc_layers": 12, "dec_layers": 12, "vocab_size": 64_000,
            "max_len": 256, "dropout": 0.1, "sparsity": ["head", "ffn", "layer"],
            "tie_embeddings": True, "label_smoothing": 0.0,
        },
        "gating": {
            "heads_active": 6, "blocks_active": 8,
            "enc_layers_active": 6, "dec_layers_active": 6,
            "temperature": 1.0, "prior": 0.5,
        },
        "train": {
            "steps": 500_000, "phase1_steps": 50_000, "lr": 0.0015,
            "warmup": 4000, "batch_tokens": 150_000, "seed": 0,
            "c_s": 0.1, "c_d": 0.02, "c_t": 0.1, "clip_norm": 1.0,
            "checkpoint_every": 50_000, "direction_tau": 5.0,
        },
        "decode": {"strategy": "beam", "beam_size": 4, "length_penalty": 0.6,
                   "max_out_len": 256},
        "data": None,
    }


def preset(name: str) -> dict:
    table = {"desk": desk_preset, "paper-public24": paper_public24_preset,
             "paper-opus100": paper_opus100_preset}
    if name not in table:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {PRESETS}")
    return table[name]()


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_raw(path=None, preset_name: str = "desk", overrides: dict | None = None) -> dict:
    raw = preset(preset_name)
    if path is not None:
        with open(path, "rb") as fh:
            raw = _merge(raw, tomllib.load(fh))
    if overrides:
        raw = _merge(raw, overrides)
    return raw


def parse(raw: dict) -> Bundle:
    m = raw["model"]
    g = raw["gating"]
    t = raw["train"]
    dec = raw.get("decode", {})
    budgets = Budgets(
        enc_layers_active=g["enc_layers_active"],
        dec_layers_active=g["dec_layers_active"],
        heads_active=g["heads_active"],
        blocks_active=g["blocks_active"])
    model = ModelConfig(
        d=m["d"], d_prime=m["ffn_dim"], heads=m["heads"], blocks=m["ffn_blocks"],
        enc_layers=m["enc_layers"], dec_layers=m["dec_layers"],
        vocab_size=m["vocab_size"], max_len=m["max_len"], budgets=budgets,
        dropout_p=m.get("dropout", 0.1),
        sparsity_kinds=tuple(m.get("sparsity", ["head", "ffn", "layer"])),
        tie_embeddings=m.get("tie_embeddings", True),
        label_smoothing=m.get("label_smoothing", 0.0))
    train = TrainConfig(
        steps=t["steps"], phase1_steps=t["phase1_steps"], lr=t["lr"],
        warmup=t["warmup"], batch_tokens=t["batch_tokens"], seed=t.get("seed", 0),
        c_s=t.get("c_s", 0.1), c_d=t.get("c_d", 0.02), c_t=t.get("c_t", 0.1),
        clip_norm=t.get("clip_norm", 1.0),
        checkpoint_every=t.get("checkpoint_every", 0),
        direction_tau=t.get("direction_tau", 5.0),
        temperature=g.get("temperature", 1.0), prior=g.get("prior", 0.5),
        mu_init_scale=t.get("mu_init_scale", 1.0))
    decode_cfg = DecodeConfig(
        strategy=dec.get("strategy", "greedy"), beam_size=dec.get("beam_size", 1),
        length_penalty=dec.get("length_penalty", 1.0),
        max_out_len=dec.get("max_out_len", 16))
    data = raw.get("data")
    spec = None
    data_dir = None
    if data:
        data_dir = data.get("dir")
        if "languages" in data:
            spec = CorpusSpec(
                vocab_size=data["vocab_size"], min_len=data["min_len"],
                max_len=data["max_len"], seed=data.get("seed", 0),
                languages=[SyntheticLanguage(**l) for l in data["languages"]],
                directions=[Direction(**d) for d in data["directions"]],
                pivot=data.get("pivot"))
    bundle = Bundle(model=model, train=train, decode=decode_cfg,
                    data=spec, data_dir=data_dir)
    bundle.validate()
    return bundle


def load(path=None, preset_name: str = "desk", overrides: dict | None = None) -> Bundle:
    return parse(load_raw(path, preset_name, overrides))
