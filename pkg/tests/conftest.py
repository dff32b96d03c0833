import numpy as np

from sparse_mt.gating import Budgets, ScoreTable
from sparse_mt.model import ModelConfig, SparseTransformer


def tiny_config(**kw):
    defaults = dict(
        d=8, d_prime=16, heads=2, blocks=4, enc_layers=2, dec_layers=2,
        vocab_size=13, max_len=12, budgets=Budgets(1, 1, 1, 2),
        dropout_p=0.0, sparsity_kinds=("head", "ffn", "layer"))
    defaults.update(kw)
    return ModelConfig(**defaults)


def make_model(cfg=None, seed=0, dtype=np.float64, **kw):
    return SparseTransformer(cfg or tiny_config(**kw), seed=seed, dtype=dtype)


def make_table(cfg, languages=("aa", "bb"), seed=3, dtype=np.float64,
               temperature=1.0):
    rng = np.random.default_rng(seed)
    table = ScoreTable(languages, cfg.gating_spec(temperature=temperature),
                       dtype=dtype, init_rng=rng, init_scale=2.0)
    return table


def token_batch(rng, batch, seq, vocab, pad_tail=0):
    toks = rng.integers(3, vocab, size=(batch, seq))
    if pad_tail:
        toks[:, -pad_tail:] = 0
    return toks
