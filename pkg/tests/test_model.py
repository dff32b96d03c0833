import math

import numpy as np
import pytest
from conftest import make_model, make_table, tiny_config, token_batch

from sparse_mt import errors
from sparse_mt.gating import (
    DECODER,
    ENCODER,
    KIND_BLOCK,
    KIND_CROSS_HEAD,
    KIND_HEAD,
    KIND_LAYER,
    Budgets,
    ComponentId,
    ComponentLayout,
    SiteScores,
    SubNetworkMask,
    apply_hard,
    ones_scores,
    sample_scores,
    top_k_mask,
)
from sparse_mt.model import (
    ModelConfig,
    SparseTransformer,
    equal_active_config,
    extract_subnetwork,
    forward_for_pair,
    load_checkpoint,
    save_checkpoint,
)
from sparse_mt.tensor import Tensor, cross_entropy, no_grad
from sparse_mt.verification import check_gradients


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


class TestConfig:
    def test_valid(self):
        tiny_config().validate()

    def test_d_not_divisible_by_heads(self):
        with pytest.raises(errors.ConfigurationError):
            tiny_config(d=9).validate()

    def test_ffn_must_be_wider_than_d(self):
        with pytest.raises(errors.ConfigurationError):
            tiny_config(d_prime=8).validate()

    def test_compact_allows_narrow_ffn(self):
        tiny_config(d_prime=8, compact=True).validate()

    def test_budget_out_of_bounds(self):
        with pytest.raises(errors.ConfigurationError):
            tiny_config(budgets=Budgets(3, 1, 1, 2)).validate()

    def test_equal_active_config(self):
        cfg = tiny_config(budgets=Budgets(1, 2, 1, 2))
        active = equal_active_config(cfg)
        active.validate()
        assert active.enc_layers == 1 and active.dec_layers == 2
        assert active.heads == 1 and active.d_prime == 2 * cfg.block_width
        assert active.head_dim == cfg.head_dim
        assert active.sparsity_kinds == ()

    def test_roundtrip_dict(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestDegeneracy:
    def test_all_ones_scores_bitwise_equal_dense(self):
        model = make_model()
        rng = np.random.default_rng(0)
        src = token_batch(rng, 2, 5, model.config.vocab_size, pad_tail=1)
        tgt = token_batch(rng, 2, 4, model.config.vocab_size)
        spec = model.config.gating_spec()
        scores = {site: ones_scores(ComponentLayout(spec, site), dtype=np.float64)
                  for site in (ENCODER, DECODER)}
        with no_grad():
            dense = model.forward(src, tgt).data
            gated = model.forward(src, tgt, scores).data
        assert np.array_equal(dense, gated)

    def test_zero_layer_score_is_exact_identity(self):
        model = make_model()
        spec = model.config.gating_spec()
        layout = ComponentLayout(spec, ENCODER)
        vec = np.ones(layout.size)
        for r in range(model.config.enc_layers):
            vec[layout.index[ComponentId(ENCODER, r, KIND_LAYER, 0)]] = 0.0
        scores = SiteScores(layout, Tensor(vec))
        rng = np.random.default_rng(1)
        src = token_batch(rng, 2, 5, model.config.vocab_size)
        with no_grad():
            # with every layer gated off, the stack output is just the
            # final layer norm of the embedding
            out = model.encode(src, scores).data
            drops = _no_drops(model)
            expected = model._ln("enc_final", model._embed(src, drops)).data
        assert np.array_equal(out, expected)

    def test_gamma_half_matches_explicit_formula(self):
        cfg = tiny_config(enc_layers=1, sparsity_kinds=("layer",))
        model = make_model(cfg)
        spec = cfg.gating_spec()
        layout = ComponentLayout(spec, ENCODER)
        scores = SiteScores(layout, Tensor(np.array([0.5])))
        rng = np.random.default_rng(2)
        src = token_batch(rng, 2, 4, cfg.vocab_size)
        with no_grad():
            out = model.encode(src, scores).data
            u = model._embed(src, _no_drops(model))
            from sparse_mt.model import _pad_mask
            mask = _pad_mask(src, 0, model.dtype)
            a = model._attention("enc/0/attn", model._ln("enc/0/ln1", u),
                                 model._ln("enc/0/ln1", u), None, mask)
            v = Tensor(u.data + 0.5 * a.data)
            f = model._ffn("enc/0/ffn", model._ln("enc/0/ln2", v), None)
            u1 = Tensor(v.data + 0.5 * f.data)
            expected = model._ln("enc_final", u1).data
        np.testing.assert_allclose(out, expected, atol=1e-12)


def _no_drops(model):
    from sparse_mt.model import _DropoutStreams
    return _DropoutStreams(model, training=False, step=0, site=0)


class TestSliceEquivalence:
    def test_binary_head_mask_equals_sliced_attention(self):
        cfg = tiny_config(heads=4, enc_layers=1)
        model = make_model(cfg, seed=5)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 5, cfg.d))
        mask_np = np.zeros((1, 1, 1, 1))
        keep = [0, 2, 3]
        alphas = np.array([1.0 if h in keep else 0.0 for h in range(cfg.heads)])
        with no_grad():
            out = model._attention("enc/0/attn", Tensor(x), Tensor(x),
                                   Tensor(alphas), mask_np).data
        # independent numpy attention over only the surviving heads and the
        # corresponding output-projection rows
        hd = cfg.head_dim
        outs, rows = [], []
        for h in keep:
            q = x @ model.params["enc/0/attn/q"].data[:, h * hd:(h + 1) * hd]
            k = x @ model.params["enc/0/attn/k"].data[:, h * hd:(h + 1) * hd]
            v = x @ model.params["enc/0/attn/v"].data[:, h * hd:(h + 1) * hd]
            a = np_softmax(q @ k.transpose(0, 2, 1) / math.sqrt(hd))
            outs.append(a @ v)
            rows.append(model.params["enc/0/attn/out"].data[h * hd:(h + 1) * hd])
        ref = np.concatenate(outs, axis=-1) @ np.concatenate(rows, axis=0)
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_masked_head_zeroes_preprojection_dims(self):
        cfg = tiny_config(heads=4, enc_layers=1)
        model = make_model(cfg, seed=6)
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((1, 3, cfg.d)))
        alphas = Tensor(np.array([1.0, 0.0, 1.0, 1.0]))
        # recompute the concatenated pre-projection vector by hand
        hd = cfg.head_dim
        cat = []
        with no_grad():
            for h in range(cfg.heads):
                q = x.data @ model.params["enc/0/attn/q"].data[:, h * hd:(h + 1) * hd]
                k = x.data @ model.params["enc/0/attn/k"].data[:, h * hd:(h + 1) * hd]
                v = x.data @ model.params["enc/0/attn/v"].data[:, h * hd:(h + 1) * hd]
                a = np_softmax(q @ k.transpose(0, 2, 1) / math.sqrt(hd))
                cat.append((a @ v) * alphas.data[h])
        cat = np.concatenate(cat, axis=-1)
        assert np.all(cat[..., hd:2 * hd] == 0.0)

    def test_binary_block_mask_equals_sliced_ffn(self):
        cfg = tiny_config(enc_layers=1)
        model = make_model(cfg, seed=7)
        rng = np.random.default_rng(5)
        y = rng.standard_normal((2, 4, cfg.d))
        keep = [1, 3]
        betas = np.array([1.0 if k in keep else 0.0 for k in range(cfg.blocks)])
        with no_grad():
            out = model._ffn("enc/0/ffn", Tensor(y), Tensor(betas)).data
        w = cfg.block_width
        cols = np.concatenate([model.params["enc/0/ffn/w1"].data[:, k * w:(k + 1) * w] for k in keep], axis=1)
        b1 = np.concatenate([model.params["enc/0/ffn/b1"].data[k * w:(k + 1) * w] for k in keep])
        rows = np.concatenate([model.params["enc/0/ffn/w2"].data[k * w:(k + 1) * w, :] for k in keep], axis=0)
        ref = np.maximum(y @ cols + b1, 0) @ rows + model.params["enc/0/ffn/b2"].data
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_all_zero_blocks_give_bias_only(self):
        cfg = tiny_config(enc_layers=1)
        model = make_model(cfg, seed=8)
        y = np.random.default_rng(6).standard_normal((1, 3, cfg.d))
        with no_grad():
            out = model._ffn("enc/0/ffn", Tensor(y), Tensor(np.zeros(cfg.blocks))).data
        np.testing.assert_allclose(out, np.broadcast_to(model.params["enc/0/ffn/b2"].data, out.shape))

    @pytest.mark.parametrize("case", range(4))
    def test_extracted_equals_hard_masked_full(self, case):
        cfg = tiny_config(budgets=Budgets(1, 2, 1, 2))
        model = make_model(cfg, seed=10 + case)
        table = make_table(cfg, seed=20 + case)
        rng = np.random.default_rng(30 + case)
        src = token_batch(rng, 3, 6, cfg.vocab_size, pad_tail=1)
        tgt = token_batch(rng, 3, 5, cfg.vocab_size)
        masks = SubNetworkMask.from_scores(table)
        masks.validate()

        with no_grad():
            hard_scores = {}
            for site, lang in ((ENCODER, "aa"), (DECODER, "bb")):
                s = sample_scores(table, lang, site, training=False)
                hard_scores[site] = apply_hard(s, masks.slice_map(lang, table.layout(site)))
            full = model.forward(src, tgt, hard_scores).data

        sub = extract_subnetwork(model, masks, "aa", "bb", score_table=table)
        with no_grad():
            compact = sub.forward(src, tgt).data
        np.testing.assert_allclose(compact, full, atol=1e-6)

    def test_full_budget_extraction_identity(self):
        cfg = tiny_config(budgets=Budgets(2, 2, 2, 4))
        model = make_model(cfg, seed=42)
        spec = cfg.gating_spec()
        # scores pinned at exactly 1 and a full mask
        ones = {site: ones_scores(ComponentLayout(spec, site)) for site in (ENCODER, DECODER)}
        masks = SubNetworkMask(cfg.budgets)
        for lang, site in (("aa", ENCODER), ("bb", DECODER)):
            masks.set_slice(lang, {c: 1 for c in ComponentLayout(spec, site).components})
        sub = extract_subnetwork(
            model, masks, "aa", "bb",
            scores={site: ones[site].values() for site in (ENCODER, DECODER)})
        rng = np.random.default_rng(7)
        src = token_batch(rng, 2, 5, cfg.vocab_size)
        tgt = token_batch(rng, 2, 4, cfg.vocab_size)
        with no_grad():
            np.testing.assert_allclose(sub.forward(src, tgt).data,
                                       model.forward(src, tgt).data, atol=1e-6)

    def test_extracted_active_params_match_closed_form(self):
        cfg = tiny_config(budgets=Budgets(1, 2, 1, 2))
        model = make_model(cfg)
        table = make_table(cfg)
        sub = extract_subnetwork(model, SubNetworkMask.from_scores(table), "aa", "bb",
                                 score_table=table)
        d, hd = cfg.d, cfg.head_dim
        dp = 2 * cfg.block_width
        attn = 3 * d * hd * 1 + 1 * hd * d  # one head kept
        ffn = d * dp + dp + dp * d + d
        ln = 2 * d
        enc = 1 * (attn + ffn + 2 * ln)
        dec = 2 * (2 * attn + ffn + 3 * ln)
        expected = enc + dec + 2 * ln  # + final norms
        total = sum(p.data.size for n, p in sub.params.items() if n != "embedding")
        assert total == expected


class TestLanguageConditioning:
    def test_encoder_invariant_to_target_language(self):
        cfg = tiny_config()
        model = make_model(cfg)
        table = make_table(cfg, languages=("aa", "bb", "cc"))
        rng = np.random.default_rng(8)
        src = token_batch(rng, 2, 5, cfg.vocab_size)
        tgt = token_batch(rng, 2, 4, cfg.vocab_size)
        with no_grad():
            enc = sample_scores(table, "aa", ENCODER, training=False)
            memory = model.encode(src, enc).data
            logits_b = forward_for_pair(model, table, src, tgt, "aa", "bb").data
            logits_c = forward_for_pair(model, table, src, tgt, "aa", "cc").data
            memory2 = model.encode(src, enc).data
        assert np.array_equal(memory, memory2)
        assert not np.array_equal(logits_b, logits_c)

    def test_decoder_invariant_to_source_language_given_memory(self):
        cfg = tiny_config()
        model = make_model(cfg)
        table = make_table(cfg, languages=("aa", "bb", "cc"))
        rng = np.random.default_rng(9)
        src = token_batch(rng, 2, 5, cfg.vocab_size)
        tgt = token_batch(rng, 2, 4, cfg.vocab_size)
        with no_grad():
            dec = sample_scores(table, "cc", DECODER, training=False)
            mem = model.encode(src, sample_scores(table, "aa", ENCODER, training=False))
            out1 = model.decode(tgt, mem, src, dec).data
            out2 = model.decode(tgt, mem, src, dec).data
        assert np.array_equal(out1, out2)

    def test_unknown_language_raises(self):
        cfg = tiny_config()
        model = make_model(cfg)
        table = make_table(cfg)
        rng = np.random.default_rng(10)
        src = token_batch(rng, 1, 3, cfg.vocab_size)
        with pytest.raises(errors.UnknownLanguageError):
            forward_for_pair(model, table, src, src, "aa", "zz")


class TestForwardContracts:
    def test_sequence_too_long(self):
        model = make_model()
        toks = np.full((1, model.config.max_len + 1), 3)
        with pytest.raises(errors.InputError):
            model.forward(toks, toks[:, :3])

    def test_token_out_of_vocab(self):
        model = make_model()
        with pytest.raises(errors.InputError):
            model.forward(np.array([[99]]), np.array([[3]]))

    def test_end_to_end_gradient_check(self):
        cfg = tiny_config(enc_layers=1, dec_layers=1)
        model = make_model(cfg, dtype=np.float64)
        table = make_table(cfg, dtype=np.float64)
        rng = np.random.default_rng(11)
        src = token_batch(rng, 2, 4, cfg.vocab_size, pad_tail=1)
        tgt_in = token_batch(rng, 2, 3, cfg.vocab_size)
        tgt_out = token_batch(rng, 2, 3, cfg.vocab_size)

        def loss():
            logits = forward_for_pair(model, table, src, tgt_in, "aa", "bb")
            return cross_entropy(logits, tgt_out, pad_id=0)

        wrt = [model.params["enc/0/ffn/w1"], model.params["dec/0/attn/q"],
               model.params["embedding"], table.mu["aa"][ENCODER], table.mu["bb"][DECODER]]
        check_gradients(loss, wrt, tol=1e-4, sample=6, seed=0)

    def test_dropout_training_only_and_deterministic(self):
        cfg = tiny_config(dropout_p=0.3)
        model = make_model(cfg)
        rng = np.random.default_rng(12)
        src = token_batch(rng, 2, 4, cfg.vocab_size)
        tgt = token_batch(rng, 2, 3, cfg.vocab_size)
        with no_grad():
            e1 = model.forward(src, tgt).data
            e2 = model.forward(src, tgt).data
            t1 = model.forward(src, tgt, training=True, step=5).data
            t2 = model.forward(src, tgt, training=True, step=5).data
            t3 = model.forward(src, tgt, training=True, step=6).data
        assert np.array_equal(e1, e2)
        assert np.array_equal(t1, t2)
        assert not np.array_equal(t1, t3)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = tiny_config()
        model = SparseTransformer(cfg, seed=1, dtype=np.float32)
        extras = {"mu/aa/encoder": np.arange(5, dtype=np.float32)}
        save_checkpoint(tmp_path / "ckpt", model, extras, meta={"step": 7, "seed": 1})
        loaded, ex, meta = load_checkpoint(tmp_path / "ckpt")
        assert meta["step"] == 7
        assert loaded.config == cfg
        for name, p in model.params.items():
            assert np.array_equal(loaded.params[name].data, p.data), name
        assert np.array_equal(ex["mu/aa/encoder"], extras["mu/aa/encoder"])

    def test_loaded_model_same_forward(self, tmp_path):
        cfg = tiny_config()
        model = SparseTransformer(cfg, seed=2, dtype=np.float32)
        save_checkpoint(tmp_path / "c", model)
        loaded, _, _ = load_checkpoint(tmp_path / "c")
        rng = np.random.default_rng(13)
        src = token_batch(rng, 2, 4, cfg.vocab_size)
        tgt = token_batch(rng, 2, 3, cfg.vocab_size)
        with no_grad():
            np.testing.assert_array_equal(model.forward(src, tgt).data,
                                          loaded.forward(src, tgt).data)
