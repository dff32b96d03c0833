import numpy as np
import pytest
from conftest import make_model, make_table, tiny_config, token_batch

from sparse_mt import errors
from sparse_mt.corpus import (
    KIND_CIPHER,
    KIND_COPY,
    Corpus,
    CorpusSpec,
    Direction,
    SyntheticLanguage,
    generate,
)
from sparse_mt.gating import (
    DECODER,
    ENCODER,
    Budgets,
    SubNetworkMask,
    apply_hard,
    sample_scores,
)
from sparse_mt.inference import (
    DecodeConfig,
    EvalReport,
    bleu,
    count_params,
    decode,
    evaluate,
    format_report_table,
    mac_count,
    measure_throughput,
    prepare_pair_model,
)
from sparse_mt.model import equal_active_config, extract_subnetwork

GREEDY = DecodeConfig(strategy="greedy", beam_size=1, max_out_len=10)


class TestDecodeConfig:
    def test_greedy_iff_beam_one(self):
        with pytest.raises(errors.ConfigurationError):
            DecodeConfig(strategy="greedy", beam_size=3).validate()
        with pytest.raises(errors.ConfigurationError):
            DecodeConfig(strategy="beam", beam_size=1).validate()
        DecodeConfig(strategy="beam", beam_size=4).validate()

    def test_bad_strategy(self):
        with pytest.raises(errors.ConfigurationError):
            DecodeConfig(strategy="sampling").validate()


class TestDecode:
    def test_beam_width_one_equals_greedy(self):
        model = make_model(seed=3, dtype=np.float32)
        rng = np.random.default_rng(0)
        src = token_batch(rng, 4, 6, model.config.vocab_size, pad_tail=1)
        greedy_out = decode(model, src, GREEDY)
        beam1 = [_force_beam_one(model, src[i:i + 1]) for i in range(4)]
        assert greedy_out == beam1
        # wider beam still returns one hypothesis per row
        wide = decode(model, src, DecodeConfig("beam", 2, 1.0, 10))
        assert len(wide) == 4

    def test_decode_deterministic(self):
        model = make_model(seed=4, dtype=np.float32)
        rng = np.random.default_rng(1)
        src = token_batch(rng, 3, 5, model.config.vocab_size)
        assert decode(model, src, GREEDY) == decode(model, src, GREEDY)

    def test_extracted_decoding_matches_masked_full(self):
        cfg = tiny_config(budgets=Budgets(1, 1, 1, 2))
        model = make_model(cfg, seed=5)
        table = make_table(cfg, seed=6)
        masks = SubNetworkMask.from_scores(table)
        rng = np.random.default_rng(2)
        src = token_batch(rng, 4, 6, cfg.vocab_size)

        full_model, hard_scores = prepare_pair_model(model, table, "aa", "bb",
                                                     use_extraction=False, masks=masks)
        sub_model, none_scores = prepare_pair_model(model, table, "aa", "bb",
                                                    use_extraction=True, masks=masks)
        assert none_scores is None
        full_out = decode(full_model, src, GREEDY, hard_scores)
        sub_out = decode(sub_model, src, GREEDY)
        assert full_out == sub_out


def _force_beam_one(model, src_row):
    # run the beam implementation at width 1 (decode() would route this to
    # the greedy path, which is exactly what the equivalence claim is about)
    from sparse_mt.inference import _beam_single
    from sparse_mt.tensor import no_grad
    with no_grad():
        return _beam_single(model, src_row, DecodeConfig("beam", 1, 1.0, 10),
                            None, 0, 1, 2, 10)


class TestBleu:
    def test_perfect_match(self):
        refs = [["5", "6", "7", "8", "9"], ["4", "5", "6", "7"]]
        assert bleu(refs, refs) == pytest.approx(100.0)

    def test_no_shared_unigrams(self):
        assert bleu([["1", "2", "3", "4"]], [["5", "6", "7", "8"]]) == 0.0

    def test_hand_oracle_clipped_precision(self):
        hyp = ["the the the cat"]
        ref = ["the cat sat down"]
        # unsmoothed: no matching trigram, so the geometric mean collapses
        assert bleu(hyp, ref) == 0.0
        # by hand: p1=2/4 (the clipped to 1, cat 1), p2=(1+1)/(3+1),
        # p3=(0+1)/(2+1), p4=(0+1)/(1+1); BP=1 at equal length
        expected = 100.0 * (0.5 * 0.5 * (1 / 3) * 0.5) ** 0.25
        assert bleu(hyp, ref, smooth=True) == pytest.approx(expected, abs=1e-9)

    def test_brevity_penalty(self):
        # hypothesis shorter than reference gets penalized
        full = bleu([["1", "2", "3", "4"]], [["1", "2", "3", "4"]])
        short = bleu([["1", "2", "3"]], [["1", "2", "3", "4"]])
        assert short < full

    def test_corpus_order_invariance(self):
        rng = np.random.default_rng(3)
        hyps = [list(rng.integers(3, 20, 6)) for _ in range(10)]
        refs = [list(rng.integers(3, 20, 6)) for _ in range(10)]
        base = bleu(hyps, refs, smooth=True)
        perm = rng.permutation(10)
        assert bleu([hyps[i] for i in perm], [refs[i] for i in perm],
                    smooth=True) == pytest.approx(base)

    def test_deletion_never_improves_perfect_corpus(self):
        rng = np.random.default_rng(4)
        refs = [list(rng.integers(3, 30, 8)) for _ in range(20)]
        perfect = bleu(refs, refs, smooth=True)
        for trial in range(10):
            trial_rng = np.random.default_rng(100 + trial)
            mutilated = []
            for h in refs:
                keep = trial_rng.random(len(h)) > 0.2
                mutilated.append([t for t, k in zip(h, keep) if k] or [h[0]])
            assert bleu(mutilated, refs, smooth=True) <= perfect

    def test_deletion_statistical_monotonicity(self):
        rng = np.random.default_rng(5)
        refs = [list(rng.integers(3, 30, 10)) for _ in range(30)]
        hyps = [list(r) for r in refs]
        scores = []
        for frac in (0.0, 0.15, 0.35):
            drop_rng = np.random.default_rng(9)
            cut = []
            for h in hyps:
                keep = drop_rng.random(len(h)) >= frac
                cut.append([t for t, k in zip(h, keep) if k] or [h[0]])
            scores.append(bleu(cut, refs, smooth=True))
        assert scores[0] >= scores[1] >= scores[2]

    def test_length_mismatch(self):
        with pytest.raises(errors.InputError):
            bleu([["1"]], [["1"], ["2"]])

    def test_empty_corpus(self):
        with pytest.raises(errors.InputError):
            bleu([], [])


class TestParamsAndMacs:
    def test_dense_active_equals_total(self):
        model = make_model()
        counts = count_params(model)
        assert counts["active"] == counts["total"]

    def test_embeddings_excluded_by_default(self):
        model = make_model()
        excl = count_params(model)["active"]
        incl = count_params(model, include_embeddings=True)["active"]
        assert incl - excl == model.params["embedding"].data.size

    def test_half_ffn_budget_exactly_halves_ffn_share(self):
        cfg = tiny_config(sparsity_kinds=("ffn",), budgets=Budgets(2, 2, 2, 2))
        model = make_model(cfg)
        table = make_table(cfg)
        sub = extract_subnetwork(model, SubNetworkMask.from_scores(table), "aa", "bb",
                                 score_table=table)
        def ffn_size(m):
            return sum(p.data.size for n, p in m.params.items() if "/ffn/w" in n)
        assert ffn_size(sub) == ffn_size(model) // 2
        counts = count_params(sub)
        assert counts["active"] < counts["total"]

    def test_layer_budget_scales_stack_params(self):
        cfg = tiny_config(sparsity_kinds=("layer",), budgets=Budgets(1, 1, 2, 4))
        model = make_model(cfg)
        table = make_table(cfg)
        sub = extract_subnetwork(model, SubNetworkMask.from_scores(table), "aa", "bb",
                                 score_table=table)
        def stack_size(m, tag):
            return sum(p.data.size for n, p in m.params.items() if n.startswith(tag))
        # D' = 1 of D = 2 layers per stack
        assert stack_size(sub, "enc/") == stack_size(model, "enc/") // 2
        assert stack_size(sub, "dec/") == stack_size(model, "dec/") // 2

    def test_mac_count_strictly_less_under_any_strict_budget(self):
        cfg = tiny_config(budgets=Budgets(1, 2, 2, 4))  # only layers strict
        dense_macs = mac_count(cfg, 8, 8)
        sub_macs = mac_count(equal_active_config(cfg), 8, 8)
        assert sub_macs < dense_macs

    def test_mac_count_equal_at_full_budget(self):
        cfg = tiny_config(budgets=Budgets(2, 2, 2, 4))
        assert mac_count(equal_active_config(cfg), 8, 8) == mac_count(cfg, 8, 8)


class TestThroughput:
    def make_batches(self, model, n=2, rows=8, seq=8):
        rng = np.random.default_rng(6)
        return [token_batch(rng, rows, seq, model.config.vocab_size) for _ in range(n)]

    def test_preconditions(self):
        model = make_model(dtype=np.float32)
        with pytest.raises(errors.InputError):
            measure_throughput(model, [], GREEDY)
        with pytest.raises(errors.InputError):
            measure_throughput(model, self.make_batches(model), GREEDY, warmup=0)
        with pytest.raises(errors.InputError):
            measure_throughput(model, self.make_batches(model), GREEDY, repeats=2)

    def test_token_accounting_and_stability(self):
        model = make_model(dtype=np.float32)
        batches = self.make_batches(model)
        r1 = measure_throughput(model, batches, GREEDY, warmup=1, repeats=5)
        outs = [decode(model, b, GREEDY) for b in batches]
        expected_tokens = sum(len(h) for out in outs for h in out)
        assert r1["tokens"] == expected_tokens
        r2 = measure_throughput(model, batches, GREEDY, warmup=1, repeats=5)
        assert abs(r1["tokens_per_sec"] - r2["tokens_per_sec"]) <= 0.10 * max(
            r1["tokens_per_sec"], r2["tokens_per_sec"])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    spec = CorpusSpec(
        vocab_size=32, min_len=4, max_len=8, seed=1,
        languages=[SyntheticLanguage("aa", "plain", KIND_COPY, 100, tier="high"),
                   SyntheticLanguage("bb", "ciphers", KIND_CIPHER, 100, tier="low")],
        directions=[Direction("aa", "bb", train=20, valid=4, test=8),
                    Direction("bb", "aa", train=20, valid=4, test=8)],
        pivot="aa")
    out = tmp_path_factory.mktemp("eval_corpus")
    generate(spec, out)
    return Corpus(out)


class TestEvaluate:
    def test_untrained_model_near_zero_bleu_on_cipher(self, corpus):
        cfg = tiny_config(vocab_size=32, max_len=16)
        model = make_model(cfg, dtype=np.float32)
        table = make_table(cfg, seed=9, dtype=np.float32)
        report = evaluate(model, table, corpus, GREEDY, batch_tokens=64)
        assert set(report.per_direction) == {"aa-bb", "bb-aa"}
        assert all(v < 5.0 for v in report.per_direction.values())
        assert report.task_averages["o2m"] == pytest.approx(report.per_direction["aa-bb"])
        assert report.active_params < report.total_params

    def test_report_table_formatting(self):
        report = EvalReport(per_direction={"aa-bb": 30.0, "bb-aa": 40.0},
                            task_averages={"o2m": 30.0, "m2o": 40.0},
                            active_params=1_200_000, total_params=2_400_000,
                            tokens_per_sec=987.6)
        text = format_report_table([("sparse", report)])
        assert "1.200 (2.400)" in text
        assert "987.6" in text
        assert "35.00" in text
