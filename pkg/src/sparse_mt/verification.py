"""Self-check suites: finite-difference gradients, degeneracy, slice
equivalence, the ELBO property, and budget enforcement.

These are the independent checks behind the `verify` CLI subcommand; the
acceptance test module drives the same functions. The finite-difference
harness is deliberately separate from the tape engine so the two sides of
every gradient comparison stay independent.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, no_grad


def numeric_gradient(forward: Callable[[], float], param: Tensor,
                     indices: Sequence[tuple], eps: float = 1e-6) -> dict[tuple, float]:
    """Central finite differences of a scalar forward at selected entries."""
    grads: dict[tuple, float] = {}
    flatview = param.data  # mutated in place, restored after each probe
    for idx in indices:
        orig = float(flatview[idx])
        flatview[idx] = orig + eps
        with no_grad():
            hi = forward()
        flatview[idx] = orig - eps
        with no_grad():
            lo = forward()
        flatview[idx] = orig
        grads[idx] = (hi - lo) / (2.0 * eps)
    return grads


def check_gradients(forward: Callable[[], Tensor], wrt: Sequence[Tensor],
                    tol: float = 1e-4, eps: float = 1e-6,
                    sample: int | None = None, seed: int = 0) -> float:
    """Compare tape gradients of a scalar loss against finite differences.

    Entries pass when |analytic - numeric| <= tol * (1 + |numeric|). When
    `sample` is set, only that many randomly chosen entries per tensor are
    probed (for larger graphs). Returns the worst relative violation seen;
    raises AssertionError on failure.

    The probed tensors should be float64: central differences are unreliable
    in float32.
    """
    for p in wrt:
        p.grad = None
    with Tape() as tape:
        loss = forward()
    tape.backward(loss)
    analytic = []
    for p in wrt:
        assert p.grad is not None, "parameter did not receive a gradient"
        analytic.append(p.grad.copy())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ana in zip(wrt, analytic):
        all_idx = list(np.ndindex(p.data.shape))
        if sample is not None and len(all_idx) > sample:
            chosen = rng.choice(len(all_idx), size=sample, replace=False)
            all_idx = [all_idx[i] for i in chosen]
        num = numeric_gradient(lambda: forward().item(), p, all_idx, eps=eps)
        for idx, n in num.items():
            a = float(ana[idx])
            err = abs(a - n) / (1.0 + abs(n))
            worst = max(worst, err)
            assert err <= tol, (
                f"gradient mismatch at {idx} of tensor shape {p.shape}: "
                f"analytic {a:.8g} vs numeric {n:.8g} (rel err {err:.3g} > {tol})"
            )
    return worst


# ---------------------------------------------------------------------------
# suites


class CheckFailure(AssertionError):
    pass


def _result(name: str, fn: Callable[[], None]) -> tuple[str, bool, str]:
    try:
        fn()
        return (name, True, "")
    except Exception as exc:  # report, don't abort the suite
        return (name, False, f"{type(exc).__name__}: {exc}")


def gradient_suite(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Finite-difference checks for every differentiable op and a tiny
    end-to-end model, float64 at 1e-4 relative tolerance."""
    from . import tensor as T

    rng = np.random.default_rng(seed)

    def t(shape, grad=True):
        return Tensor(rng.standard_normal(shape), requires_grad=grad)

    results = []
    a, b = t((3, 3)), t((3, 3))
    results.append(_result("matmul", lambda: check_gradients(
        lambda: T.tsum(T.matmul(a, b)), [a, b])))

    x4, w4 = t((2, 3, 4)), t((4, 5))
    results.append(_result("matmul-batched", lambda: check_gradients(
        lambda: T.tsum(T.matmul(x4, w4)), [x4, w4])))

    u, v = t((4, 5)), t((4, 5))
    results.append(_result("add", lambda: check_gradients(
        lambda: T.tsum(T.add(u, v)), [u, v])))
    results.append(_result("mul", lambda: check_gradients(
        lambda: T.tsum(T.mul(u, v)), [u, v])))
    bias = t((5,))
    results.append(_result("add-bias-broadcast", lambda: check_gradients(
        lambda: T.tsum(T.add(u, bias)), [u, bias])))
    results.append(_result("scale", lambda: check_gradients(
        lambda: T.tsum(T.scale(u, 1.7)), [u])))
    results.append(_result("relu", lambda: check_gradients(
        lambda: T.tsum(T.mul(T.relu(u), v)), [u])))
    results.append(_result("sigmoid", lambda: check_gradients(
        lambda: T.tsum(T.mul(T.sigmoid(u), v)), [u])))

    pos = Tensor(rng.uniform(0.05, 0.95, 8), requires_grad=True)
    wpos = Tensor(rng.standard_normal(8))
    results.append(_result("xlogx", lambda: check_gradients(
        lambda: T.tsum(T.mul(T.xlogx(pos), wpos)), [pos])))

    sm_in, sm_w = t((3, 6)), Tensor(rng.standard_normal((3, 6)))
    results.append(_result("softmax", lambda: check_gradients(
        lambda: T.tsum(T.mul(T.softmax(sm_in, axis=-1), sm_w)), [sm_in])))

    ln_x, ln_g, ln_b = t((3, 5)), t((5,)), t((5,))
    ln_w = Tensor(rng.standard_normal((3, 5)))
    results.append(_result("layer_norm", lambda: check_gradients(
        lambda: T.tsum(T.mul(T.layer_norm(ln_x, ln_g, ln_b), ln_w)), [ln_x, ln_g, ln_b])))

    ce_logits = t((5, 7))
    ce_targets = np.array([1, 2, 0, 4, 6])
    results.append(_result("cross_entropy", lambda: check_gradients(
        lambda: T.cross_entropy(ce_logits, ce_targets, pad_id=0), [ce_logits])))

    c1, c2 = t((2, 3)), t((2, 4))
    cw = Tensor(rng.standard_normal((2, 7)))
    results.append(_result("concat", lambda: check_gradients(
        lambda: T.tsum(T.mul(T.concat([c1, c2]), cw)), [c1, c2])))

    sp = t((2, 6))
    def split_loss():
        lo, hi = T.split(sp, [2, 4])
        return T.add(T.tsum(T.mul(lo, lo)), T.tsum(hi))
    results.append(_result("split", lambda: check_gradients(split_loss, [sp])))

    table = t((6, 4))
    ids = np.array([[0, 2], [5, 2]])
    results.append(_result("embedding_gather", lambda: check_gradients(
        lambda: T.tsum(T.embedding_gather(table, ids)), [table])))

    tr = t((2, 3, 4))
    trw = Tensor(rng.standard_normal((2, 4, 3)))
    results.append(_result("transpose", lambda: check_gradients(
        lambda: T.tsum(T.mul(T.transpose(tr, (0, 2, 1)), trw)), [tr])))
    rw = Tensor(rng.standard_normal((6, 4)))
    results.append(_result("reshape", lambda: check_gradients(
        lambda: T.tsum(T.mul(T.reshape(tr, (6, 4)), rw)), [tr])))

    results.append(_result("sum", lambda: check_gradients(
        lambda: T.tsum(T.mul(u, u)), [u])))
    results.append(_result("mean", lambda: check_gradients(
        lambda: T.tmean(T.mul(u, u)), [u])))

    ri = t((4,))
    riw = Tensor(rng.standard_normal(8))
    results.append(_result("repeat_interleave", lambda: check_gradients(
        lambda: T.tsum(T.mul(T.repeat_interleave(ri, 2), riw)), [ri])))

    results.append(_result("end-to-end-model", lambda: _model_gradient_check(seed)))
    return results


def _model_gradient_check(seed: int) -> None:
    from .gating import DECODER, ENCODER, Budgets, ScoreTable
    from .model import ModelConfig, SparseTransformer, forward_for_pair
    from .tensor import cross_entropy

    cfg = ModelConfig(d=8, d_prime=16, heads=2, blocks=2, enc_layers=1, dec_layers=1,
                      vocab_size=11, max_len=8, budgets=Budgets(1, 1, 1, 1),
                      dropout_p=0.0)
    model = SparseTransformer(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    table = ScoreTable(["xx", "yy"], cfg.gating_spec(), dtype=np.float64,
                       init_rng=rng, init_scale=1.0)
    src = rng.integers(3, cfg.vocab_size, size=(2, 4))
    tgt_in = rng.integers(3, cfg.vocab_size, size=(2, 3))
    tgt_out = rng.integers(3, cfg.vocab_size, size=(2, 3))

    def loss():
        logits = forward_for_pair(model, table, src, tgt_in, "xx", "yy")
        return cross_entropy(logits, tgt_out, pad_id=0)

    wrt = [model.params["enc/0/ffn/w1"], model.params["dec/0/cross/q"],
           model.params["embedding"], table.mu["xx"][ENCODER], table.mu["yy"][DECODER]]
    check_gradients(loss, wrt, tol=1e-4, sample=5, seed=seed)


def degeneracy_suite(seed: int = 0) -> list[tuple[str, bool, str]]:
    """All-ones scores reproduce the dense model bitwise; zero layer scores
    are exact identity skips."""
    from .gating import DECODER, ENCODER, Budgets, ComponentId, ComponentLayout, KIND_LAYER, SiteScores, ones_scores
    from .model import ModelConfig, SparseTransformer
    from .model import _DropoutStreams

    cfg = ModelConfig(d=16, d_prime=32, heads=4, blocks=4, enc_layers=2, dec_layers=2,
                      vocab_size=17, max_len=10, budgets=Budgets(1, 1, 2, 2),
                      dropout_p=0.0)
    model = SparseTransformer(cfg, seed=seed, dtype=np.float32)
    rng = np.random.default_rng(seed)
    src = rng.integers(3, cfg.vocab_size, size=(3, 6))
    tgt = rng.integers(3, cfg.vocab_size, size=(3, 5))
    spec = cfg.gating_spec()

    def bitwise_dense():
        scores = {site: ones_scores(ComponentLayout(spec, site), dtype=np.float32)
                  for site in (ENCODER, DECODER)}
        with no_grad():
            dense = model.forward(src, tgt).data
            gated = model.forward(src, tgt, scores).data
        if not np.array_equal(dense, gated):
            raise CheckFailure("all-ones scores changed at least one bit")

    def identity_skip():
        layout = ComponentLayout(spec, ENCODER)
        vec = np.ones(layout.size, dtype=np.float32)
        for r in range(cfg.enc_layers):
            vec[layout.index[ComponentId(ENCODER, r, KIND_LAYER, 0)]] = 0.0
        with no_grad():
            out = model.encode(src, SiteScores(layout, Tensor(vec))).data
            drops = _DropoutStreams(model, training=False, step=0, site=0)
            expected = model._ln("enc_final", model._embed(src, drops)).data
        if not np.array_equal(out, expected):
            raise CheckFailure("zero layer score is not an exact identity")

    return [_result("all-ones-bitwise", bitwise_dense),
            _result("zero-gamma-identity", identity_skip)]


def slice_equivalence_suite(n_cases: int = 100, seed: int = 0,
                            tol: float = 1e-6) -> list[tuple[str, bool, str]]:
    """Binary masks vs. physically sliced computation, and extracted
    sub-network vs. hard-masked full forward."""
    from .gating import (DECODER, ENCODER, Budgets, ScoreTable, SubNetworkMask,
                         apply_hard, sample_scores)
    from .model import ModelConfig, SparseTransformer, extract_subnetwork

    rng = np.random.default_rng(seed)

    def head_case(i: int) -> None:
        heads = int(rng.integers(2, 5))
        hd = int(rng.integers(2, 5))
        d = heads * hd
        cfg = ModelConfig(d=d, d_prime=2 * d, heads=heads, blocks=2,
                          enc_layers=1, dec_layers=1, vocab_size=8, max_len=8,
                          budgets=Budgets(1, 1, 1, 1), dropout_p=0.0)
        model = SparseTransformer(cfg, seed=1000 + i, dtype=np.float64)
        x = rng.standard_normal((2, 4, d))
        keep = sorted(rng.choice(heads, size=int(rng.integers(1, heads + 1)),
                                 replace=False).tolist())
        alphas = np.array([1.0 if h in keep else 0.0 for h in range(heads)])
        with no_grad():
            out = model._attention("enc/0/attn", Tensor(x), Tensor(x),
                                   Tensor(alphas), np.zeros((1, 1, 1, 1))).data
        outs, rows = [], []
        for h in keep:
            q = x @ model.params["enc/0/attn/q"].data[:, h * hd:(h + 1) * hd]
            k = x @ model.params["enc/0/attn/k"].data[:, h * hd:(h + 1) * hd]
            v = x @ model.params["enc/0/attn/v"].data[:, h * hd:(h + 1) * hd]
            logits = q @ k.transpose(0, 2, 1) / math.sqrt(hd)
            e = np.exp(logits - logits.max(-1, keepdims=True))
            attn = e / e.sum(-1, keepdims=True)
            outs.append(attn @ v)
            rows.append(model.params["enc/0/attn/out"].data[h * hd:(h + 1) * hd])
        ref = np.concatenate(outs, -1) @ np.concatenate(rows, 0)
        if np.abs(out - ref).max() > tol:
            raise CheckFailure(f"head case {i}: deviation {np.abs(out - ref).max():.2e}")

    def block_case(i: int) -> None:
        blocks = int(rng.integers(2, 6))
        width = int(rng.integers(1, 4))
        d = 6
        cfg = ModelConfig(d=d, d_prime=blocks * width, heads=2, blocks=blocks,
                          enc_layers=1, dec_layers=1, vocab_size=8, max_len=8,
                          budgets=Budgets(1, 1, 1, 1), dropout_p=0.0, compact=True)
        model = SparseTransformer(cfg, seed=2000 + i, dtype=np.float64)
        y = rng.standard_normal((2, 3, d))
        keep = sorted(rng.choice(blocks, size=int(rng.integers(1, blocks + 1)),
                                 replace=False).tolist())
        betas = np.array([1.0 if k in keep else 0.0 for k in range(blocks)])
        with no_grad():
            out = model._ffn("enc/0/ffn", Tensor(y), Tensor(betas)).data
        w1 = model.params["enc/0/ffn/w1"].data
        b1 = model.params["enc/0/ffn/b1"].data
        w2 = model.params["enc/0/ffn/w2"].data
        b2 = model.params["enc/0/ffn/b2"].data
        cols = np.concatenate([w1[:, k * width:(k + 1) * width] for k in keep], 1)
        b1s = np.concatenate([b1[k * width:(k + 1) * width] for k in keep])
        rows = np.concatenate([w2[k * width:(k + 1) * width, :] for k in keep], 0)
        ref = np.maximum(y @ cols + b1s, 0.0) @ rows + b2
        if np.abs(out - ref).max() > tol:
            raise CheckFailure(f"block case {i}: deviation {np.abs(out - ref).max():.2e}")

    def extraction_case(i: int) -> None:
        cfg = ModelConfig(d=8, d_prime=16, heads=2, blocks=4,
                          enc_layers=2, dec_layers=2, vocab_size=12, max_len=10,
                          budgets=Budgets(1, 1, 1, 2), dropout_p=0.0)
        model = SparseTransformer(cfg, seed=3000 + i, dtype=np.float64)
        table = ScoreTable(["s", "t"], cfg.gating_spec(), dtype=np.float64,
                           init_rng=np.random.default_rng(4000 + i), init_scale=2.0)
        masks = SubNetworkMask.from_scores(table)
        src = rng.integers(3, cfg.vocab_size, size=(2, 5))
        tgt = rng.integers(3, cfg.vocab_size, size=(2, 4))
        with no_grad():
            hard = {}
            for site, lang in ((ENCODER, "s"), (DECODER, "t")):
                s = sample_scores(table, lang, site, training=False)
                hard[site] = apply_hard(s, masks.slice_map(lang, table.layout(site)))
            full = model.forward(src, tgt, hard).data
            sub = extract_subnetwork(model, masks, "s", "t", score_table=table)
            compact = sub.forward(src, tgt).data
        if np.abs(full - compact).max() > tol:
            raise CheckFailure(f"extraction case {i}: deviation {np.abs(full - compact).max():.2e}")

    out = []
    for name, fn in (("head-slice", head_case), ("block-slice", block_case),
                     ("extraction", extraction_case)):
        def run_all(fn=fn):
            for i in range(n_cases):
                fn(i)
        out.append(_result(f"{name}-x{n_cases}", run_all))
    return out


def elbo_suite(n_instances: int = 1000, seed: int = 0,
               slack: float = 1e-9) -> list[tuple[str, bool, str]]:
    """Randomized enumerable instances of the bound, zero violations allowed."""
    from .objectives import verify_elbo_bound

    def bulk():
        rng = np.random.default_rng(seed)
        for i in range(n_instances):
            n = int(rng.integers(1, 13))
            loglik = rng.normal(-2.0, 3.0, size=2 ** n)
            q = rng.random(n)
            report = verify_elbo_bound(loglik, q, slack=slack)
            if not report["holds"]:
                raise CheckFailure(f"instance {i} violates the bound: {report}")

    return [_result(f"elbo-random-x{n_instances}", bulk),
            _result("elbo-tiny-model", lambda: _model_elbo_check(seed))]


def _model_elbo_check(seed: int) -> None:
    from .gating import DECODER, ENCODER, Budgets, ScoreTable, SiteScores
    from .model import ModelConfig, SparseTransformer
    from .objectives import verify_elbo_bound
    from .tensor import cross_entropy

    cfg = ModelConfig(d=8, d_prime=16, heads=2, blocks=2, enc_layers=1, dec_layers=1,
                      vocab_size=9, max_len=6, budgets=Budgets(1, 1, 1, 1),
                      dropout_p=0.0, sparsity_kinds=("head", "layer"))
    model = SparseTransformer(cfg, seed=seed, dtype=np.float64)
    table = ScoreTable(["s", "t"], cfg.gating_spec(), dtype=np.float64,
                       init_rng=np.random.default_rng(seed), init_scale=1.0)
    rng = np.random.default_rng(seed + 1)
    src = rng.integers(3, cfg.vocab_size, size=(1, 3))
    tgt_in = rng.integers(3, cfg.vocab_size, size=(1, 3))
    tgt_out = rng.integers(3, cfg.vocab_size, size=(1, 3))
    enc_layout = table.layout(ENCODER)
    dec_layout = table.layout(DECODER)
    n_enc, n_dec = enc_layout.size, dec_layout.size

    def loglik(z: np.ndarray) -> float:
        scores = {ENCODER: SiteScores(enc_layout, Tensor(z[:n_enc])),
                  DECODER: SiteScores(dec_layout, Tensor(z[n_enc:]))}
        with no_grad():
            logits = model.forward(src, tgt_in, scores)
            nll = cross_entropy(logits, tgt_out, pad_id=0).item()
        return -nll * tgt_out.size

    from .gating import sample_scores
    q = np.concatenate([
        sample_scores(table, "s", ENCODER, training=False).values(),
        sample_scores(table, "t", DECODER, training=False).values()])
    report = verify_elbo_bound(loglik, q)
    if not report["holds"]:
        raise CheckFailure(f"tiny-model ELBO violated: {report}")


def budget_suite(n_seeds: int = 5, base_seed: int = 0, workdir=None) -> list[tuple[str, bool, str]]:
    """Short phase-2 runs must yield masks and extractions meeting budgets
    exactly, across seeds."""
    import tempfile
    from pathlib import Path

    from .corpus import Corpus, CorpusSpec, Direction, SyntheticLanguage, generate
    from .gating import Budgets
    from .model import ModelConfig, extract_subnetwork
    from .trainer import TrainConfig, run

    def one_seed(s: int, root: Path) -> None:
        spec = CorpusSpec(
            vocab_size=24, min_len=4, max_len=7, seed=s,
            languages=[SyntheticLanguage("p", "f1", "copy", 60),
                       SyntheticLanguage("q", "f2", "token_cipher", 60)],
            directions=[Direction("p", "q", train=40, valid=4, test=4),
                        Direction("q", "p", train=40, valid=4, test=4)])
        cdir = root / f"corpus{s}"
        generate(spec, cdir)
        cfg = ModelConfig(d=8, d_prime=16, heads=2, blocks=4, enc_layers=2,
                          dec_layers=2, vocab_size=24, max_len=12,
                          budgets=Budgets(1, 1, 1, 2), dropout_p=0.1)
        tcfg = TrainConfig(steps=16, phase1_steps=6, lr=0.01, warmup=4,
                           batch_tokens=48, seed=s)
        result = run(cfg, tcfg, Corpus(cdir), root / f"run{s}")
        result.masks.validate()
        b = cfg.budgets
        for pair in (("p", "q"), ("q", "p")):
            sub = extract_subnetwork(result.model, result.masks, *pair,
                                     score_table=result.table)
            if (sub.config.enc_layers, sub.config.dec_layers) != (b.enc_layers_active, b.dec_layers_active):
                raise CheckFailure(f"seed {s} pair {pair}: layer budget violated")
            if sub.config.heads != b.heads_active or sub.config.blocks != b.blocks_active:
                raise CheckFailure(f"seed {s} pair {pair}: head/block budget violated")

    def all_seeds():
        with tempfile.TemporaryDirectory(dir=workdir) as tmp:
            for s in range(base_seed, base_seed + n_seeds):
                one_seed(s, Path(tmp))

    return [_result(f"budgets-x{n_seeds}-seeds", all_seeds)]


def run_all(fast: bool = False) -> tuple[bool, list[tuple[str, bool, str]]]:
    """Every property suite; `fast` trims case counts for smoke checks."""
    results: list[tuple[str, bool, str]] = []
    results.extend(gradient_suite())
    results.extend(degeneracy_suite())
    results.extend(slice_equivalence_suite(n_cases=10 if fast else 100))
    results.extend(elbo_suite(n_instances=100 if fast else 1000))
    results.extend(budget_suite(n_seeds=2 if fast else 5))
    ok = all(passed for _name, passed, _detail in results)
    return ok, results
