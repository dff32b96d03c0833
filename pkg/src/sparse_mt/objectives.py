"""Training objectives: translation loss plus the three auxiliary losses,
and an exact-enumeration check of the evidence lower bound.

The auxiliary losses act on selection scores and are differentiable through
the tape, so minimizing them moves the selection logits. Score inputs are
flat per-language tensors; languages must share a component order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, EnumerationError
from .tensor import Tensor, add, as_tensor, mul, scale, sub, tsum, xlogx

# auxiliary-loss weights used in the experiments
DEFAULT_C_S = 0.1
DEFAULT_C_D = 0.02
DEFAULT_C_T = 0.1

ENUMERATION_LIMIT = 12


@dataclass
class LossBreakdown:
    """Per-step scalar record of the phase objective and its parts."""

    phase: int
    l_cp: float
    l_s: float
    l_d: float
    l_t: float
    total: float
    c_s: float = DEFAULT_C_S
    c_d: float = DEFAULT_C_D
    c_t: float = DEFAULT_C_T

    def as_dict(self) -> dict:
        return {"phase": self.phase, "l_cp": self.l_cp, "l_s": self.l_s,
                "l_d": self.l_d, "l_t": self.l_t, "total": self.total}


def _check_scores(vec: Tensor) -> None:
    if np.any(vec.data < 0) or np.any(vec.data > 1):
        raise DomainError("scores must lie in [0, 1]")


def sparsity_loss(score_vectors: Sequence[Tensor], prior_p: float = 0.5) -> Tensor:
    """Sum of s * (log s - log prior) over all languages and components.

    Uses the convention 0 * log 0 = 0, so saturated scores contribute zero.
    """
    total: Tensor | None = None
    log_prior = math.log(prior_p)
    for vec in score_vectors:
        vec = as_tensor(vec)
        _check_scores(vec)
        if vec.data.size == 0:
            continue
        term = sub(tsum(xlogx(vec)), scale(tsum(vec), log_prior))
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(np.asarray(0.0))


def disparity_loss(score_vectors: Sequence[Tensor]) -> Tensor:
    """Pairwise score dot products over unordered language pairs.

    Large values mean languages contest the same components; minimizing
    pushes them toward different selections.
    """
    vecs = [as_tensor(v) for v in score_vectors]
    sizes = {v.data.shape for v in vecs}
    if len(sizes) > 1:
        raise ConfigurationError(f"ragged score vectors: {sorted(sizes)}")
    total: Tensor | None = None
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            term = tsum(mul(vecs[i], vecs[j]))
            total = term if total is None else add(total, term)
    return total if total is not None else Tensor(np.asarray(0.0))


def topk_loss(score_vectors: Sequence[Tensor], mask_vectors: Sequence[np.ndarray]) -> Tensor:
    """Squared distance between soft scores and their binary top-k masks."""
    if len(score_vectors) != len(mask_vectors):
        raise ConfigurationError("need one mask vector per score vector")
    total: Tensor | None = None
    for vec, mask in zip(score_vectors, mask_vectors):
        vec = as_tensor(vec)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != vec.data.shape:
            raise ConfigurationError(f"mask shape {mask.shape} != scores {vec.data.shape}")
        if not np.all((mask == 0) | (mask == 1)):
            raise DomainError("mask must be binary")
        if vec.data.size == 0:
            continue
        diff = sub(vec, as_tensor(mask.astype(vec.dtype)))
        term = tsum(mul(diff, diff))
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(np.asarray(0.0))


def phase_loss(phase: int, l_cp: Tensor,
               l_s: Tensor | None = None,
               l_d: Tensor | None = None,
               l_t: Tensor | None = None,
               c_s: float = DEFAULT_C_S,
               c_d: float = DEFAULT_C_D,
               c_t: float = DEFAULT_C_T) -> tuple[Tensor, LossBreakdown]:
    """Combine the phase objective; unused terms are reported as zero.

    Phase 1: total = L_cp + c_s * L_s (soft scores).
    Phase 2: total = L_cp + c_d * L_d (sparse scores) + c_t * L_t; the
    sparsity loss is not part of the phase-2 objective.
    """
    if phase == 1:
        total = l_cp if l_s is None else add(l_cp, scale(l_s, c_s))
        bd = LossBreakdown(phase=1, l_cp=l_cp.item(),
                           l_s=0.0 if l_s is None else l_s.item(),
                           l_d=0.0, l_t=0.0, total=total.item(),
                           c_s=c_s, c_d=c_d, c_t=c_t)
        return total, bd
    if phase == 2:
        total = l_cp
        if l_d is not None:
            total = add(total, scale(l_d, c_d))
        if l_t is not None:
            total = add(total, scale(l_t, c_t))
        bd = LossBreakdown(phase=2, l_cp=l_cp.item(), l_s=0.0,
                           l_d=0.0 if l_d is None else l_d.item(),
                           l_t=0.0 if l_t is None else l_t.item(),
                           total=total.item(), c_s=c_s, c_d=c_d, c_t=c_t)
        return total, bd
    raise ConfigurationError(f"phase must be 1 or 2, got {phase}")


# ---------------------------------------------------------------------------
# evidence lower bound, checked by exhaustive enumeration


def bernoulli_kl(q: np.ndarray, prior_p: float) -> float:
    """KL between independent Bernoulli(q_i) and Bernoulli(prior_p)^N."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q < 0) or np.any(q > 1):
        raise DomainError("q must lie in [0, 1]")
    total = 0.0
    for qi in q:
        if qi > 0:
            total += qi * (math.log(qi) - math.log(prior_p))
        if qi < 1:
            total += (1 - qi) * (math.log(1 - qi) - math.log(1 - prior_p))
    return total


def enumerate_assignments(n: int) -> list[np.ndarray]:
    if n > ENUMERATION_LIMIT:
        raise EnumerationError(
            f"refusing to enumerate 2^{n} assignments (limit N <= {ENUMERATION_LIMIT})")
    return [np.array(bits, dtype=np.float64) for bits in product((0.0, 1.0), repeat=n)]


def verify_elbo_bound(log_likelihood: Callable[[np.ndarray], float] | Mapping | Sequence[float],
                      q: np.ndarray, prior_p: float = 0.5,
                      slack: float = 1e-9) -> dict:
    """Check ELBO <= exact log marginal by enumerating all selections z.

    ``log_likelihood`` maps a binary assignment z (length-N array) to
    log p(y|x,z); a sequence of 2^N values in assignment-enumeration order
    is also accepted. ``q`` holds the N posterior selection probabilities.
    Both sides are exact expectations, not Monte-Carlo estimates.
    """
    q = np.asarray(q, dtype=np.float64)
    n = q.size
    assignments = enumerate_assignments(n)
    if callable(log_likelihood):
        loglik = np.array([float(log_likelihood(z)) for z in assignments])
    else:
        loglik = np.asarray(log_likelihood, dtype=np.float64)
        if loglik.shape != (2 ** n,):
            raise ConfigurationError(
                f"need 2^{n} log-likelihood values, got shape {loglik.shape}")

    # exact expectation of log p under q
    log_q_probs = np.array([
        float(np.sum(np.where(z == 1, _safe_log(q), _safe_log(1 - q))))
        for z in assignments
    ])
    q_probs = np.exp(log_q_probs)
    expected_loglik = float(np.sum(q_probs * loglik))
    kl = bernoulli_kl(q, prior_p)
    elbo = expected_loglik - kl

    log_prior = np.array([
        float(np.sum(z)) * math.log(prior_p) + float(n - np.sum(z)) * math.log(1 - prior_p)
        for z in assignments
    ])
    joint = loglik + log_prior
    m = joint.max()
    exact_log_marginal = float(m + np.log(np.exp(joint - m).sum()))

    return {
        "elbo": elbo,
        "exact_log_marginal": exact_log_marginal,
        "gap": exact_log_marginal - elbo,
        "kl": kl,
        "holds": elbo <= exact_log_marginal + slack,
        "n_components": n,
    }


def _safe_log(x: np.ndarray) -> np.ndarray:
    out = np.full_like(x, -np.inf)
    pos = x > 0
    out[pos] = np.log(x[pos])
    # q_i = 0 entries never contribute: exp picks up the -inf as probability 0
    return out
