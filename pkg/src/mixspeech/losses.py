"""Training objectives: sequence cross-entropy, per-step Jensen-Shannon regularizer, and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import PAD
from .mixing import STOCHASTIC_TOL


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    @property
    def uses_mixed_branch(self) -> bool:
        return self.lambda1 > 0 or self.lambda2 > 0


def _as_batch(probs: ad.Tensor) -> ad.Tensor:
    return probs if probs.data.ndim == 3 else ad.reshape(probs, (1, *probs.shape))


def cross_entropy(probs: ad.Tensor, tgt_tokens) -> ad.Tensor:
    """Summed negative log-likelihood of the gold next tokens.

    ``probs`` is ``(S, V)`` or ``(B, S, V)``; ``tgt_tokens`` is the BOS-prefixed
    target of length ``S + 1`` (or ``(B, S + 1)``). PAD labels are skipped.
    """
    probs = _as_batch(ad.as_tensor(probs))
    tgt = np.atleast_2d(np.asarray(tgt_tokens, dtype=np.int64))
    labels = tgt[:, 1:]
    b, s, v = probs.shape
    if labels.shape != (b, s):
        raise ValueError(f"cross_entropy: labels {labels.shape} do not match probs {probs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= v):
        raise ValueError(f"cross_entropy: token id outside [0, {v})")
    onehot = np.zeros((b, s, v))
    valid = labels != PAD
    bi, si = np.nonzero(valid)
    onehot[bi, si, labels[bi, si]] = 1.0
    return ad.scale(ad.sum_all(ad.mul(ad.log(probs), onehot)), -1.0)


def jsd_loss(p_mix: ad.Tensor, p_uni: ad.Tensor, mask=None) -> ad.Tensor:
    """Sum over steps of JSD(P_t || Q_t) in nats; gradients reach both inputs.

    ``mask`` (shape of the leading axes) removes padded steps from the sum.
    """
    p, q = ad.as_tensor(p_mix), ad.as_tensor(p_uni)
    if p.shape != q.shape:
        raise ad.ShapeError("jsd_loss", p.shape, q.shape)
    for t in (p, q):
        if np.any(np.abs(t.data.sum(axis=-1) - 1.0) > STOCHASTIC_TOL) or np.any(t.data < 0):
            raise ValueError("jsd_loss: rows are not row-stochastic")
    m = ad.scale(ad.add(p, q), 0.5)
    log_m = ad.log(m)
    kl_p = ad.mul(p, ad.sub(ad.log(p), log_m))
    kl_q = ad.mul(q, ad.sub(ad.log(q), log_m))
    per_elem = ad.scale(ad.add(kl_p, kl_q), 0.5)
    if mask is not None:
        per_elem = ad.mul(per_elem, np.asarray(mask, dtype=np.float64)[..., None])
    return ad.sum_all(per_elem)


def total_loss(ce_uni: ad.Tensor, ce_mix: ad.Tensor | None, jsd: ad.Tensor | None,
               weights: LossWeights) -> ad.Tensor:
    """ce_uni + lambda1 * ce_mix + lambda2 * jsd; zero-weight terms are left off the graph."""
    total = ce_uni
    if (weights.lambda1 > 0 and ce_mix is None) or (weights.lambda2 > 0 and jsd is None):
        raise ValueError("total_loss: a term with positive weight is missing")
    if weights.lambda1 > 0:
        total = ad.add(total, ad.scale(ce_mix, weights.lambda1))
    if weights.lambda2 > 0:
        total = ad.add(total, ad.scale(jsd, weights.lambda2))
    return total
