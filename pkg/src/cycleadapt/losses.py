"""Loss terms and stage objectives.

Reduction convention: every loss is a sum over its batch divided by the
batch size, so values are comparable across batch sizes; the adversarial
domain term averages its source and target groups separately. Worked
values in the tests assume this convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, cosine_sim  # noqa: F401  (cosine_sim re-exported)


@dataclass
class LossValue:
    total: Tensor
    per_sample: np.ndarray | None = None
    parts: dict = field(default_factory=dict)

    @property
    def scalar(self) -> float:
        return self.total.item()


def ce_loss(class_probs: Tensor, labels) -> LossValue:
    """Mean negative log probability of the given labels.

    Expects probabilities (rows summing to 1), not logits; the log is
    clamped by the autodiff op so certain-but-wrong rows stay finite.
    """
    labels = np.asarray(labels, dtype=np.int64)
    picked = ad.take_rows(class_probs, labels)
    per_sample = -np.log(np.maximum(picked.data, ad.LOG_FLOOR))
    total = ad.neg(ad.mean(ad.log(picked)))
    return LossValue(total, per_sample, {"ce": total.item()})


def add_loss(source_domain_probs: Tensor, target_domain_probs: Tensor) -> LossValue:
    """Adversarial domain-discrimination value.

    mean log D over source plus mean log (1 - D) over target; always <= 0,
    approaching 0 only when D is confidently 1 on source and 0 on target.
    The adversarial direction comes from the gradient-reversal node on the
    feature path feeding D, never from this value.
    """
    src_term = ad.mean(ad.log(source_domain_probs))
    tgt_term = ad.mean(ad.log(1.0 - target_domain_probs))
    total = src_term + tgt_term
    return LossValue(total, None, {
        "add": total.item(),
        "add_src": src_term.item(),
        "add_tgt": tgt_term.item(),
    })


def contrastive_loss(anchors: Tensor, positives: Tensor, negatives: Tensor,
                     tau: float) -> LossValue:
    """Mean triplet contrastive value -log[h(a,p)/(h(a,p)+h(a,n))].

    h(u, v) = exp(cos(u, v) / tau). Empty triplet sets contribute exactly
    zero (constant, no gradient). Zero-norm features raise.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    n = anchors.data.shape[0] if anchors.data.ndim == 2 else 0
    if n == 0:
        return LossValue(Tensor(0.0), np.zeros(0), {"contrastive": 0.0, "n_triplets": 0})
    s_pos = cosine_sim(anchors, positives)
    s_neg = cosine_sim(anchors, negatives)
    z = (s_neg - s_pos) * (1.0 / tau)
    per_triplet = ad.log(1.0 + ad.exp(z))
    total = ad.mean(per_triplet)
    return LossValue(total, per_triplet.data.copy(), {
        "contrastive": total.item(),
        "n_triplets": n,
    })


def beta_schedule(progress: float) -> float:
    """Adversarial weight ramp 2/(1+exp(-10*progress)) - 1 on [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0,1], got {progress}")
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


def stage1_objective(ce: LossValue, add: LossValue, beta: float) -> LossValue:
    """Total = ce + beta * domain_bce, where domain_bce = -add.

    Minimizing the domain binary cross-entropy trains the discriminator
    head toward (source -> 1, target -> 0), and the gradient-reversal node
    inside the graph that produced the domain probabilities flips the sign
    for the encoder, making it the adversary. Descending the raw alignment
    score instead would leave the discriminator gradient-dead precisely in
    its confidently-wrong states (log is flat there), and the game then
    freezes at the encoder's preferred corner; the cross-entropy form keeps
    the restoring gradient alive.
    """
    domain_bce = -add.total
    total = ce.total + beta * domain_bce
    parts = dict(ce.parts)
    parts.update(add.parts)
    parts.update({"domain_bce": domain_bce.item(), "beta": beta,
                  "total": total.item()})
    return LossValue(total, None, parts)


def stage3_objective(ce_source: LossValue, contrastive: LossValue) -> LossValue:
    """Equal-weight sum of source classification and contrastive terms."""
    total = ce_source.total + contrastive.total
    parts = dict(ce_source.parts)
    parts.update(contrastive.parts)
    parts["total"] = total.item()
    return LossValue(total, None, parts)
