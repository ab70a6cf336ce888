"""Loss pieces: classification NLL, supervised-contrastive augmentation loss,
rationale-size regularizer, and their weighted total.

The contrastive term operates on softmax probability vectors (bounded
similarities keep the exponentials tame). Log-sum-exp computations subtract a
detached per-row maximum, which leaves values and gradients exact while
preventing overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import (
    ConfigurationError,
    DegenerateBatchError,
    InputError,
    LabelError,
    NumericError,
)


@dataclass
class LossWeights:
    alpha_r: float = 1.0
    alpha_a: float = 0.5
    alpha_reg: float = 1.0
    gamma: float = 0.1
    tau: float = 0.5

    def validate(self) -> None:
        values = (self.alpha_r, self.alpha_a, self.alpha_reg, self.gamma, self.tau)
        if not all(np.isfinite(v) for v in values):
            raise ConfigurationError("loss weights must be finite")
        if min(self.alpha_r, self.alpha_a, self.alpha_reg) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if self.tau <= 0.0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")

    def to_dict(self) -> dict:
        return {
            "alpha_r": self.alpha_r,
            "alpha_a": self.alpha_a,
            "alpha_reg": self.alpha_reg,
            "gamma": self.gamma,
            "tau": self.tau,
        }


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax of a logit matrix (max-shifted for stability)."""
    row_max = logits.data.max(axis=1, keepdims=True)
    shifted = ad.add(logits, ad.constant(np.broadcast_to(-row_max, logits.shape).copy()))
    exps = ad.exp(shifted)
    inv_norm = ad.div(ad.constant(np.ones(logits.shape[0])), ad.sum_(exps, axis=1))
    return ad.scale_rows(exps, inv_norm)


def nll_batch(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the true classes under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    batch, n_classes = logits.shape
    if labels.shape != (batch,):
        raise InputError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelError(f"labels must lie in 0..{n_classes - 1}")
    row_max = logits.data.max(axis=1)
    shifted = ad.add(logits, ad.constant(np.broadcast_to(-row_max[:, None], logits.shape).copy()))
    lse = ad.add(ad.log(ad.sum_(ad.exp(shifted), axis=1)), ad.constant(row_max))
    one_hot = np.zeros(logits.shape)
    one_hot[np.arange(batch), labels] = 1.0
    picked = ad.sum_(ad.mul(logits, ad.constant(one_hot)), axis=1)
    return ad.mean_(ad.sub(lse, picked))


def rationale_loss(logits: Tensor, label: int) -> Tensor:
    """Cross-entropy of one graph's logits against its true class."""
    if logits.ndim != 1:
        raise InputError(f"expected a logit vector, got shape {logits.shape}")
    n_classes = logits.shape[0]
    if not 0 <= int(label) < n_classes:
        raise LabelError(f"label {label} outside 0..{n_classes - 1}")
    return nll_batch(ad.reshape(logits, (1, n_classes)), [int(label)])


def contrastive_loss(
    aug_logits: Tensor | Sequence[Tensor], aug_labels: Sequence[int], tau: float
) -> Tensor:
    """Supervised contrastive loss over augmented prediction vectors.

    Similarity is the dot product of softmax probability vectors scaled by
    1/tau. Each anchor averages -log(exp(s_ij) / sum_{k != i} exp(s_ik)) over
    its positives; anchors without a positive are skipped.
    """
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if not isinstance(aug_logits, Tensor):
        aug_logits = ad.stack_rows(list(aug_logits))
    labels = np.asarray(aug_labels, dtype=np.int64)
    count = aug_logits.shape[0]
    if count < 2:
        raise InputError(f"contrastive loss needs at least two items, got {count}")
    if labels.shape != (count,):
        raise InputError(f"labels shape {labels.shape} does not match batch {count}")

    probs = softmax_rows(aug_logits)
    sims = ad.scale(ad.matmul(probs, ad.transpose(probs)), 1.0 / tau)

    off_diag = 1.0 - np.eye(count)
    positives = (labels[:, None] == labels[None, :]).astype(float) * off_diag
    pos_counts = positives.sum(axis=1)
    valid = pos_counts > 0
    if not np.any(valid):
        raise DegenerateBatchError("no anchor has a same-label positive")

    masked = np.where(off_diag > 0, sims.data, -np.inf)
    row_max = masked.max(axis=1)
    shifted = ad.add(sims, ad.constant(np.broadcast_to(-row_max[:, None], sims.shape).copy()))
    denom = ad.sum_(ad.mul(ad.exp(shifted), ad.constant(off_diag)), axis=1)
    lse = ad.add(ad.log(denom), ad.constant(row_max))

    pos_mean = ad.mul(
        ad.sum_(ad.mul(sims, ad.constant(positives)), axis=1),
        ad.constant(1.0 / np.maximum(pos_counts, 1.0)),
    )
    per_anchor = ad.sub(lse, pos_mean)
    anchor_weights = valid.astype(float) / valid.sum()
    return ad.sum_(ad.mul(per_anchor, ad.constant(anchor_weights)))


def size_regularizer(mask: Tensor, gamma: float) -> Tensor:
    """| mean(mask) - gamma |, pulling the soft rationale towards a target size."""
    if mask.ndim != 1 or mask.shape[0] < 1:
        raise InputError(f"expected a non-empty mask vector, got shape {mask.shape}")
    return ad.abs_(ad.shift(ad.mean_(mask), -float(gamma)))


def total_loss(l_r: Tensor, l_a: Tensor, l_reg: Tensor, weights: LossWeights) -> Tensor:
    """alpha_r * L_r + alpha_a * L_a + alpha_reg * L_reg."""
    weights.validate()
    for name, component in (("rationale", l_r), ("augmentation", l_a), ("regularizer", l_reg)):
        if not np.all(np.isfinite(component.data)):
            raise NumericError(f"{name} loss is not finite")
    return ad.add(
        ad.add(ad.scale(l_r, weights.alpha_r), ad.scale(l_a, weights.alpha_a)),
        ad.scale(l_reg, weights.alpha_reg),
    )
