"""Training objectives: cross-entropy, the adaptive-radius feature-norm loss,
KL mimicry between two networks, and their per-regime totals.

The feature-norm loss is the heart of the toolkit. Each sample's target
radius is its own current norm, gradient-blocked, plus a fixed step delta_r.
The forward value is therefore the constant gamma * delta_r**2, but the
gradient pushes every feature row radially outward, which is the whole point:
the norm of each sample grows a little every step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError


@dataclass(frozen=True)
class NormLossConfig:
    gamma: float = 0.05
    delta_r: float = 1.0

    def __post_init__(self):
        if self.gamma < 0.0 or self.delta_r < 0.0:
            raise ContractError(f"gamma and delta_r must be nonnegative, got {self}")


@dataclass
class LossTerms:
    class_loss: ad.Tensor
    domain_loss: ad.Tensor
    mimicry_loss: ad.Tensor
    total: ad.Tensor

    def as_values(self) -> "LossValues":
        return LossValues(
            class_loss=self.class_loss.item(),
            domain_loss=self.domain_loss.item(),
            mimicry_loss=self.mimicry_loss.item(),
            total=self.total.item(),
        )


@dataclass(frozen=True)
class LossValues:
    """Plain-float snapshot of LossTerms, used for per-step histories."""

    class_loss: float
    domain_loss: float
    mimicry_loss: float
    total: float


def cross_entropy(logits: ad.Tensor, labels) -> ad.Tensor:
    """Mean over the batch of -log p_y, with p from the stable row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if n < 1:
        raise ContractError("cross_entropy needs at least one sample")
    for i, label in enumerate(labels):
        if not 0 <= label < num_classes:
            raise ContractError(f"label {label} at index {i} outside [0, {num_classes})")

    one_hot = np.zeros((n, num_classes))
    one_hot[np.arange(n), labels] = 1.0
    probs = ad.softmax_rows(logits)
    picked = ad.row_sum(ad.multiply(probs, ad.constant(one_hot)))
    return ad.scale(ad.mean_all(ad.log(picked)), -1.0)


def adaptive_radius(features: ad.Tensor, delta_r: float) -> ad.Tensor:
    """Per-row target norm: gradient-blocked current norm plus delta_r."""
    norms = ad.detach(ad.row_l2_norm(features))
    step = ad.constant(np.full((features.rows, 1), float(delta_r)))
    return ad.add(norms, step)


def feature_norm_loss(features: ad.Tensor, cfg: NormLossConfig) -> ad.Tensor:
    """gamma * mean over rows of (||row|| - radius)^2 with the detached radius.

    Forward value is exactly gamma * delta_r**2; the gradient w.r.t. features
    is -(2*gamma*delta_r/n) * row/||row|| per row.
    """
    norms = ad.row_l2_norm(features)
    radius = adaptive_radius(features, cfg.delta_r)
    deviation = ad.subtract(norms, radius)
    return ad.scale(ad.mean_all(ad.square(deviation)), cfg.gamma)


def kl_mimicry(p_self: ad.Tensor, p_peer: ad.Tensor) -> ad.Tensor:
    """Mean over the batch of KL(peer || self); the peer side is detached.

    Gradient flows only into p_self: this is the loss one network minimizes
    to pull its predicted distribution toward its peer's.
    """
    if p_self.shape != p_peer.shape:
        raise ContractError(f"probability shapes disagree: {p_self.shape} vs {p_peer.shape}")
    peer = ad.detach(p_peer)
    log_ratio = ad.subtract(ad.log(peer), ad.log(p_self))
    per_sample = ad.row_sum(ad.multiply(peer, log_ratio))
    return ad.mean_all(per_sample)


def fnn_total(logits: ad.Tensor, labels, features: ad.Tensor, cfg: NormLossConfig) -> LossTerms:
    """Classification plus feature-norm objective; no mimicry term."""
    class_loss = cross_entropy(logits, labels)
    domain_loss = feature_norm_loss(features, cfg)
    return LossTerms(
        class_loss=class_loss,
        domain_loss=domain_loss,
        mimicry_loss=ad.constant([[0.0]]),
        total=ad.add(class_loss, domain_loss),
    )


def cfnn_total(
    logits_self: ad.Tensor,
    labels,
    features_self: ad.Tensor,
    p_peer: ad.Tensor,
    cfg: NormLossConfig,
) -> LossTerms:
    """One collaborating network's objective: classification + feature norm + mimicry."""
    class_loss = cross_entropy(logits_self, labels)
    domain_loss = feature_norm_loss(features_self, cfg)
    mimicry_loss = kl_mimicry(ad.softmax_rows(logits_self), p_peer)
    return LossTerms(
        class_loss=class_loss,
        domain_loss=domain_loss,
        mimicry_loss=mimicry_loss,
        total=ad.add(ad.add(class_loss, domain_loss), mimicry_loss),
    )
