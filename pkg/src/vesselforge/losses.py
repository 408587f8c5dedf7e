"""Joint detection/segmentation objective.

Three differentiable terms: an alpha-balanced focal loss on the
subject-level logit, a generalized Dice loss with inverse-frequency
class weights, and voxel-mean cross entropy. The total blends them as
phi * L_F + (1 - phi) * (beta * L_GD + (1 - beta) * L_CE).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ConfigError
from .autodiff import (
    Tensor,
    add,
    clamp,
    div,
    log,
    mul,
    pow_const,
    sigmoid,
    softmax,
    sub,
    tmean,
    tsum,
)

GD_SMOOTH = 1e-5


@dataclass
class LossConfig:
    phi: float = 0.3
    beta: float = 0.5
    alpha: float = 0.25
    gamma: float = 2.0
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if not (0.0 <= self.phi <= 1.0):
            raise ConfigError(f"phi must be in [0, 1], got {self.phi}")
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if not (0.0 < self.prob_clamp < 0.5):
            raise ConfigError(f"prob_clamp must be in (0, 0.5), got "
                              f"{self.prob_clamp}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be nonnegative, got {self.gamma}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")


def make_onehot(labels: np.ndarray, n_classes: int = 2) -> np.ndarray:
    """[N, ...] integer labels -> [N, n_classes, ...] float one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes) + labels.shape[1:],
                   dtype=np.float64)
    for c in range(n_classes):
        out[:, c] = labels == c
    return out


def focal_loss(cls_logit: Tensor, target, alpha: float = 0.25,
               gamma: float = 2.0, prob_clamp: float = 1e-7) -> Tensor:
    """Mean alpha-balanced focal term over the batch.

    Per element, with p = sigmoid(logit): the correct-class probability
    is p for positives and 1-p for negatives, weighted by alpha or
    1-alpha respectively, then -w * (1-p_c)^gamma * log(p_c).
    """
    t = np.broadcast_to(np.asarray(target, dtype=np.float64),
                        cls_logit.shape).copy()
    p = sigmoid(cls_logit)
    p_c = add(mul(p, t), mul(sub(1.0, p), 1.0 - t))
    p_c = clamp(p_c, prob_clamp, 1.0 - prob_clamp)
    a_c = alpha * t + (1.0 - alpha) * (1.0 - t)
    terms = mul(mul(pow_const(sub(1.0, p_c), gamma), log(p_c)), -a_c)
    return tmean(terms)


def generalized_dice_loss(seg_logits: Tensor, target_onehot,
                          smooth: float = GD_SMOOTH) -> Tensor:
    """1 - 2 * (sum_c w_c sum_v p*g) / (sum_c w_c sum_v (p+g)).

    Class weights w_c = 1 / max(sum_v g_c, 1)^2 are computed over the
    whole batch, so rare classes count as much as common ones.
    """
    g = np.asarray(target_onehot, dtype=np.float64)
    if seg_logits.shape != g.shape:
        raise ValueError(f"target shape {g.shape} must match logits "
                         f"{seg_logits.shape}")
    n_classes = g.shape[1]
    counts = g.reshape(g.shape[0], n_classes, -1).sum(axis=(0, 2))
    w = 1.0 / np.maximum(counts, 1.0) ** 2

    w_map = w.reshape(1, n_classes, *([1] * (g.ndim - 2)))
    p = softmax(seg_logits, axis=1)
    inter = tsum(mul(p, w_map * g))
    union = tsum(mul(add(p, g), np.broadcast_to(w_map, g.shape).copy()))
    num = add(mul(inter, 2.0), smooth)
    den = add(union, smooth)
    return sub(1.0, div(num, den))


def cross_entropy_loss(seg_logits: Tensor, target_onehot,
                       prob_clamp: float = 1e-7) -> Tensor:
    """Voxel-mean of -sum_c g_c log p_c with clamped softmax probabilities."""
    g = np.asarray(target_onehot, dtype=np.float64)
    if seg_logits.shape != g.shape:
        raise ValueError(f"target shape {g.shape} must match logits "
                         f"{seg_logits.shape}")
    p = clamp(softmax(seg_logits, axis=1), prob_clamp, 1.0 - prob_clamp)
    per_voxel = mul(tsum(mul(log(p), g), axis=1), -1.0)
    return tmean(per_voxel)


def total_loss(cls_logit: Tensor, cls_target, seg_logits: Tensor,
               seg_target_onehot, cfg: LossConfig = None):
    """-> (total Tensor, {"L_F", "L_GD", "L_CE", "total"} floats)."""
    cfg = cfg or LossConfig()
    l_f = focal_loss(cls_logit, cls_target, cfg.alpha, cfg.gamma,
                     cfg.prob_clamp)
    l_gd = generalized_dice_loss(seg_logits, seg_target_onehot)
    l_ce = cross_entropy_loss(seg_logits, seg_target_onehot, cfg.prob_clamp)
    seg_mix = add(mul(l_gd, cfg.beta), mul(l_ce, 1.0 - cfg.beta))
    total = add(mul(l_f, cfg.phi), mul(seg_mix, 1.0 - cfg.phi))
    breakdown = {
        "L_F": float(l_f.data),
        "L_GD": float(l_gd.data),
        "L_CE": float(l_ce.data),
        "total": float(total.data),
    }
    return total, breakdown
