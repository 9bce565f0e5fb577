"""Per-batch imbalance-weighted binary cross-entropy and the masked pooled loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_CLAMP = 1e-7


@dataclass
class BatchWeightTable:
    P: np.ndarray  # present counts per label (mask=1, label=1)
    N: np.ndarray  # absent counts per label (mask=1, label=0)
    w_pos: np.ndarray
    w_neg: np.ndarray
    active: np.ndarray


@dataclass
class LossValue:
    total: float
    per_label: np.ndarray  # batch mean of each label's masked term; total is their mean over C


def batch_weights(labels: np.ndarray, masks: np.ndarray) -> BatchWeightTable:
    """Count supervised positives/negatives per label and derive w_P, w_N.

    Labels whose batch has no positives or no negatives are inactive and get
    zero weights.
    """
    labels = np.asarray(labels)
    masks = np.asarray(masks)
    if labels.shape != masks.shape or labels.ndim != 2 or labels.shape[0] == 0:
        raise ValueError(f"labels {labels.shape} and masks {masks.shape} must be equal, nonempty 2-D")
    sup = masks != 0
    P = np.sum(sup & (labels != 0), axis=0).astype(np.int64)
    N = np.sum(sup & (labels == 0), axis=0).astype(np.int64)
    active = (P > 0) & (N > 0)
    tot = (P + N).astype(np.float64)
    w_pos = np.zeros(labels.shape[1])
    w_neg = np.zeros(labels.shape[1])
    w_pos[active] = tot[active] / P[active]
    w_neg[active] = tot[active] / N[active]
    return BatchWeightTable(P, N, w_pos, w_neg, active)


def unit_weights(labels: np.ndarray, masks: np.ndarray) -> BatchWeightTable:
    """Plain BCE: every label active with w_P = w_N = 1."""
    table = batch_weights(labels, masks)
    C = table.P.shape[0]
    return BatchWeightTable(table.P, table.N, np.ones(C), np.ones(C), np.ones(C, dtype=bool))


def weighted_bce(p, l, w_pos, w_neg):
    p = np.clip(p, EPS_CLAMP, 1.0 - EPS_CLAMP)
    return -(w_pos * l * np.log(p) + w_neg * (1 - l) * np.log1p(-p))


def _check(preds, labels, masks, weights):
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 2 or preds.shape != np.shape(labels) or preds.shape != np.shape(masks):
        raise ValueError(
            f"shape mismatch: preds {preds.shape}, labels {np.shape(labels)}, masks {np.shape(masks)}"
        )
    if weights.w_pos.shape[0] != preds.shape[1]:
        raise ValueError(f"weight table has {weights.w_pos.shape[0]} labels, preds {preds.shape[1]}")
    return preds


def pooled_loss(preds, labels, masks, weights: BatchWeightTable) -> LossValue:
    preds = _check(preds, labels, masks, weights)
    B, C = preds.shape
    keep = (np.asarray(masks) != 0) & weights.active[None, :]
    terms = np.where(keep, weighted_bce(preds, np.asarray(labels), weights.w_pos, weights.w_neg), 0.0)
    per_label = terms.sum(axis=0) / B
    return LossValue(float(per_label.sum() / C), per_label)


def pooled_loss_grad(preds, labels, masks, weights: BatchWeightTable) -> np.ndarray:
    """d(total)/d(preds). Exactly zero where mask=0 or the label is inactive.

    Inside the clamp the derivative is the analytic one; outside it is 0,
    matching the clamped forward.
    """
    preds = _check(preds, labels, masks, weights)
    B, C = preds.shape
    labels = np.asarray(labels)
    keep = (np.asarray(masks) != 0) & weights.active[None, :]
    inside = (preds > EPS_CLAMP) & (preds < 1.0 - EPS_CLAMP)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = -weights.w_pos * labels / preds + weights.w_neg * (1 - labels) / (1.0 - preds)
    return np.where(keep & inside, g / (C * B), 0.0)


def pooled_loss_grad_logits(preds, labels, masks, weights: BatchWeightTable) -> np.ndarray:
    """d(total)/d(logits) for sigmoid outputs, without dividing by p(1-p).

    Equal to ``pooled_loss_grad * p * (1 - p)`` inside the clamp range. The
    clamp is ignored here so saturated wrong predictions still get a gradient
    during training.
    """
    preds = _check(preds, labels, masks, weights)
    B, C = preds.shape
    labels = np.asarray(labels)
    keep = (np.asarray(masks) != 0) & weights.active[None, :]
    g = -weights.w_pos * labels * (1.0 - preds) + weights.w_neg * (1 - labels) * preds
    return np.where(keep, g / (C * B), 0.0)
