"""Training losses: scalar value plus gradient w.r.t. the prediction."""
from __future__ import annotations

import numpy as np

CLIP_EPS = 1e-7

LOSS_KINDS = ("categorical_crossentropy", "binary_crossentropy", "mse")


def loss_and_grad(kind: str, pred: np.ndarray, target: np.ndarray):
    """Return (loss, dloss/dpred) for one batch.

    Categorical crossentropy sums over the class axis and averages over
    the remaining (batch) rows; binary crossentropy and MSE average over
    every element. Crossentropy predictions are clipped away from 0/1, and
    the gradient is zero where the clip is active.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    if np.isnan(pred).any() or np.isnan(target).any():
        raise ValueError("NaN in loss inputs")

    if kind == "mse":
        n = pred.size
        diff = pred - target
        return float((diff * diff).mean()), (2.0 / n) * diff

    if kind == "binary_crossentropy":
        n = pred.size
        p = np.clip(pred, CLIP_EPS, 1.0 - CLIP_EPS)
        loss = -(target * np.log(p) + (1.0 - target) * np.log1p(-p)).mean()
        grad = (-(target / p) + (1.0 - target) / (1.0 - p)) / n
        inside = (pred > CLIP_EPS) & (pred < 1.0 - CLIP_EPS)
        return float(loss), np.where(inside, grad, 0.0)

    if kind == "categorical_crossentropy":
        rows = int(np.prod(pred.shape[:-1]))
        p = np.clip(pred, CLIP_EPS, 1.0)
        loss = -(target * np.log(p)).sum() / rows
        grad = -(target / p) / rows
        return float(loss), np.where(pred > CLIP_EPS, grad, 0.0)

    raise ValueError(f"unknown loss kind {kind!r}")
