"""Cross-entropy and Lovász-softmax losses with analytic gradients."""

from __future__ import annotations

import numpy as np

from .errors import UndefinedLossError
from .voxel import INVALID


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _valid(gt: np.ndarray, ignore_index: int) -> np.ndarray:
    valid = gt != ignore_index
    if not valid.any():
        raise UndefinedLossError("every voxel is masked")
    return valid


def ce_loss(logits: np.ndarray, gt: np.ndarray, ignore_index: int = INVALID) -> tuple[float, np.ndarray]:
    """Mean voxel-wise cross-entropy over unmasked rows, and its gradient w.r.t. ``logits``.

    ``gt`` holds 0-based class columns of ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    gt = np.asarray(gt).astype(np.int64)
    valid = _valid(gt, ignore_index)
    n = int(valid.sum())
    rows = np.flatnonzero(valid)
    logp = log_softmax(logits[rows])
    loss = -logp[np.arange(n), gt[rows]].sum() / n
    grad = np.zeros_like(logits)
    g = np.exp(logp)
    g[np.arange(n), gt[rows]] -= 1.0
    grad[rows] = g / n
    return float(loss), grad


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss for errors sorted in descending order."""
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_loss(probas: np.ndarray, gt: np.ndarray, ignore_index: int = INVALID, classes: str = "present"):
    """Lovász-softmax over unmasked rows; returns ``(loss, d loss / d probas)``.

    ``classes="present"`` averages only over classes that occur in ``gt``;
    ``"all"`` averages over every column.
    """
    probas = np.asarray(probas, dtype=np.float64)
    gt = np.asarray(gt).astype(np.int64)
    valid = _valid(gt, ignore_index)
    rows = np.flatnonzero(valid)
    p, labels = probas[rows], gt[rows]
    grad = np.zeros_like(probas)
    losses = []
    terms = []
    for c in range(p.shape[1]):
        fg = (labels == c).astype(np.float64)
        if classes == "present" and fg.sum() == 0:
            continue
        errors = np.abs(fg - p[:, c])
        order = np.argsort(-errors, kind="stable")
        g = lovasz_grad(fg[order])
        losses.append(float(errors[order] @ g))
        sign = np.where(fg[order] > 0, -1.0, 1.0)
        terms.append((c, order, g * sign))
    if not losses:
        raise UndefinedLossError("no class present in the ground truth")
    k = len(losses)
    for c, order, gs in terms:
        grad[rows[order], c] += gs / k
    return float(np.mean(losses)), grad


def softmax_backward(probas: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return probas * (upstream - (upstream * probas).sum(axis=-1, keepdims=True))


def ssc_loss(logits: np.ndarray, gt: np.ndarray, ignore_index: int = INVALID):
    """Cross-entropy plus Lovász-softmax on the softmax of ``logits``; gradient w.r.t. ``logits``."""
    ce, g_ce = ce_loss(logits, gt, ignore_index)
    probas = softmax(np.asarray(logits, dtype=np.float64))
    lz, g_lz = lovasz_loss(probas, gt, ignore_index)
    return ce + lz, g_ce + softmax_backward(probas, g_lz)
