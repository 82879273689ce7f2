"""Numeric self-checks of the attention kernel and losses, shared by ``occrefine kernel-check``."""

from __future__ import annotations

import numpy as np

from . import dualflow as df
from .losses import ce_loss, lovasz_loss, softmax, ssc_loss


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a| + |b|, tiny)``."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def lovasz_has_tie(probas: np.ndarray, gt: np.ndarray, h: float = 1e-5) -> bool:
    """True when a finite-difference step could reorder some class's sorted errors."""
    valid = gt != 255
    probas, gt = probas[valid], gt[valid]
    for c in range(probas.shape[1]):
        fg = gt == c
        if not fg.any():
            continue
        errors = np.sort(np.abs(fg - probas[:, c]))
        if len(errors) > 1 and np.min(np.diff(errors)) < 10 * h:
            return True
    return False


def random_loss_instance(rng, max_voxels: int = 10, max_classes: int = 5, masked: float = 0.2):
    n, c = int(rng.integers(2, max_voxels + 1)), int(rng.integers(2, max_classes + 1))
    logits = rng.normal(size=(n, c)) * 2
    gt = rng.integers(0, c, n)
    gt[rng.random(n) < masked] = 255
    if (gt == 255).all():
        gt[0] = 0
    return logits, gt


def run_checks(seed: int = 0, instances: int = 25, tol: float = 1e-4):
    """Yield ``(name, passed, detail)`` for each kernel invariant and gradient check."""
    rng = np.random.default_rng(seed)

    rows = softmax(rng.normal(size=(64, 9)) * 30).sum(axis=1)
    err = float(np.abs(rows - 1).max())
    yield "softmax rows sum to 1", err <= 1e-9, f"max deviation {err:.2e}"

    x = rng.normal(size=(2, 13, 13, 3))
    err = float(np.abs(df.soft_composite(df.soft_split(x), (13, 13)) - x).max())
    yield "soft split/composite round trip", err <= 1e-12, f"max deviation {err:.2e}"

    tokens = rng.normal(size=(2, 3, 3, 16))
    params = df.init_attention(rng, 16)
    params["qkv"] = (np.zeros((16, 48)), np.zeros(48))
    z = df.bev_attention(tokens, params, heads=4)
    err = float(np.abs(z - tokens - params["out"][1]).max())
    yield "zero QKV leaves the residual", err == 0.0, f"max deviation {err:.2e}"

    q = np.array([[1.0, 0.0]])
    k = np.array([[0.0, 0.0], [np.log(3.0), 0.0]])
    _, w = df.scaled_dot_product_attention(q * np.sqrt(2.0), k, np.eye(2))
    err = float(np.abs(w - [[0.25, 0.75]]).max())
    yield "two-token attention weights", err <= 1e-12, f"max deviation {err:.2e}"

    worst_ce = worst_lz = worst_total = 0.0
    skipped = 0
    for _ in range(instances):
        logits, gt = random_loss_instance(rng)
        worst_ce = max(worst_ce, relative_error(ce_loss(logits, gt)[1], numeric_grad(lambda z: ce_loss(z, gt)[0], logits)))
        p = softmax(logits)
        if lovasz_has_tie(p, gt):
            skipped += 1
            continue
        worst_lz = max(worst_lz, relative_error(lovasz_loss(p, gt)[1], numeric_grad(lambda z: lovasz_loss(z, gt)[0], p)))
        worst_total = max(worst_total, relative_error(ssc_loss(logits, gt)[1],
                                                      numeric_grad(lambda z: ssc_loss(z, gt)[0], logits)))
    yield "cross-entropy gradient", worst_ce <= tol, f"worst relative error {worst_ce:.2e}"
    yield "Lovasz gradient", worst_lz <= tol, f"worst relative error {worst_lz:.2e} ({skipped} tie instances skipped)"
    yield "total loss gradient", worst_total <= tol, f"worst relative error {worst_total:.2e}"
