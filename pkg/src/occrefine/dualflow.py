"""Forward numerics of the dual-branch (BEV + pillar) spatio-temporal attention block.

Everything is plain numpy at desk scale: the BEV encoder, overlapping
soft split / composite, dense multi-head attention over all tokens,
attention along height pillars and the projected two-branch sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .losses import softmax

BEV_CHANNELS = 80


@dataclass(frozen=True)
class KernelConfig:
    patch: tuple = (7, 7)
    stride: tuple = (3, 3)
    local_frames: int = 4
    reference_frames: int = 2
    reference_radius: int = 10
    embed_dim: int = 256
    heads: int = 8
    height_slots: int = 32
    n_blocks: int = 2

    def __post_init__(self):
        _check_patch(self.patch, self.stride)
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.embed_dim % self.height_slots:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible into {self.height_slots} height slots")
        if min(self.local_frames, self.n_blocks) < 1 or self.reference_frames < 0:
            raise ValueError("frame and block counts must be positive")


def sample_reference_frames(t: int, num_frames: int, rng=None, radius: int = 10, count: int = 2) -> np.ndarray:
    """Draw ``count`` distinct frame indices uniformly from ``[t - radius, t + radius]`` clipped to the sequence."""
    rng = np.random.default_rng(rng)
    lo, hi = max(0, t - radius), min(num_frames - 1, t + radius)
    pool = np.arange(lo, hi + 1)
    return np.sort(rng.choice(pool, size=min(count, len(pool)), replace=False))


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def init_linear(rng, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def layer_norm(x: np.ndarray, gamma=None, beta=None, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' 3x3 convolution; x (B, h, w, cin), w (3, 3, cin, cout)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, h, w, cin, 3, 3)
    return np.einsum("bhwcij,ijco->bhwo", win, w, optimize=True) + b


def max_pool2(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    return x.reshape(b, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))


def init_bev_encoder(rng, c_in: int, width: int = BEV_CHANNELS, blocks: int = 4) -> dict:
    params = {"embed": init_linear(rng, c_in, width), "ln": (np.ones(width), np.zeros(width)), "convs": []}
    for _ in range(blocks):
        pair = []
        for _ in range(2):
            bound = 1.0 / np.sqrt(9 * width)
            pair.append((rng.uniform(-bound, bound, size=(3, 3, width, width)), np.zeros(width)))
        params["convs"].append(pair)
    return params


def bev_encode(volume: np.ndarray, params: dict) -> np.ndarray:
    """(B, nx, ny, nz * c_in) or (nx, ny, nz * c_in) -> (B, nx / 16, ny / 16, 80).

    Linear embedding and layer norm per BEV cell, then four blocks of two
    3x3 conv + ReLU followed by 2x max pooling.
    """
    x = np.asarray(volume, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    blocks = len(params["convs"])
    if x.shape[1] % 2**blocks or x.shape[2] % 2**blocks:
        raise ValueError(f"spatial dims {x.shape[1:3]} must be divisible by {2 ** blocks}")
    w, b = params["embed"]
    x = layer_norm(x @ w + b, *params["ln"])
    for pair in params["convs"]:
        for cw, cb in pair:
            x = np.maximum(conv3x3(x, cw, cb), 0.0)
        x = max_pool2(x)
    _check_finite(x, "BEV encoder")
    return x[0] if squeeze else x


def token_grid(h: int, w: int, patch, stride) -> tuple[int, int]:
    (ph, pw), (sh, sw) = patch, stride
    if h < ph or w < pw:
        raise ValueError(f"feature map {h}x{w} smaller than patch {ph}x{pw}")
    return (h - ph) // sh + 1, (w - pw) // sw + 1


def _check_patch(patch, stride):
    if stride[0] > patch[0] or stride[1] > patch[1] or min(stride) < 1:
        raise ValueError(f"stride {stride} must lie in 1..patch {patch}")


def soft_split(features: np.ndarray, patch=(7, 7), stride=(3, 3), proj=None, coords: np.ndarray | None = None):
    """Overlapping patch tokens of ``features + coords``.

    (T, h, w, c) -> (T, gh, gw, D) where D is ``ph * pw * c`` without a
    projection, or the projection's output width.
    """
    _check_patch(patch, stride)
    x = np.asarray(features, dtype=np.float64)
    if coords is not None:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != x.shape:
            raise ValueError(f"coordinate shape {coords.shape} does not match features {x.shape}")
        x = x + coords
    if x.ndim != 4:
        raise ValueError(f"expected (T, h, w, c) features, got shape {x.shape}")
    t, h, w, c = x.shape
    gh, gw = token_grid(h, w, patch, stride)
    win = sliding_window_view(x, patch, axis=(1, 2))[:, :: stride[0], :: stride[1]]
    win = win[:, :gh, :gw]  # (T, gh, gw, c, ph, pw)
    tokens = win.transpose(0, 1, 2, 4, 5, 3).reshape(t, gh, gw, patch[0] * patch[1] * c)
    if proj is not None:
        wp, bp = proj
        tokens = tokens @ wp + bp
    return tokens


def coverage_counts(h: int, w: int, patch=(7, 7), stride=(3, 3)) -> np.ndarray:
    gh, gw = token_grid(h, w, patch, stride)
    cov = np.zeros((h, w), dtype=np.int64)
    for i in range(gh):
        for j in range(gw):
            cov[i * stride[0]: i * stride[0] + patch[0], j * stride[1]: j * stride[1] + patch[1]] += 1
    return cov


def soft_composite(tokens: np.ndarray, out_hw, patch=(7, 7), stride=(3, 3), channels: int | None = None, proj=None):
    """Overlap-add tokens back onto an (h, w) map and divide by per-pixel coverage."""
    _check_patch(patch, stride)
    tokens = np.asarray(tokens, dtype=np.float64)
    if proj is not None:
        wp, bp = proj
        tokens = tokens @ wp + bp
    t, gh, gw, d = tokens.shape
    h, w = out_hw
    if token_grid(h, w, patch, stride) != (gh, gw):
        raise ValueError(f"{gh}x{gw} tokens do not tile a {h}x{w} map with patch {patch}, stride {stride}")
    ph, pw = patch
    c = channels if channels is not None else d // (ph * pw)
    if c * ph * pw != d:
        raise ValueError(f"token width {d} is not patch area {ph * pw} times a channel count")
    cov = coverage_counts(h, w, patch, stride)
    if np.any(cov == 0):
        raise ValueError("patch geometry leaves pixels uncovered")
    patches = tokens.reshape(t, gh, gw, ph, pw, c)
    out = np.zeros((t, h, w, c))
    for i in range(gh):
        for j in range(gw):
            out[:, i * stride[0]: i * stride[0] + ph, j * stride[1]: j * stride[1] + pw] += patches[:, i, j]
    return out / cov[None, :, :, None]


def scaled_dot_product_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes; returns output and weights."""
    d = q.shape[-1]
    weights = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(d))
    return weights @ v, weights


def init_attention(rng, dim: int) -> dict:
    return {"ln": (np.ones(dim), np.zeros(dim)), "qkv": init_linear(rng, dim, 3 * dim), "out": init_linear(rng, dim, dim)}


def bev_attention(tokens: np.ndarray, params: dict, heads: int, return_weights: bool = False):
    """Layer norm, joint QKV projection, dense multi-head attention over every token, residual add.

    ``tokens`` has shape (..., c_e); all leading axes are flattened into one
    token sequence (frames and patch grid together).
    """
    P = np.asarray(tokens, dtype=np.float64)
    shape = P.shape
    dim = shape[-1]
    if dim % heads:
        raise ValueError(f"embedding width {dim} not divisible by {heads} heads")
    x = P.reshape(-1, dim)
    n, hd = len(x), dim // heads
    w, b = params["qkv"]
    qkv = layer_norm(x, *params["ln"]) @ w + b
    q, k, v = (qkv[:, i * dim:(i + 1) * dim].reshape(n, heads, hd).transpose(1, 0, 2) for i in range(3))
    out, weights = scaled_dot_product_attention(q, k, v)
    out = out.transpose(1, 0, 2).reshape(n, dim)
    wo, bo = params["out"]
    z = _check_finite(out @ wo + bo + x, "BEV attention").reshape(shape)
    return (z, weights) if return_weights else z


def init_pillar(rng, slot_dim: int) -> dict:
    return {"q": init_linear(rng, slot_dim, slot_dim), "k": init_linear(rng, slot_dim, slot_dim),
            "v": init_linear(rng, slot_dim, slot_dim)}


def pillar_attention(tokens: np.ndarray, height_slots: int, params: dict | None = None, return_weights: bool = False):
    """Attention along each pillar: at every BEV location the tokens are ``height_slots x T`` slots.

    ``tokens`` is (T, gh, gw, c_e); each c_e vector is read as
    ``height_slots`` slots of width ``c_e / height_slots``. Without
    ``params`` the slots serve directly as queries, keys and values.
    """
    P = np.asarray(tokens, dtype=np.float64)
    t, gh, gw, dim = P.shape
    if dim % height_slots:
        raise ValueError(f"embedding width {dim} not divisible into {height_slots} height slots")
    d = dim // height_slots
    # (gh, gw, Wz * T, d) with height-major slot order
    x = P.reshape(t, gh, gw, height_slots, d).transpose(1, 2, 3, 0, 4).reshape(gh, gw, height_slots * t, d)
    if params is None:
        q = k = v = x
    else:
        q, k, v = (x @ params[n][0] + params[n][1] for n in ("q", "k", "v"))
    out, weights = scaled_dot_product_attention(q, k, v)
    z = out.reshape(gh, gw, height_slots, t, d).transpose(3, 0, 1, 2, 4).reshape(t, gh, gw, dim)
    _check_finite(z, "pillar attention")
    return (z, weights) if return_weights else z


def dualflow_fuse(z_pillar: np.ndarray, z_bev: np.ndarray, proj_pillar, proj_bev) -> np.ndarray:
    """Sum of the two branch outputs after their own linear projections."""
    z_pillar, z_bev = np.asarray(z_pillar, dtype=np.float64), np.asarray(z_bev, dtype=np.float64)
    if z_pillar.shape != z_bev.shape:
        raise ValueError(f"branch shapes differ: {z_pillar.shape} vs {z_bev.shape}")
    (wz, bz), (wb, bb) = proj_pillar, proj_bev
    return z_pillar @ wz + bz + z_bev @ wb + bb


@dataclass
class BlockParams:
    attention: dict
    pillar: dict
    proj_pillar: tuple
    proj_bev: tuple


def dualflow_block(tokens: np.ndarray, block: BlockParams, heads: int, height_slots: int) -> np.ndarray:
    z_bev = bev_attention(tokens, block.attention, heads)
    z_pillar = pillar_attention(tokens, height_slots, block.pillar)
    return dualflow_fuse(z_pillar, z_bev, block.proj_pillar, block.proj_bev)


class DualFlow4D(TransformerMixin, BaseEstimator):
    """Stack of dual-branch attention blocks between a soft split and a soft composite.

    ``fit`` only draws the (untrained) weights from ``random_state`` for the
    input channel count; ``transform`` maps (T, h, w, c) features, plus
    optional same-shaped coordinate encodings, to refined (T, h, w, c)
    features.
    """

    def __init__(self, patch=(7, 7), stride=(3, 3), embed_dim=256, heads=8, height_slots=32, n_blocks=2,
                 random_state=0):
        self.patch = patch
        self.stride = stride
        self.embed_dim = embed_dim
        self.heads = heads
        self.height_slots = height_slots
        self.n_blocks = n_blocks
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 4:
            raise ValueError(f"expected (T, h, w, c) features, got shape {X.shape}")
        _check_patch(self.patch, self.stride)
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.embed_dim % self.height_slots:
            raise ValueError("embed_dim must be divisible by height_slots")
        rng = check_random_state(self.random_state)
        self.n_channels_ = X.shape[-1]
        area = self.patch[0] * self.patch[1]
        slot = self.embed_dim // self.height_slots
        self.split_proj_ = init_linear(rng, area * self.n_channels_, self.embed_dim)
        self.blocks_ = [
            BlockParams(init_attention(rng, self.embed_dim), init_pillar(rng, slot),
                        init_linear(rng, self.embed_dim, self.embed_dim), init_linear(rng, self.embed_dim, self.embed_dim))
            for _ in range(self.n_blocks)
        ]
        self.composite_proj_ = init_linear(rng, self.embed_dim, area * self.n_channels_)
        return self

    def transform(self, X, coords=None):
        check_is_fitted(self, "blocks_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_channels_:
            raise ValueError(f"fitted for {self.n_channels_} channels, got {X.shape[-1]}")
        tokens = soft_split(X, self.patch, self.stride, self.split_proj_, coords)
        for block in self.blocks_:
            tokens = dualflow_block(tokens, block, self.heads, self.height_slots)
        return soft_composite(tokens, X.shape[1:3], self.patch, self.stride, self.n_channels_, self.composite_proj_)
