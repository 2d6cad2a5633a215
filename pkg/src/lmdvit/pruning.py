"""Blurriness confidence, keep/prune decisions and window pooling.

Confidence maps are Tensors of shape (..., 2) holding (p_keep, p_prune) per
token. Decision maps are Tensors of shape (..., 1) whose forward values are
exactly 0 or 1; in training they carry straight-through Gumbel-Softmax
gradients.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor
from .windowing import partition_array, shift_array

KEEP = 0
MASKED_MEAN_FLOOR = 1e-6
_LOG_FLOOR = 1e-300


class ConfidencePredictor(Module):
    """Token-wise keep/prune head with a local branch and a decision-masked global branch."""

    def __init__(self, rng, dim: int):
        hidden = max(dim // 2, 1)
        self.dim = dim
        self.local = Linear(rng, dim, hidden)
        self.global_ = Linear(rng, dim, hidden)
        self.fuse_in = Linear(rng, 2 * hidden, hidden)
        self.fuse_out = Linear(rng, hidden, 2)

    def __call__(self, x: Tensor, prev_decision: np.ndarray | None = None) -> Tensor:
        return predict_confidence(x, prev_decision, self)


def predict_confidence(x: Tensor, prev_decision, params: ConfidencePredictor) -> Tensor:
    """Confidence map for tokens ``x`` of shape (N, ..., C).

    ``prev_decision`` holds the 0/1 decisions of the previous pruning block on
    the same token grid (shape ``x.shape[:-1]``); ``None`` means keep-all.
    """
    lead = x.shape[:-1]
    n, c = x.shape[0], x.shape[-1]
    xt = T.reshape(x, (n, -1, c))
    tokens = xt.shape[1]
    local = T.gelu(params.local(xt))
    glob = T.gelu(params.global_(xt))
    if prev_decision is None:
        d = np.ones((n, tokens, 1))
    else:
        d = np.asarray(prev_decision, dtype=np.float64).reshape(n, tokens, 1)
    den = np.maximum(d.sum(axis=1, keepdims=True), MASKED_MEAN_FLOOR)
    pooled = T.tsum(glob * d, axis=1, keepdims=True) * (1.0 / den)
    pooled = T.add(np.zeros(glob.shape), pooled)
    e = T.concat([local, pooled], axis=-1)
    logits = params.fuse_out(T.gelu(params.fuse_in(e)))
    return T.reshape(T.softmax(logits, axis=-1), lead + (2,))


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, 1e-20, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def decide_train(conf: Tensor, tau: float, rng: np.random.Generator | None = None,
                 noise: np.ndarray | None = None, hard: bool = True) -> Tensor:
    """Gumbel-Softmax keep decisions of shape (..., 1).

    With ``hard`` the forward value is the exact one-hot sample and the
    backward pass uses the soft sample at temperature ``tau``. ``noise`` fixes
    the Gumbel perturbation (drawn from ``rng`` otherwise).
    """
    if tau <= 0:
        raise ValueError("Gumbel temperature must be positive")
    if noise is None:
        noise = gumbel_noise(rng, conf.shape)
    logp = T.log(conf, eps=_LOG_FLOOR)
    noisy = logp + noise
    soft = T.softmax(noisy * (1.0 / tau), axis=-1)
    if hard:
        winner = np.argmax(noisy.data, axis=-1)
        one_hot = (np.arange(conf.shape[-1]) == winner[..., None]).astype(np.float64)
        soft = T.straight_through(soft, one_hot)
    return soft[..., KEEP:KEEP + 1]


def decide_test(conf: Tensor | np.ndarray, beta: float) -> Tensor:
    """Deterministic keep decisions (..., 1): 1 where p_keep >= beta."""
    p = conf.data if isinstance(conf, Tensor) else np.asarray(conf)
    return Tensor((p[..., KEEP:KEEP + 1] >= beta).astype(np.float64))


def pool_to_windows(decision, window: int, s: float, shift: int = 0) -> np.ndarray:
    """Per-window keep flags: mean token decision inside the window >= ``s``.

    ``decision`` is an (N, H, W) array or an (N, H, W, 1) Tensor; ``shift``
    applies the same cyclic shift the features go through first.
    """
    d = decision.data if isinstance(decision, Tensor) else np.asarray(decision)
    if d.ndim == 4:
        d = d[..., 0]
    d = shift_array(d, shift)
    return partition_array(d, window).mean(axis=1) >= s


def apply_decision(x: Tensor, d: Tensor) -> Tensor:
    """Zero pruned tokens: ``x * d`` with ``d`` broadcast over channels."""
    return x * d


def resample_decision(d: np.ndarray, height: int, width: int) -> np.ndarray:
    """Carry an (N, h, w) 0/1 map to another power-of-two scale.

    Coarsening keeps a token when any covered finer token was kept; refining
    repeats each token.
    """
    n, h, w = d.shape
    if (h, w) == (height, width):
        return d
    if h > height:
        f = h // height
        return d.reshape(n, height, f, width, f).max(axis=(2, 4))
    f = height // h
    return np.repeat(np.repeat(d, f, axis=1), f, axis=2)
