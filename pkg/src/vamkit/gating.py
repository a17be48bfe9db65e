"""Connecting an attention map to feature maps.

An attention map holds one keep-probability per spatial location, shaped
(n, 1, h, w) with values in [0, 1], spatially aligned to the feature maps it
gates. Two connections are provided:

* ``impdrop`` — during training each feature-map element is kept or zeroed by
  an independent Bernoulli draw whose keep-probability is the location's
  attention value (one draw per sample, channel, and location). Evaluation
  abandons the randomness and simply scales by the attention value. There is
  deliberately no 1/p rescaling of the kept activations: the evaluation-time
  product is the model, and the training forward matches it in expectation.
* ``product`` — deterministic element-wise scaling in both phases.

The gradient with respect to the attention value is not well defined under the
sampled forward, so the product-connection gradient (the channel dot product
of input and upstream gradient) is used as its estimate. Both connections
share one code path for that quantity, so they agree bit for bit.
"""

from __future__ import annotations

import numpy as np

from .tensor import check_nchw

GATE_MODES = ("impdrop", "product", "none")
ATTENTION_SOURCES = ("learned_head", "oracle_mask")

_RANGE_SLACK = 1e-6


def check_attention_map(p, name: str = "attention map") -> np.ndarray:
    """Validate shape (n, 1, h, w) and range; clamp float fuzz back into [0, 1].

    Values outside [-1e-6, 1 + 1e-6] indicate a wiring bug upstream, not
    numerics, and raise instead of being clamped.
    """
    p = check_nchw(p, name)
    if p.shape[1] != 1:
        raise ValueError(f"{name} must have a single channel, got shape {p.shape}")
    lo = float(p.min())
    hi = float(p.max())
    if lo < -_RANGE_SLACK or hi > 1.0 + _RANGE_SLACK:
        raise ValueError(f"{name} values outside [0, 1]: min={lo}, max={hi}")
    if lo < 0.0 or hi > 1.0:
        p = np.clip(p, 0.0, 1.0)
    return p


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in {what}: {a.shape} vs {b.shape}")


def _check_gate_shapes(x: np.ndarray, p: np.ndarray) -> None:
    if p.shape[0] != x.shape[0] or p.shape[2:] != x.shape[2:]:
        raise ValueError(
            f"shape mismatch: attention map {p.shape} does not align with features {x.shape}"
        )


def impdrop_sample_mask(p, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a binary keep-mask, one independent Bernoulli per (n, c, i, j).

    Entry (n, c, i, j) is 1.0 with probability p[n, 0, i, j]; the draw is
    deterministic given the generator state.
    """
    p = check_attention_map(p)
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    n, _, h, w = p.shape
    u = rng.random((n, channels, h, w))
    return (u < p).astype(np.float32)


def impdrop_forward_train(x, mask) -> np.ndarray:
    """Training forward: every output entry is either 0 or the input entry."""
    x = check_nchw(x, "features")
    mask = check_nchw(mask, "gate mask")
    _check_same_shape(x, mask, "impdrop forward")
    return x * mask


def impdrop_backward_x(mask, dy) -> np.ndarray:
    """Gradient to the gated features: the mask gates the upstream gradient."""
    mask = check_nchw(mask, "gate mask")
    dy = check_nchw(dy, "upstream gradient")
    _check_same_shape(mask, dy, "impdrop backward")
    return mask * dy


def _channel_dot(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # single code path shared by both connections so their dp agrees bit-exactly
    prod = x.astype(np.float64) * dy.astype(np.float64)
    return prod.sum(axis=1, keepdims=True).astype(np.float32)


def impdrop_backward_p(x, dy) -> np.ndarray:
    """Surrogate gradient to the attention map: per-location channel dot product.

    This is the product connection's exact gradient, adopted as the estimate
    for the stochastic forward (whose gradient has no closed form).
    """
    x = check_nchw(x, "features")
    dy = check_nchw(dy, "upstream gradient")
    _check_same_shape(x, dy, "impdrop attention gradient")
    return _channel_dot(x, dy)


def gate_forward_eval(x, p) -> np.ndarray:
    """Evaluation forward (and the product connection's forward in both phases)."""
    x = check_nchw(x, "features")
    p = check_attention_map(p)
    _check_gate_shapes(x, p)
    return p * x


def product_backward(x, p, dy) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of the deterministic gate: (dx, dp)."""
    x = check_nchw(x, "features")
    p = check_attention_map(p)
    dy = check_nchw(dy, "upstream gradient")
    _check_gate_shapes(x, p)
    _check_same_shape(x, dy, "product backward")
    dx = p * dy
    dp = _channel_dot(x, dy)
    return dx, dp


def area_downsample(m, target_hw: tuple[int, int]) -> np.ndarray:
    """Box-average a (n, 1, h, w) map down to (n, 1, th, tw); integer factors only."""
    m = check_nchw(m, "map")
    n, c, h, w = m.shape
    th, tw = target_hw
    if th > h or tw > w:
        raise ValueError(f"target {th}x{tw} larger than source {h}x{w}")
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ValueError(f"target {th}x{tw} is not an integer factor of {h}x{w}")
    fh, fw = h // th, w // tw
    out = m.reshape(n, c, th, fh, tw, fw).mean(axis=(3, 5), dtype=np.float64)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
