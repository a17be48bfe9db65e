"""Triplet hinge loss on squared Euclidean distances, plus triplet samplers.

Loss: max(0, ||a - p||^2 - ||a - n||^2 + margin). The subgradient at the kink
takes the inactive (zero) branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MARGIN = 0.2


@dataclass(frozen=True)
class Triplet:
    anchor_id: str
    positive_id: str
    negative_id: str


def _as_vec(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    return arr


def _check_triplet_args(a, p, n, margin):
    a = _as_vec(a, "anchor")
    p = _as_vec(p, "positive")
    n = _as_vec(n, "negative")
    if not (a.size == p.size == n.size):
        raise ValueError(f"embedding length mismatch: {a.size}, {p.size}, {n.size}")
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    return a, p, n


def triplet_loss(a, p, n, margin: float = DEFAULT_MARGIN) -> float:
    a, p, n = _check_triplet_args(a, p, n, margin)
    d_ap = float(((a - p) ** 2).sum())
    d_an = float(((a - n) ** 2).sum())
    return max(0.0, d_ap - d_an + margin)


def triplet_loss_grad(a, p, n, margin: float = DEFAULT_MARGIN):
    """Gradients (da, dp, dn); all zero when the hinge is inactive."""
    a, p, n = _check_triplet_args(a, p, n, margin)
    arg = ((a - p) ** 2).sum() - ((a - n) ** 2).sum() + margin
    if arg > 0:
        da = 2.0 * (n - p)
        dp = 2.0 * (p - a)
        dn = 2.0 * (a - n)
    else:
        da = np.zeros_like(a)
        dp = np.zeros_like(p)
        dn = np.zeros_like(n)
    return da.astype(np.float32), dp.astype(np.float32), dn.astype(np.float32)


def triplet_loss_grad_batch(A: np.ndarray, P: np.ndarray, N: np.ndarray,
                            margin: float = DEFAULT_MARGIN):
    """Vectorized hinge over rows of (B, D) arrays.

    Returns (losses (B,), dA, dP, dN) with the same formulas as the scalar ops.
    """
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    A64 = np.asarray(A, dtype=np.float64)
    P64 = np.asarray(P, dtype=np.float64)
    N64 = np.asarray(N, dtype=np.float64)
    if A64.shape != P64.shape or A64.shape != N64.shape:
        raise ValueError(f"embedding shape mismatch: {A64.shape}, {P64.shape}, {N64.shape}")
    d_ap = ((A64 - P64) ** 2).sum(axis=1)
    d_an = ((A64 - N64) ** 2).sum(axis=1)
    arg = d_ap - d_an + margin
    losses = np.maximum(arg, 0.0)
    active = (arg > 0).astype(np.float64)[:, None]
    dA = (2.0 * (N64 - P64) * active).astype(np.float32)
    dP = (2.0 * (P64 - A64) * active).astype(np.float32)
    dN = (2.0 * (A64 - N64) * active).astype(np.float32)
    return losses, dA, dP, dN


def sample_triplets_cross_domain(manifest, negatives_per_pair: int = 40,
                                 rng: np.random.Generator | None = None) -> list[Triplet]:
    """One group of triplets per (consumer anchor, shop positive) pair.

    Negatives are shop images drawn uniformly (with replacement) from the
    other items; deterministic for a given generator state.
    """
    if rng is None:
        raise ValueError("rng is required for reproducible sampling")
    if negatives_per_pair < 1:
        raise ValueError(f"negatives_per_pair must be >= 1, got {negatives_per_pair}")
    items = sorted(manifest.items, key=lambda it: it.id)
    shop_by_item = {it.id: sorted(it.shop) for it in items}
    triplets: list[Triplet] = []
    for it in items:
        if not it.consumer or not it.shop:
            continue
        pool = [sid for other in items if other.id != it.id for sid in shop_by_item[other.id]]
        if not pool:
            raise ValueError(f"no negatives available for item {it.id}")
        pool_arr = np.array(pool)
        for anchor in sorted(it.consumer):
            for positive in shop_by_item[it.id]:
                negs = rng.choice(pool_arr, size=negatives_per_pair, replace=True)
                triplets.extend(Triplet(anchor, positive, str(neg)) for neg in negs)
    if not triplets:
        raise ValueError("empty triplet set: manifest has no consumer-shop pairs")
    return triplets


def sample_triplets_inshop(manifest, pairs_per_class: int = 100,
                           rng: np.random.Generator | None = None) -> list[Triplet]:
    """pairs_per_class positive pairs per item (with replacement) over its shop
    images, each matched with one uniform negative from another item."""
    if rng is None:
        raise ValueError("rng is required for reproducible sampling")
    if pairs_per_class < 1:
        raise ValueError(f"pairs_per_class must be >= 1, got {pairs_per_class}")
    items = sorted(manifest.items, key=lambda it: it.id)
    for it in items:
        if len(it.shop) < 2:
            raise ValueError(f"item {it.id} has fewer than 2 shop images; cannot form pairs")
    triplets: list[Triplet] = []
    for it in items:
        own = np.array(sorted(it.shop))
        pool = [sid for other in items if other.id != it.id for sid in sorted(other.shop)]
        if not pool:
            raise ValueError(f"no negatives available for item {it.id}")
        pool_arr = np.array(pool)
        for _ in range(pairs_per_class):
            a_idx, p_idx = rng.choice(len(own), size=2, replace=False)
            neg = rng.choice(pool_arr)
            triplets.append(Triplet(str(own[a_idx]), str(own[p_idx]), str(neg)))
    if not triplets:
        raise ValueError("empty triplet set")
    return triplets
