"""Scikit-learn style front end over the two-branch embedding network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import ArrayDataset
from .network import NetworkConfig, embed
from .training import TrainConfig, train
from .validation import check_domains, check_image_batch, check_labels, check_mask_batch

_TRANSFORM_CHUNK = 64


class TripletEmbedder(TransformerMixin, BaseEstimator):
    """Learn attention-gated image embeddings with a triplet loss.

    Each image runs through a small convolutional backbone once; a global
    branch and an attention-gated branch share the upper layers and their two
    L2-normalized halves are concatenated into the embedding. During training
    the ``impdrop`` gate drops each feature-map element with keep-probability
    given by the attention map; at transform time the gate scales
    deterministically by the attention value.

    Parameters
    ----------
    embedding_dim : int, default=64
        Total embedding length; must be even (half per branch).

    gate_mode : {'impdrop', 'product', 'none'}, default='impdrop'
        How the attention map is combined with the feature maps. 'none'
        bypasses gating entirely (both halves become identical).

    attention_source : {'learned_head', 'oracle_mask'}, default='learned_head'
        'learned_head' trains a small conv+sigmoid head end-to-end;
        'oracle_mask' uses caller-provided foreground masks (the ``masks``
        argument of fit/transform), box-averaged to the feature grid.

    lower_channels, upper_channels, head_channels : tuple of int
        Channel widths of the backbone, shared upper stack, and attention head.

    kernel_size : int, default=3
        Odd convolution kernel size.

    epochs, batch_triplets, learning_rate, momentum, margin : training knobs
        SGD-with-momentum over triplet batches; margin is the hinge margin on
        squared distances.

    negatives_per_pair : int, default=2
        Cross-domain triplets per (consumer, shop) positive pair (used when
        ``domains`` is passed to fit).

    pairs_per_class : int, default=20
        Positive pairs per label when fitting without domains.

    train_fraction : float, default=1.0
        Seeded item-level subsample of the training labels.

    seed : int, default=0
        Root seed; fits are bit-reproducible given identical inputs.

    Attributes
    ----------
    net_ : the trained network.
    loss_history_ : list of per-epoch mean triplet losses.
    config_hash_ : hash of the resolved training configuration.
    """

    def __init__(self, embedding_dim=64, gate_mode="impdrop",
                 attention_source="learned_head", lower_channels=(8, 16),
                 upper_channels=(16,), head_channels=(8,), kernel_size=3, epochs=20,
                 batch_triplets=16, learning_rate=0.05, momentum=0.9, margin=0.2,
                 negatives_per_pair=2, pairs_per_class=20, train_fraction=1.0, seed=0):
        self.embedding_dim = embedding_dim
        self.gate_mode = gate_mode
        self.attention_source = attention_source
        self.lower_channels = lower_channels
        self.upper_channels = upper_channels
        self.head_channels = head_channels
        self.kernel_size = kernel_size
        self.epochs = epochs
        self.batch_triplets = batch_triplets
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.margin = margin
        self.negatives_per_pair = negatives_per_pair
        self.pairs_per_class = pairs_per_class
        self.train_fraction = train_fraction
        self.seed = seed

    def _check_masks(self, masks, X, who: str):
        if self.attention_source == "oracle_mask":
            if masks is None:
                raise ValueError(f"{who} requires masks when attention_source='oracle_mask'")
            return check_mask_batch(masks, X)
        if masks is not None:
            raise ValueError(f"{who} got masks but attention_source='learned_head'")
        return None

    def fit(self, X, y, domains=None, masks=None):
        """Fit on images X (n, c, h, w) with item labels y.

        ``domains`` ('shop'/'consumer' per image) switches triplet sampling to
        consumer-anchor/shop-positive pairs; without it, positive pairs are
        drawn within each label. ``masks`` are per-image foreground masks in
        [0, 1], required exactly when attention_source='oracle_mask'.
        """
        X = check_image_batch(X)
        labels = check_labels(y, X.shape[0])
        masks = self._check_masks(masks, X, "fit")
        if domains is not None:
            domains = check_domains(domains, X.shape[0])
        ds = ArrayDataset(X, labels, domains=domains, masks=masks)
        task = "c2s" if domains is not None else "inshop"
        network = NetworkConfig(
            in_channels=X.shape[1], in_h=X.shape[2], in_w=X.shape[3],
            lower_channels=tuple(self.lower_channels),
            upper_channels=tuple(self.upper_channels),
            head_channels=tuple(self.head_channels),
            kernel_size=self.kernel_size, embedding_dim=self.embedding_dim,
            gate_mode=self.gate_mode, attention_source=self.attention_source)
        config = TrainConfig(
            epochs=self.epochs, batch_triplets=self.batch_triplets,
            learning_rate=self.learning_rate, momentum=self.momentum, margin=self.margin,
            seed=self.seed, train_fraction=self.train_fraction,
            negatives_per_pair=self.negatives_per_pair,
            pairs_per_class=self.pairs_per_class, task=task, network=network)
        result = train(ds, config)
        self.net_ = result.net
        self.loss_history_ = [h["mean_loss"] for h in result.history]
        self.config_hash_ = result.config_hash
        return self

    def transform(self, X, masks=None):
        """Embed images deterministically (eval mode); returns (n, embedding_dim)."""
        check_is_fitted(self, "net_")
        X = check_image_batch(X)
        masks = self._check_masks(masks, X, "transform")
        out = []
        for i in range(0, X.shape[0], _TRANSFORM_CHUNK):
            chunk = X[i:i + _TRANSFORM_CHUNK]
            m = masks[i:i + _TRANSFORM_CHUNK] if masks is not None else None
            vecs, _ = embed(self.net_, chunk, "eval", oracle_mask=m)
            out.append(vecs)
        return np.concatenate(out, axis=0)

    def fit_transform(self, X, y=None, domains=None, masks=None):
        return self.fit(X, y, domains=domains, masks=masks).transform(X, masks=masks)
