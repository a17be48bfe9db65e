"""Two-branch embedding network: shared lower layers, an attention head, and
upper layers whose single parameter set serves both branches.

An image runs through the lower stack once. The global branch feeds those
feature maps straight into the shared upper stack; the attention branch first
gates them with the attention map (stochastically in training for the impdrop
connection, deterministically otherwise). The two halves, each L2-normalized
by the upper stack's final layer, are concatenated (global first) into the
embedding.

The attention map comes either from a small learned head (convs + sigmoid,
trained end-to-end through the gate's surrogate gradient) or from an oracle
foreground mask box-averaged down to the feature grid.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gating import (ATTENTION_SOURCES, GATE_MODES, area_downsample, check_attention_map,
                     gate_forward_eval, impdrop_backward_p, impdrop_backward_x,
                     impdrop_forward_train, impdrop_sample_mask, product_backward)
from .layers import (Conv2d, Dense, L2Norm, Layer, MaxPool2, ReLU, Sigmoid, run_stack,
                     run_stack_backward)
from .seeding import make_rng
from .tensor import check_nchw, read_tensor_blob, write_tensor_blob

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_FORMAT = "vamkit-checkpoint-v1"


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    in_h: int = 32
    in_w: int = 32
    lower_channels: tuple[int, ...] = (8, 16)
    upper_channels: tuple[int, ...] = (16,)
    head_channels: tuple[int, ...] = (8,)
    kernel_size: int = 3
    embedding_dim: int = 64
    gate_mode: str = "impdrop"
    attention_source: str = "oracle_mask"

    def validate(self) -> "NetworkConfig":
        if self.embedding_dim < 2 or self.embedding_dim % 2:
            raise ValueError(f"embedding_dim must be even and >= 2, got {self.embedding_dim}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.attention_source not in ATTENTION_SOURCES:
            raise ValueError(
                f"attention_source must be one of {ATTENTION_SOURCES}, got {self.attention_source!r}")
        if self.in_channels < 1 or self.in_h < 1 or self.in_w < 1:
            raise ValueError("input extents must be positive")
        if not self.lower_channels or not self.upper_channels:
            raise ValueError("lower_channels and upper_channels must be non-empty")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("lower_channels", "upper_channels", "head_channels"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        kwargs = dict(d)
        for key in ("lower_channels", "upper_channels", "head_channels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        unknown = set(kwargs) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**kwargs).validate()


@dataclass
class EmbeddingNet:
    config: NetworkConfig
    lower: list[Layer]
    attention_head: list[Layer]
    upper_shared: list[Layer]
    feature_shape: tuple[int, int, int]  # (channels, h, w) after the lower stack

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.feature_shape[1], self.feature_shape[2]


@dataclass
class ForwardTrace:
    mode: str
    features: np.ndarray
    attention: np.ndarray | None
    mask: np.ndarray | None
    caches_lower: list
    caches_head: list | None
    caches_global: list
    caches_attention: list


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _dry_run(layers: list[Layer], shape: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
    for layer in layers:
        shape = layer.out_shape(shape)
    return shape


def build_network(config: NetworkConfig, rng: np.random.Generator) -> EmbeddingNet:
    """Instantiate all stacks and verify shapes with a dry run.

    The upper stack is built exactly once and referenced by both branches;
    initialization order (lower, head, upper) is fixed so identical seeds give
    bit-identical parameters.
    """
    config = config.validate()
    k = config.kernel_size
    pad = k // 2

    lower: list[Layer] = []
    prev = config.in_channels
    for ch in config.lower_channels:
        lower.extend([Conv2d(prev, ch, k, padding=pad, rng=rng), ReLU(), MaxPool2()])
        prev = ch
    n, c_f, fh, fw = _dry_run(lower, (1, config.in_channels, config.in_h, config.in_w))

    head: list[Layer] = []
    hprev = c_f
    for ch in config.head_channels:
        head.extend([Conv2d(hprev, ch, k, padding=pad, rng=rng), ReLU()])
        hprev = ch
    head.extend([Conv2d(hprev, 1, k, padding=pad, rng=rng), Sigmoid()])
    head_shape = _dry_run(head, (1, c_f, fh, fw))
    if head_shape != (1, 1, fh, fw):
        raise ValueError(f"attention head output {head_shape} does not match feature grid {fh}x{fw}")

    upper: list[Layer] = []
    uprev = c_f
    for ch in config.upper_channels:
        upper.extend([Conv2d(uprev, ch, k, padding=pad, rng=rng), ReLU()])
        uprev = ch
    _, uc, uh, uw = _dry_run(upper, (1, c_f, fh, fw))
    upper.append(Dense(uc * uh * uw, config.embedding_dim // 2, rng=rng))
    upper.append(L2Norm())

    return EmbeddingNet(config=config, lower=lower, attention_head=head,
                        upper_shared=upper, feature_shape=(c_f, fh, fw))


def param_items(net: EmbeddingNet) -> list[tuple[str, Layer, str]]:
    """(name, layer, param key) triples in a fixed order; the shared upper stack
    appears exactly once."""
    items = []
    for stack_name, stack in (("lower", net.lower), ("head", net.attention_head),
                              ("upper", net.upper_shared)):
        for i, layer in enumerate(stack):
            for key in layer.params():
                items.append((f"{stack_name}.{i}.{key}", layer, key))
    return items


def net_params(net: EmbeddingNet) -> dict[str, np.ndarray]:
    return {name: layer.params()[key] for name, layer, key in param_items(net)}


def zero_grads_like(net: EmbeddingNet) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in net_params(net).items()}


def _prepare_attention(net: EmbeddingNet, images: np.ndarray,
                       oracle_mask: np.ndarray | None) -> np.ndarray | None:
    cfg = net.config
    if cfg.attention_source == "oracle_mask":
        if oracle_mask is None:
            raise ValueError("oracle mask required when attention_source='oracle_mask'")
        p = check_attention_map(oracle_mask, "oracle mask")
        if p.shape[0] != images.shape[0]:
            raise ValueError(f"oracle mask batch {p.shape[0]} != image batch {images.shape[0]}")
        if p.shape[2:] != net.feature_hw:
            p = area_downsample(p, net.feature_hw)
        return p
    if oracle_mask is not None:
        raise ValueError("oracle mask passed but attention_source='learned_head'")
    return None


def embed(net: EmbeddingNet, images: np.ndarray, mode: str = "eval",
          rng: np.random.Generator | None = None,
          oracle_mask: np.ndarray | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """Run a batch through both branches; returns (embeddings, trace).

    Embeddings are (batch, embedding_dim) float32, the global half first. The
    trace holds everything the backward pass needs and is valid for exactly
    one backward call.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    images = check_nchw(images, "images")
    cfg = net.config
    if images.shape[1:] != (cfg.in_channels, cfg.in_h, cfg.in_w):
        raise ValueError(
            f"shape mismatch: images {images.shape[1:]} != configured "
            f"{(cfg.in_channels, cfg.in_h, cfg.in_w)}")

    oracle_p = _prepare_attention(net, images, oracle_mask)

    features, caches_lower = run_stack(net.lower, images)

    attention = None
    caches_head = None
    mask = None
    if cfg.gate_mode == "none":
        gated = features
    else:
        if cfg.attention_source == "learned_head":
            attention, caches_head = run_stack(net.attention_head, features)
        else:
            attention = oracle_p
        if mode == "train" and cfg.gate_mode == "impdrop":
            if rng is None:
                raise ValueError("rng required for impdrop gating in train mode")
            mask = impdrop_sample_mask(attention, features.shape[1], rng)
            gated = impdrop_forward_train(features, mask)
        else:
            gated = gate_forward_eval(features, attention)

    global_out, caches_global = run_stack(net.upper_shared, features)
    attn_out, caches_attention = run_stack(net.upper_shared, gated)

    n = images.shape[0]
    emb = np.concatenate([global_out.reshape(n, -1), attn_out.reshape(n, -1)], axis=1)
    trace = ForwardTrace(mode=mode, features=features, attention=attention, mask=mask,
                         caches_lower=caches_lower, caches_head=caches_head,
                         caches_global=caches_global, caches_attention=caches_attention)
    return np.ascontiguousarray(emb), trace


def _merge_stack_grads(grads: dict[str, np.ndarray], stack_name: str,
                       per_layer: list[dict[str, np.ndarray]]) -> None:
    for i, layer_grads in enumerate(per_layer):
        for key, g in layer_grads.items():
            name = f"{stack_name}.{i}.{key}"
            if name in grads:
                grads[name] = grads[name] + g
            else:
                grads[name] = g


def network_backward(net: EmbeddingNet, trace: ForwardTrace,
                     d_embedding: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every parameter, given d(loss)/d(embedding).

    The shared upper stack receives the sum of both branches' contributions;
    the attention head is reached only through the gate's attention gradient.
    """
    cfg = net.config
    n = trace.features.shape[0]
    half = cfg.embedding_dim // 2
    d_embedding = np.asarray(d_embedding, dtype=np.float32)
    if d_embedding.shape != (n, cfg.embedding_dim):
        raise ValueError(
            f"d_embedding shape {d_embedding.shape} != {(n, cfg.embedding_dim)}")

    d_global = np.ascontiguousarray(d_embedding[:, :half]).reshape(n, half, 1, 1)
    d_attn = np.ascontiguousarray(d_embedding[:, half:]).reshape(n, half, 1, 1)

    grads: dict[str, np.ndarray] = {}

    d_feat_global, upper_grads_g = run_stack_backward(net.upper_shared, trace.caches_global,
                                                      d_global)
    d_gated, upper_grads_a = run_stack_backward(net.upper_shared, trace.caches_attention,
                                                d_attn)
    _merge_stack_grads(grads, "upper", upper_grads_g)
    _merge_stack_grads(grads, "upper", upper_grads_a)

    d_attention = None
    if cfg.gate_mode == "none":
        d_features = d_feat_global + d_gated
    else:
        if trace.mode == "train" and cfg.gate_mode == "impdrop":
            d_gate_x = impdrop_backward_x(trace.mask, d_gated)
        else:
            d_gate_x, _ = product_backward(trace.features, trace.attention, d_gated)
        d_attention = impdrop_backward_p(trace.features, d_gated)
        d_features = d_feat_global + d_gate_x

    if trace.caches_head is not None and d_attention is not None:
        d_feat_head, head_grads = run_stack_backward(net.attention_head, trace.caches_head,
                                                     d_attention)
        _merge_stack_grads(grads, "head", head_grads)
        d_features = d_features + d_feat_head

    _, lower_grads = run_stack_backward(net.lower, trace.caches_lower, d_features)
    _merge_stack_grads(grads, "lower", lower_grads)

    # layers never reached this pass (e.g. the head under gate_mode='none')
    full = zero_grads_like(net)
    full.update(grads)
    return full


def save_checkpoint(path, net: EmbeddingNet, seed: int = 0, epoch: int = 0,
                    loss_history: list[float] | None = None,
                    extra: dict | None = None) -> Path:
    """Write manifest.json plus one blob per parameter, named <index>_<role>.tns."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    items = param_items(net)
    by_layer: dict[int, dict] = {}
    layer_index: dict[int, int] = {}
    for name, layer, key in items:
        idx = layer_index.setdefault(id(layer), len(layer_index))
        stack, pos, _ = name.split(".")
        meta = by_layer.setdefault(idx, {"index": idx, "stack": stack, "pos": int(pos),
                                         "kind": layer.kind, "params": []})
        meta["params"].append(key)
        write_tensor_blob(out / f"{idx}_{key}.tns", layer.params()[key])
    layers_meta = [by_layer[i] for i in sorted(by_layer)]
    cfg_dict = net.config.to_dict()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "layers": layers_meta,
        "seed": int(seed),
        "epoch": int(epoch),
        "loss_history": [float(v) for v in (loss_history or [])],
    }
    if extra:
        manifest.update(extra)
    (out / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_checkpoint(path) -> tuple[EmbeddingNet, dict]:
    """Rebuild the network from a checkpoint directory; returns (net, manifest)."""
    root = Path(path)
    manifest_path = root / CHECKPOINT_MANIFEST
    if not manifest_path.is_file():
        raise ValueError(f"missing checkpoint manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {manifest_path}")
    config = NetworkConfig.from_dict(manifest["config"])
    net = build_network(config, make_rng(0, "checkpoint-load"))

    items = param_items(net)
    layer_index: dict[int, int] = {}
    for name, layer, key in items:
        idx = layer_index.setdefault(id(layer), len(layer_index))
        blob = root / f"{idx}_{key}.tns"
        if not blob.is_file():
            raise ValueError(f"missing checkpoint blob: {blob}")
        layer.set_param(key, read_tensor_blob(blob))
    return net, manifest
