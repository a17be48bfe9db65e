"""Training loop (SGD with momentum over triplets), run configuration, and the
finite-difference gradient checking harness."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .data import OracleMapCache, batch_images
from .network import (EmbeddingNet, NetworkConfig, build_network, config_hash, embed,
                      net_params, network_backward, param_items, save_checkpoint)
from .seeding import make_rng
from .tensor import dot64
from .triplet import (sample_triplets_cross_domain, sample_triplets_inshop,
                      triplet_loss_grad_batch)

TASKS = ("c2s", "inshop")
METRICS_NAME = "metrics.jsonl"
DIVERGENCE_FACTOR = 10.0
FD_STEP = 1e-3
# the composed network needs a finer step: every parameter feeds hundreds of
# relu/maxpool units, so at 1e-3 some unit always straddles its kink
NETWORK_FD_STEP = 1e-5
LAYER_TOL_REL = 1e-3
LAYER_TOL_ABS = 1e-5
NETWORK_TOL_REL = 1e-2
NETWORK_TOL_ABS = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_triplets: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    margin: float = 0.2
    seed: int = 0
    train_fraction: float = 1.0
    negatives_per_pair: int = 2
    pairs_per_class: int = 20
    task: str = "c2s"
    checkpoint_every: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_triplets < 1:
            raise ValueError(f"batch_triplets must be >= 1, got {self.batch_triplets}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if not 0 < self.train_fraction <= 1:
            raise ValueError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.negatives_per_pair < 1 or self.pairs_per_class < 1:
            raise ValueError("sampler counts must be >= 1")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        self.network.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        if "network" in kwargs:
            kwargs["network"] = NetworkConfig.from_dict(kwargs["network"])
        unknown = set(kwargs) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**kwargs).validate()

    def hash(self) -> str:
        return config_hash(self.to_dict())


_NETWORK_FLAT_KEYS = ("embedding_dim", "lower_channels", "upper_channels", "head_channels",
                      "kernel_size", "gate_mode", "attention_source")
_TRAIN_FLAT_KEYS = ("epochs", "batch_triplets", "learning_rate", "momentum", "margin", "seed",
                    "train_fraction", "negatives_per_pair", "pairs_per_class", "task",
                    "checkpoint_every")


def run_config_from_dict(doc: dict) -> tuple[TrainConfig, str | None]:
    """Parse the flat run-config JSON document; unknown keys are rejected.

    Returns (config, dataset path or None).
    """
    if not isinstance(doc, dict):
        raise ValueError("run config must be a JSON object")
    unknown = set(doc) - set(_TRAIN_FLAT_KEYS) - set(_NETWORK_FLAT_KEYS) - {"data"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    net_kwargs = {k: doc[k] for k in _NETWORK_FLAT_KEYS if k in doc}
    for key in ("lower_channels", "upper_channels", "head_channels"):
        if key in net_kwargs:
            net_kwargs[key] = tuple(net_kwargs[key])
    network = NetworkConfig(**net_kwargs)
    train_kwargs = {k: doc[k] for k in _TRAIN_FLAT_KEYS if k in doc}
    config = TrainConfig(**train_kwargs, network=network).validate()
    data = doc.get("data")
    return config, (str(data) if data is not None else None)


class TrainingDiverged(ValueError):
    pass


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: dict[str, np.ndarray], lr: float, momentum: float):
    """In-place momentum update: v <- momentum*v - lr*g; w <- w + v.

    Aborts on the first non-finite gradient, naming the parameter.
    """
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} != {w.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(w)
            state[name] = v
        v *= np.float32(momentum)
        v -= np.float32(lr) * g
        w += v
    return params, state


@dataclass
class TrainResult:
    net: EmbeddingNet
    history: list[dict]
    config_hash: str
    checkpoint_dir: Path | None = None
    metrics_path: Path | None = None


def _select_train_items(ds, config: TrainConfig):
    items = sorted((it for it in ds.items if it.split == "train"), key=lambda it: it.id)
    if not items:
        raise ValueError("empty triplet set: no items with split 'train'")
    if config.train_fraction < 1.0:
        count = math.ceil(config.train_fraction * len(items))
        rng = make_rng(config.seed, "train-subset")
        chosen = sorted(rng.choice(len(items), size=count, replace=False).tolist())
        items = [items[i] for i in chosen]
    return items


def train(ds, config: TrainConfig, out_dir=None) -> TrainResult:
    """Train an embedding network on the dataset; deterministic given the seed.

    Writes metrics.jsonl and a checkpoint when out_dir is given (plus periodic
    checkpoints every `checkpoint_every` epochs under epoch_NNNN/).
    """
    config = config.validate()
    h, w = ds.extents
    channels = getattr(ds, "channels", 3)
    network_cfg = dataclasses.replace(config.network, in_channels=channels, in_h=h, in_w=w)
    net = build_network(network_cfg, make_rng(config.seed, "init"))

    items = _select_train_items(ds, config)
    view = SimpleNamespace(items=items)
    uses_oracle = network_cfg.attention_source == "oracle_mask"
    oracle = OracleMapCache(ds, net.feature_hw) if uses_oracle else None
    uses_impdrop = network_cfg.gate_mode == "impdrop"

    run_hash = config.hash()
    out_path = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_path = out_path / METRICS_NAME
        metrics_path.write_text("")

    params = net_params(net)
    state: dict[str, np.ndarray] = {}
    history: list[dict] = []
    baseline_loss: float | None = None

    for epoch in range(config.epochs):
        rng_triplets = make_rng(config.seed, "triplets", epoch)
        if config.task == "c2s":
            triplets = sample_triplets_cross_domain(view, config.negatives_per_pair, rng_triplets)
        else:
            triplets = sample_triplets_inshop(view, config.pairs_per_class, rng_triplets)
        order = make_rng(config.seed, "order", epoch).permutation(len(triplets))
        triplets = [triplets[i] for i in order]

        loss_sum = 0.0
        n_seen = 0
        for bi in range(0, len(triplets), config.batch_triplets):
            batch = triplets[bi:bi + config.batch_triplets]
            a_ids = [t.anchor_id for t in batch]
            p_ids = [t.positive_id for t in batch]
            n_ids = [t.negative_id for t in batch]

            rng_gate = make_rng(config.seed, "gate", epoch, bi) if uses_impdrop else None
            emb = {}
            traces = {}
            for role, ids in (("a", a_ids), ("p", p_ids), ("n", n_ids)):
                mask = oracle.batch(ids) if oracle is not None else None
                emb[role], traces[role] = embed(net, batch_images(ds, ids), "train",
                                                rng=rng_gate, oracle_mask=mask)

            losses, dA, dP, dN = triplet_loss_grad_batch(emb["a"], emb["p"], emb["n"],
                                                         config.margin)
            batch_mean = float(losses.mean())
            if not np.isfinite(batch_mean):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            if baseline_loss is None:
                baseline_loss = batch_mean
            elif baseline_loss > 0 and batch_mean > DIVERGENCE_FACTOR * baseline_loss:
                raise TrainingDiverged(
                    f"loss {batch_mean:.4g} exceeds {DIVERGENCE_FACTOR}x its initial value "
                    f"{baseline_loss:.4g} at epoch {epoch}")

            inv_b = np.float32(1.0 / len(batch))
            grads = network_backward(net, traces["a"], dA * inv_b)
            for name, g in network_backward(net, traces["p"], dP * inv_b).items():
                grads[name] = grads[name] + g
            for name, g in network_backward(net, traces["n"], dN * inv_b).items():
                grads[name] = grads[name] + g
            sgd_step(params, grads, state, config.learning_rate, config.momentum)

            loss_sum += float(losses.sum())
            n_seen += len(batch)

        mean_loss = loss_sum / n_seen
        entry = {"epoch": epoch, "mean_loss": mean_loss, "lr": config.learning_rate,
                 "timestamp": datetime.now(timezone.utc).isoformat()}
        history.append(entry)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        if (out_path is not None and config.checkpoint_every > 0
                and (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs):
            save_checkpoint(out_path / f"epoch_{epoch + 1:04d}", net, seed=config.seed,
                            epoch=epoch + 1, loss_history=[e["mean_loss"] for e in history],
                            extra={"train_config": config.to_dict(), "config_hash": run_hash})

    checkpoint_dir = None
    if out_path is not None:
        checkpoint_dir = save_checkpoint(out_path, net, seed=config.seed, epoch=config.epochs,
                                         loss_history=[e["mean_loss"] for e in history],
                                         extra={"train_config": config.to_dict(),
                                                "config_hash": run_hash})
    return TrainResult(net=net, history=history, config_hash=run_hash,
                       checkpoint_dir=checkpoint_dir, metrics_path=metrics_path)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking

@dataclass
class CheckResult:
    name: str
    max_rel: float
    max_abs: float
    tol_rel: float
    tol_abs: float
    passed: bool

    def format(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (f"{tag} {self.name}: max_rel={self.max_rel:.3e} max_abs={self.max_abs:.3e} "
                f"(tol rel={self.tol_rel:.0e} abs={self.tol_abs:.0e})")


@dataclass
class GradcheckReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def format(self) -> str:
        lines = [c.format() for c in self.checks]
        lines.append("all checks passed" if self.passed else "some checks FAILED")
        return "\n".join(lines)


def _spread_values(rng: np.random.Generator, size: int) -> np.ndarray:
    """Shuffled linspace over [-1, 1]: continuous values with no near-ties and
    nothing within the FD step of zero, so kinked layers stay checkable."""
    vals = np.linspace(-1.0, 1.0, size + 2)[1:-1]
    return rng.permutation(vals).astype(np.float32)


def _fd_check(forward_scalar, arrays: list[np.ndarray], analytic: list[np.ndarray],
              tol_rel: float, tol_abs: float, name: str,
              coords: list[tuple[int, int]] | None = None, step: float = FD_STEP) -> CheckResult:
    """Central finite differences of forward_scalar wrt the given arrays.

    coords is a list of (array index, flat element index); None checks every
    element of every array.
    """
    if coords is None:
        coords = [(ai, i) for ai, arr in enumerate(arrays) for i in range(arr.size)]
    max_rel = 0.0
    max_abs = 0.0
    ok = True
    for ai, idx in coords:
        arr = arrays[ai]
        orig = arr.flat[idx]
        arr.flat[idx] = orig + step
        f_plus = forward_scalar()
        arr.flat[idx] = orig - step
        f_minus = forward_scalar()
        arr.flat[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        an = float(analytic[ai].flat[idx])
        abs_err = abs(an - fd)
        denom = max(abs(an), abs(fd))
        rel_err = abs_err / denom if denom > 0 else 0.0
        max_abs = max(max_abs, abs_err)
        if abs_err > tol_abs:  # the looser of the two rules applies per element
            max_rel = max(max_rel, rel_err)
            if rel_err > tol_rel:
                ok = False
    return CheckResult(name=name, max_rel=max_rel, max_abs=max_abs,
                       tol_rel=tol_rel, tol_abs=tol_abs, passed=ok)


def _check_layer(layer, x: np.ndarray, rng: np.random.Generator, name: str) -> CheckResult:
    y, cache = layer.forward(x)
    probe = rng.standard_normal(y.shape).astype(np.float32)

    def scalar() -> float:
        # float64 promotion drives the identical code path at full precision,
        # keeping finite differences meaningful at the 1e-3 step
        out, _ = layer.forward(x.astype(np.float64))
        return dot64(out, probe)

    dx, grads = layer.backward(cache, probe)
    arrays = [x] + [layer.params()[k] for k in sorted(layer.params())]
    analytic = [dx] + [grads[k] for k in sorted(layer.params())]
    return _fd_check(scalar, arrays, analytic, LAYER_TOL_REL, LAYER_TOL_ABS, name)


def gradcheck_layers(seed: int = 0) -> list[CheckResult]:
    """Isolated finite-difference checks for every layer kind and the
    deterministic gate."""
    from .gating import gate_forward_eval, product_backward
    from .layers import Conv2d, Dense, L2Norm, MaxPool2, ReLU, Sigmoid

    results = []
    rng = make_rng(seed, "gradcheck-layers")

    def fresh(shape):
        return _spread_values(rng, int(np.prod(shape))).reshape(shape)

    conv = Conv2d(3, 4, kernel_size=3, padding=1, rng=rng)
    results.append(_check_layer(conv, fresh((2, 3, 6, 6)), rng, "layer:conv2d"))

    dense = Dense(12, 5, rng=rng)
    results.append(_check_layer(dense, fresh((2, 3, 2, 2)), rng, "layer:dense"))

    results.append(_check_layer(ReLU(), fresh((2, 3, 4, 4)), rng, "layer:relu"))
    results.append(_check_layer(MaxPool2(), fresh((2, 3, 4, 4)), rng, "layer:maxpool2"))
    results.append(_check_layer(Sigmoid(), fresh((2, 3, 4, 4)), rng, "layer:sigmoid"))
    results.append(_check_layer(L2Norm(), fresh((2, 3, 4, 4)), rng, "layer:l2norm"))

    # deterministic gate: both dx and the attention gradient dp
    x = fresh((2, 3, 4, 4))
    p = rng.uniform(0.05, 0.95, (2, 1, 4, 4)).astype(np.float32)
    probe = rng.standard_normal(x.shape).astype(np.float32)

    def gate_scalar() -> float:
        return dot64(gate_forward_eval(x.astype(np.float64), p), probe)

    dx, dp = product_backward(x, p, probe)
    results.append(_fd_check(gate_scalar, [x, p], [dx, dp],
                             LAYER_TOL_REL, LAYER_TOL_ABS, "gate:product"))
    return results


def gradcheck_network(seed: int = 0, n_params: int = 20,
                      config: NetworkConfig | None = None) -> list[CheckResult]:
    """Finite differences through the composed eval-mode (deterministic gate)
    network at sampled parameter coordinates, with the attention head sampled
    separately as well."""
    if config is None:
        config = NetworkConfig(gate_mode="product", attention_source="learned_head")
    else:
        config = dataclasses.replace(config, gate_mode="product",
                                     attention_source="learned_head")
    net = build_network(config, make_rng(seed, "gradcheck-net"))
    rng = make_rng(seed, "gradcheck-net-data")
    images = rng.random((2, config.in_channels, config.in_h, config.in_w)).astype(np.float32)
    images64 = images.astype(np.float64)

    emb, trace = embed(net, images, "eval")
    probe = rng.standard_normal(emb.shape).astype(np.float32)
    grads = network_backward(net, trace, probe)
    names = list(net_params(net))

    # swap every parameter for a float64 shadow so the probe perturbations are
    # exact; the analytic gradients above came from the production float32 run
    originals = {(id(layer), key): (layer, key, layer.params()[key])
                 for _, layer, key in param_items(net)}
    for layer, key, arr in originals.values():
        setattr(layer, key, arr.astype(np.float64))
    try:
        params = net_params(net)

        def scalar() -> float:
            out, _ = embed(net, images64, "eval")
            return dot64(out, probe)

        arrays = [params[n] for n in names]
        analytic = [grads[n] for n in names]
        sizes = np.array([a.size for a in arrays])
        offsets = np.concatenate([[0], np.cumsum(sizes)])

        def to_coords(global_idx: np.ndarray) -> list[tuple[int, int]]:
            coords = []
            for g in global_idx:
                ai = int(np.searchsorted(offsets, g, side="right") - 1)
                coords.append((ai, int(g - offsets[ai])))
            return coords

        pick = make_rng(seed, "gradcheck-pick")
        all_coords = to_coords(pick.choice(int(sizes.sum()),
                                           size=min(n_params, int(sizes.sum())),
                                           replace=False))
        results = [_fd_check(scalar, arrays, analytic, NETWORK_TOL_REL, NETWORK_TOL_ABS,
                             f"network:{n_params}-sampled-params", coords=all_coords,
                             step=NETWORK_FD_STEP)]

        head_idx = [i for i, n in enumerate(names) if n.startswith("head.")]
        head_sizes = sizes[head_idx]
        head_offsets = np.concatenate([[0], np.cumsum(head_sizes)])
        picked = pick.choice(int(head_sizes.sum()), size=min(5, int(head_sizes.sum())),
                             replace=False)
        head_coords = []
        for g in picked:
            hi = int(np.searchsorted(head_offsets, g, side="right") - 1)
            head_coords.append((head_idx[hi], int(g - head_offsets[hi])))
        results.append(_fd_check(scalar, arrays, analytic, NETWORK_TOL_REL, NETWORK_TOL_ABS,
                                 "network:attention-head-params", coords=head_coords,
                                 step=NETWORK_FD_STEP))
    finally:
        for layer, key, arr in originals.values():
            setattr(layer, key, arr)
    return results


def gradcheck(seed: int = 0, scope: str = "all", n_params: int = 20,
              config: NetworkConfig | None = None) -> GradcheckReport:
    if scope not in ("layer", "network", "all"):
        raise ValueError(f"scope must be 'layer', 'network' or 'all', got {scope!r}")
    checks: list[CheckResult] = []
    if scope in ("layer", "all"):
        checks.extend(gradcheck_layers(seed))
    if scope in ("network", "all"):
        checks.extend(gradcheck_network(seed, n_params=n_params, config=config))
    return GradcheckReport(checks=checks)
