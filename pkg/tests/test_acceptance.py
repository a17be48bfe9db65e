"""Acceptance suite: one test per release criterion, each printing a PASS line
with its measured numbers. Criteria 6 and 7 train the pinned desk benchmark
(64 items x 4 consumers, 5 seeds per gate mode) and together stay well under
their 15-minute budgets on a laptop-class machine.
"""

import json
import time

import numpy as np
import pytest

from vamkit.cli import main
from vamkit.data import generate_dataset, load_dataset
from vamkit.gating import (gate_forward_eval, impdrop_backward_p, impdrop_forward_train,
                           impdrop_sample_mask, product_backward)
from vamkit.network import NetworkConfig
from vamkit.retrieval import Gallery, GalleryEntry, run_ablation, topk_search
from vamkit.seeding import make_rng
from vamkit.training import TrainConfig, gradcheck

# pinned desk benchmark (criteria 6 and 7)
BENCH_ITEMS = 64
BENCH_CONSUMERS = 4
BENCH_EXTENTS = (32, 32)
BENCH_DATA_SEED = 42
BENCH_TRAIN_SEEDS = [1, 2, 3, 4, 5]
BENCH_EPOCHS = 20
BENCH_OCCLUSION = 0.6


def report(criterion: str, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: PASS ({detail})")


@pytest.fixture(scope="module")
def bench_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench") / "ds"
    generate_dataset(root, n_items=BENCH_ITEMS, consumers_per_item=BENCH_CONSUMERS,
                     extents=BENCH_EXTENTS, seed=BENCH_DATA_SEED,
                     occlusion_prob=BENCH_OCCLUSION)
    return load_dataset(root)


def test_criterion_1_gating_exactness():
    """Support law + degenerate agreement on 1000 seeded random tensors."""
    start = time.time()
    rng = make_rng(1, "acceptance-gating")
    for trial in range(1000):
        x = (rng.random((1, 4, 3, 3)) * 8 - 4).astype(np.float32)
        p = rng.random((1, 1, 3, 3)).astype(np.float32)
        mask = impdrop_sample_mask(p, 4, rng)
        y = impdrop_forward_train(x, mask)
        assert np.all((y == 0.0) | (y == x)), f"support law broke at trial {trial}"

        p_binary = (rng.random((1, 1, 3, 3)) < 0.5).astype(np.float32)
        mask_b = impdrop_sample_mask(p_binary, 4, rng)
        y_train = impdrop_forward_train(x, mask_b)
        y_eval = gate_forward_eval(x, p_binary)
        assert y_train.tobytes() == y_eval.tobytes(), f"degenerate mismatch at {trial}"
    elapsed = time.time() - start
    assert elapsed < 10.0
    report("1 gating-exactness", f"1000 tensors, {elapsed:.1f}s")


def test_criterion_2_expectation_law():
    """Mean of 1e4 stochastic forwards matches the deterministic eval forward
    within 4*|x|*sqrt(p(1-p))/100 per element on a (1, 8, 4, 4) tensor."""
    start = time.time()
    M = 10_000
    x = (make_rng(2, "x").random((1, 8, 4, 4)) * 4 - 2).astype(np.float32)
    p = make_rng(2, "p").random((1, 1, 4, 4)).astype(np.float32)
    rng = make_rng(2, "stream")
    acc = np.zeros(x.shape, np.float64)
    for _ in range(M):
        acc += impdrop_forward_train(x, impdrop_sample_mask(p, 8, rng))
    mean = acc / M
    target = gate_forward_eval(x, p).astype(np.float64)
    bound = 4.0 * np.abs(x) * np.sqrt(p * (1.0 - p)) / 100.0
    gap = np.abs(mean - target)
    assert np.all(gap <= bound + 1e-12)
    elapsed = time.time() - start
    assert elapsed < 30.0
    report("2 expectation-law", f"max|gap|={gap.max():.5f}, {elapsed:.1f}s")


def test_criterion_3_gradient_oracles():
    """Layer FD at rel 1e-3; product-gate FD (dx and dp) at rel 1e-3; composed
    eval-mode network FD over 20 sampled parameters at rel 1e-2."""
    start = time.time()
    rep = gradcheck(seed=0, scope="all", n_params=20)
    assert rep.passed, rep.format()
    gate = [c for c in rep.checks if c.name == "gate:product"]
    network = [c for c in rep.checks if c.name.startswith("network:")]
    assert gate and network
    elapsed = time.time() - start
    assert elapsed < 120.0
    worst = max(c.max_rel for c in rep.checks)
    report("3 gradient-oracles", f"{len(rep.checks)} checks, worst rel {worst:.2e}, "
                                 f"{elapsed:.1f}s")


def test_criterion_4_surrogate_identity():
    """Stochastic-gate attention gradient bit-equals the product gradient on
    100 random (x, dy) pairs."""
    rng = make_rng(4, "surrogate")
    for trial in range(100):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 9)),
                 int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        x = rng.standard_normal(shape).astype(np.float32)
        dy = rng.standard_normal(shape).astype(np.float32)
        p = rng.random((shape[0], 1, shape[2], shape[3])).astype(np.float32)
        dp_a = impdrop_backward_p(x, dy)
        _, dp_b = product_backward(x, p, dy)
        assert dp_a.tobytes() == dp_b.tobytes(), f"bit mismatch at trial {trial}"
    report("4 surrogate-identity", "100 pairs bit-identical")


def test_criterion_5_retrieval_oracle():
    """topk_search matches an independent brute-force sort on 50 galleries."""
    rng = make_rng(5, "retrieval")
    for trial in range(50):
        n = int(rng.integers(2, 101))
        dim = int(rng.integers(2, 17))
        vecs = rng.standard_normal((n, dim)).astype(np.float32)
        query = rng.standard_normal(dim).astype(np.float32)
        entries = [GalleryEntry(image_id=f"g{i:03d}", item_id=f"it{i}", vector=vecs[i])
                   for i in range(n)]
        gallery = Gallery(entries=entries, dim=dim)
        k = int(rng.integers(1, n + 1))

        scored = sorted((float(((vecs[i].astype(np.float64) -
                                 query.astype(np.float64)) ** 2).sum()), f"g{i:03d}")
                        for i in range(n))
        expected = [gid for _, gid in scored][:k]
        got = topk_search(gallery, query, k).ranked_ids
        assert got == expected, f"trial {trial}: {got[:5]} != {expected[:5]}"
    report("5 retrieval-oracle", "50 galleries exact")


def bench_config(gate_mode: str, seed: int, **overrides) -> TrainConfig:
    kwargs = dict(epochs=BENCH_EPOCHS, batch_triplets=16, learning_rate=0.05,
                  momentum=0.9, margin=0.2, seed=seed, negatives_per_pair=2,
                  network=NetworkConfig(gate_mode=gate_mode,
                                        attention_source="oracle_mask"))
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def test_criterion_6_trend_attention_helps(bench_dataset):
    """Mean top-5 over 5 seeds: stochastic gating with oracle attention beats
    the ungated baseline by a positive margin.

    Fixture recorded at first green run (data seed 42, occlusion 0.6, train
    seeds 1-5, 20 epochs): impdrop mean top-5 = 0.9750, none = 0.7820.
    """
    start = time.time()
    report6 = run_ablation(bench_dataset, bench_config("impdrop", 0),
                           modes=["impdrop", "none"], seeds=BENCH_TRAIN_SEEDS, ks=[5])
    means = {m["mode"]: m["mean"] for m in report6.means if m["k"] == 5}
    elapsed = time.time() - start
    assert elapsed < 15 * 60
    assert means["impdrop"] > means["none"], means
    report("6 trend-attention-helps",
           f"top-5 impdrop {means['impdrop']:.4f} > none {means['none']:.4f}, "
           f"{elapsed:.0f}s")


def test_criterion_7_trend_impdrop_robustness(bench_dataset):
    """Mean top-20 over 5 seeds with train_fraction=0.1 and enlarged margin:
    stochastic gating is at least as accurate as the deterministic product.

    The 8-negatives-per-pair schedule hammers the 7 training items hard enough
    that the deterministic gate co-adapts; measured fixture at first green run
    (data seed 42, occlusion 0.6, train seeds 1-5, 40 epochs):
    impdrop mean top-20 = 0.8867, product = 0.8492, every seed >= product
    except none (5/5 positive diffs).
    """
    start = time.time()
    report7 = run_ablation(bench_dataset,
                           bench_config("impdrop", 0, train_fraction=0.1, margin=0.5,
                                        epochs=40, negatives_per_pair=8),
                           modes=["impdrop", "product"], seeds=BENCH_TRAIN_SEEDS,
                           ks=[20])
    means = {m["mode"]: m["mean"] for m in report7.means if m["k"] == 20}
    elapsed = time.time() - start
    assert elapsed < 15 * 60
    assert means["impdrop"] >= means["product"], means
    report("7 trend-impdrop-robustness",
           f"top-20 impdrop {means['impdrop']:.4f} >= product {means['product']:.4f}, "
           f"{elapsed:.0f}s")


def test_criterion_8_reproducibility(tmp_path):
    """cmd_train twice with one config+seed: identical metrics.jsonl losses."""
    data_dir = tmp_path / "ds"
    generate_dataset(data_dir, n_items=4, consumers_per_item=2, extents=(32, 32), seed=3)
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"epochs": 3, "negatives_per_pair": 1,
                                  "batch_triplets": 8, "seed": 11}))
    sequences = []
    for name in ("run_a", "run_b"):
        code = main(["train", "--data", str(data_dir), "--config", str(config),
                     "--out", str(tmp_path / name)])
        assert code == 0
        lines = (tmp_path / name / "metrics.jsonl").read_text().splitlines()
        sequences.append([json.loads(l)["mean_loss"] for l in lines])
    assert sequences[0] == sequences[1]
    report("8 reproducibility", f"loss sequence {sequences[0]}")
