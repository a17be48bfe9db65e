"""Gallery embedding, exact Euclidean top-k search, top-k accuracy, and the
gate-mode ablation runner.

Queries are consumer images against a shop-image gallery (cross-domain task);
the in-shop task searches shop images against the other shop images of the
same item set, with the query's own image excluded. Comparisons run on squared
distances (rank-equivalent); ties break on the smaller image id so rankings
are canonical regardless of gallery insertion order.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import OracleMapCache, batch_images
from .gating import GATE_MODES
from .network import EmbeddingNet, config_hash, embed
from .training import TrainConfig, train

EMBED_CHUNK = 64


@dataclass
class GalleryEntry:
    image_id: str
    item_id: str
    vector: np.ndarray


@dataclass
class Gallery:
    entries: list[GalleryEntry]
    dim: int

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in gallery")
        if any(e.vector.size != self.dim for e in self.entries):
            raise ValueError("gallery embeddings have mixed lengths")
        self._ids = np.array(ids) if ids else np.empty(0, dtype=str)
        self._matrix = (np.stack([e.vector for e in self.entries]).astype(np.float64)
                        if self.entries else np.zeros((0, self.dim)))

    def __len__(self):
        return len(self.entries)


@dataclass
class RetrievalResult:
    query_id: str
    ranked_ids: list[str]
    distances: list[float]


def _embed_eval(net: EmbeddingNet, ds, ids: list[str], threads: int = 1) -> np.ndarray:
    oracle = (OracleMapCache(ds, net.feature_hw)
              if net.config.attention_source == "oracle_mask" else None)
    chunks = [ids[i:i + EMBED_CHUNK] for i in range(0, len(ids), EMBED_CHUNK)]

    def one(chunk):
        mask = oracle.batch(chunk) if oracle is not None else None
        vecs, _ = embed(net, batch_images(ds, chunk), "eval", oracle_mask=mask)
        return vecs

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, chunks))
    else:
        parts = [one(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def build_gallery(net: EmbeddingNet, ds, threads: int = 1) -> Gallery:
    """Embed every shop image (eval mode); deterministic for a fixed checkpoint."""
    manifest = getattr(ds, "manifest", ds)
    ids = sorted(sid for it in ds.items for sid in it.shop)
    if not ids:
        raise ValueError("empty gallery split: no shop images")
    vecs = _embed_eval(net, ds, ids, threads=threads)
    entries = [GalleryEntry(image_id=i, item_id=manifest.item_of(i), vector=vecs[j])
               for j, i in enumerate(ids)]
    return Gallery(entries=entries, dim=vecs.shape[1])


def topk_search(gallery: Gallery, query: np.ndarray, k: int, query_id: str = "",
                exclude_id: str | None = None) -> RetrievalResult:
    """Exact k nearest gallery entries by Euclidean distance, ties by image id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.size != gallery.dim:
        raise ValueError(f"embedding length mismatch: query {q.size} vs gallery {gallery.dim}")
    matrix = gallery._matrix
    ids = gallery._ids
    if exclude_id is not None:
        keep = ids != exclude_id
        matrix = matrix[keep]
        ids = ids[keep]
        if ids.size == 0:
            raise ValueError("empty gallery after excluding the query's own image")
    d2 = ((matrix - q[None, :]) ** 2).sum(axis=1)
    order = np.lexsort((ids, d2))[:min(k, ids.size)]
    return RetrievalResult(query_id=query_id,
                           ranked_ids=[str(i) for i in ids[order]],
                           distances=[float(np.sqrt(d2[i])) for i in order])


def topk_accuracy(results: list[RetrievalResult], ds, k: int) -> float:
    """Fraction of queries whose top-k contains an image of the query's item.

    Raises if any query's item has no gallery image to find (protocol
    violation), listing the offending queries.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not results:
        raise ValueError("no retrieval results")
    manifest = getattr(ds, "manifest", ds)
    shop_by_item = {it.id: set(it.shop) for it in manifest.items}
    violations = []
    hits = 0
    for res in results:
        item = manifest.item_of(res.query_id)
        pool = shop_by_item.get(item, set()) - {res.query_id}
        if not pool:
            violations.append(res.query_id)
            continue
        top = res.ranked_ids[:k]
        if any(manifest.item_of(rid) == item for rid in top):
            hits += 1
    if violations:
        raise ValueError(f"query item absent from gallery for queries: {sorted(violations)}")
    return hits / len(results)


def evaluate(net: EmbeddingNet, ds, ks: list[int], task: str = "c2s",
             threads: int = 1) -> tuple[dict[int, float], list[RetrievalResult]]:
    """Top-k accuracy at each k; a single ranking at max(ks) serves all of them."""
    if task not in ("c2s", "inshop"):
        raise ValueError(f"task must be 'c2s' or 'inshop', got {task!r}")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive integers")
    manifest = getattr(ds, "manifest", ds)
    gallery = build_gallery(net, ds, threads=threads)
    if task == "c2s":
        query_ids = sorted(sid for it in ds.items for sid in it.consumer)
    else:
        query_ids = sorted(sid for it in ds.items for sid in it.shop)
    if not query_ids:
        raise ValueError(f"no query images for task {task!r}")
    vecs = _embed_eval(net, ds, query_ids, threads=threads)
    kmax = ks[-1]
    results = []
    for j, qid in enumerate(query_ids):
        exclude = qid if task == "inshop" else None
        results.append(topk_search(gallery, vecs[j], kmax, query_id=qid, exclude_id=exclude))
    accuracies = {k: topk_accuracy(results, manifest, k) for k in ks}
    return accuracies, results


@dataclass
class AblationReport:
    config_hash: str
    rows: list[dict]
    means: list[dict]

    def to_json(self) -> str:
        return json.dumps({"config_hash": self.config_hash, "rows": self.rows,
                           "means": self.means}, indent=2, sort_keys=True)

    def format_table(self) -> str:
        ks = sorted({row["k"] for row in self.rows})
        header = f"{'mode':>10} {'seed':>6}" + "".join(f" {'top-' + str(k):>9}" for k in ks)
        lines = [header, "-" * len(header)]
        cells: dict[tuple[str, int], dict[int, float]] = {}
        order: list[tuple[str, int]] = []
        for row in self.rows:
            key = (row["mode"], row["seed"])
            if key not in cells:
                cells[key] = {}
                order.append(key)
            cells[key][row["k"]] = row["accuracy"]
        for mode, seed in order:
            vals = "".join(f" {cells[(mode, seed)][k]:>9.4f}" for k in ks)
            lines.append(f"{mode:>10} {seed:>6}{vals}")
        lines.append("-" * len(header))
        mean_cells: dict[str, dict[int, tuple[float, float]]] = {}
        mean_order: list[str] = []
        for m in self.means:
            if m["mode"] not in mean_cells:
                mean_cells[m["mode"]] = {}
                mean_order.append(m["mode"])
            mean_cells[m["mode"]][m["k"]] = (m["mean"], m["stddev"])
        for mode in mean_order:
            vals = "".join(f" {mean_cells[mode][k][0]:>9.4f}" for k in ks)
            lines.append(f"{mode:>10} {'mean':>6}{vals}")
        return "\n".join(lines)


def run_ablation(ds, base_config: TrainConfig, modes: list[str], seeds: list[int],
                 ks: list[int], threads: int = 1) -> AblationReport:
    """Train and evaluate one run per (gate mode, seed); deterministic."""
    for mode in modes:
        if mode not in GATE_MODES:
            raise ValueError(f"unknown gate mode {mode!r}")
    if not modes or not seeds:
        raise ValueError("need at least one mode and one seed")
    ks = sorted(set(int(k) for k in ks))
    payload = {"config": base_config.to_dict(), "modes": list(modes),
               "seeds": [int(s) for s in seeds], "ks": ks}
    rows = []
    for mode in modes:
        for seed in seeds:
            cfg = dataclasses.replace(
                base_config, seed=int(seed),
                network=dataclasses.replace(base_config.network, gate_mode=mode))
            result = train(ds, cfg)
            accs, _ = evaluate(result.net, ds, ks, task=base_config.task, threads=threads)
            for k in ks:
                rows.append({"mode": mode, "seed": int(seed), "k": k,
                             "accuracy": accs[k]})
    means = []
    for mode in modes:
        for k in ks:
            vals = np.array([r["accuracy"] for r in rows
                             if r["mode"] == mode and r["k"] == k])
            means.append({"mode": mode, "k": k, "mean": float(vals.mean()),
                          "stddev": float(vals.std())})
    return AblationReport(config_hash=config_hash(payload), rows=rows, means=means)
