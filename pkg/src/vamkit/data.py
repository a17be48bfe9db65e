"""Deterministic toy cross-domain dataset: clean "shop" renders, cluttered and
occasionally occluded "consumer" renders, and ground-truth foreground masks.

On disk: `manifest.json`, `images/<item>_<domain>_<k>.ppm` (binary P6),
`masks/<item>_<domain>_<k>.pgm` (binary P5), with per-file sha256 hashes in
the manifest. Pixels are quantized to 8 bits; the in-memory pipeline divides
by 255, so load(generate(...)) reproduces tensors bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gating import area_downsample
from .seeding import make_rng

MANIFEST_NAME = "manifest.json"
MIN_EXTENT = 16
SHAPE_KINDS = ("ellipse", "rect", "diamond", "tee")
SPLITS = ("train", "query", "gallery")
OCCLUSION_PROB = 0.3


@dataclass(frozen=True)
class ItemSpec:
    item_id: str
    shape_kind: str
    palette: tuple[tuple[float, float, float], tuple[float, float, float]]
    stripe_period: int
    stripe_angle: float
    base_scale: float
    aspect: float
    base_rotation: float


@dataclass
class ItemRecord:
    id: str
    shop: list[str] = field(default_factory=list)      # image ids (file stems)
    consumer: list[str] = field(default_factory=list)
    split: str = "train"


@dataclass
class DatasetManifest:
    seed: int
    extents: tuple[int, int]  # (h, w)
    items: list[ItemRecord]
    hashes: dict[str, str] = field(default_factory=dict)

    def item_of(self, image_id: str) -> str:
        return self._image_index()[image_id]

    def _image_index(self) -> dict[str, str]:
        if not hasattr(self, "_idx"):
            idx = {}
            for it in self.items:
                for sid in it.shop + it.consumer:
                    idx[sid] = it.id
            self._idx = idx
        return self._idx

    def gallery_ids(self) -> list[str]:
        return sorted(sid for it in self.items for sid in it.shop)

    def query_ids(self) -> list[str]:
        return sorted(sid for it in self.items for sid in it.consumer)


def image_rel_path(image_id: str) -> str:
    return f"images/{image_id}.ppm"


def mask_rel_path(image_id: str) -> str:
    return f"masks/{image_id}.pgm"


# ---------------------------------------------------------------------------
# PPM / PGM

def _write_pnm(path: Path, magic: bytes, payload: np.ndarray, w: int, h: int) -> None:
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    path.write_bytes(header + payload.tobytes())


def write_ppm(path, img_u8: np.ndarray) -> None:
    """img_u8: (3, h, w) uint8, written interleaved RGB."""
    c, h, w = img_u8.shape
    if c != 3 or img_u8.dtype != np.uint8:
        raise ValueError(f"ppm wants (3, h, w) uint8, got {img_u8.shape} {img_u8.dtype}")
    _write_pnm(Path(path), b"P6", np.ascontiguousarray(img_u8.transpose(1, 2, 0)), w, h)


def write_pgm(path, mask_u8: np.ndarray) -> None:
    """mask_u8: (1, h, w) uint8."""
    c, h, w = mask_u8.shape
    if c != 1 or mask_u8.dtype != np.uint8:
        raise ValueError(f"pgm wants (1, h, w) uint8, got {mask_u8.shape} {mask_u8.dtype}")
    _write_pnm(Path(path), b"P5", np.ascontiguousarray(mask_u8[0]), w, h)


def _parse_pnm(raw: bytes, magic: bytes, channels: int, source: str) -> np.ndarray:
    if not raw.startswith(magic):
        raise ValueError(f"bad magic in {source}: expected {magic.decode()}")
    # header = magic, width, height, maxval, one whitespace byte, then payload
    pos = len(magic)
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"short read: {source} (truncated header)")
        try:
            fields.append(int(raw[start:pos]))
        except ValueError:
            raise ValueError(f"corrupt header in {source}") from None
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255 or w < 1 or h < 1:
        raise ValueError(f"unsupported pnm parameters in {source}: {w}x{h} maxval={maxval}")
    need = w * h * channels
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise ValueError(f"short read: {source} ({len(payload)} of {need} payload bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(1, h, w).copy()
    return arr.reshape(h, w, channels).transpose(2, 0, 1).copy()


def read_ppm(path) -> np.ndarray:
    return _parse_pnm(Path(path).read_bytes(), b"P6", 3, str(path))


def read_pgm(path) -> np.ndarray:
    return _parse_pnm(Path(path).read_bytes(), b"P5", 1, str(path))


# ---------------------------------------------------------------------------
# Rendering

def _sample_item_spec(item_id: str, rng: np.random.Generator) -> ItemSpec:
    kind = str(rng.choice(SHAPE_KINDS))
    # two palette colors kept well apart so the stripes survive quantization
    while True:
        c0 = rng.uniform(0.05, 0.9, 3)
        c1 = rng.uniform(0.05, 0.9, 3)
        if np.abs(c0 - c1).sum() >= 0.45:
            break
    return ItemSpec(
        item_id=item_id,
        shape_kind=kind,
        palette=(tuple(float(v) for v in c0), tuple(float(v) for v in c1)),
        stripe_period=int(rng.integers(3, 7)),
        stripe_angle=float(rng.uniform(0.0, math.pi)),
        base_scale=float(rng.uniform(0.6, 0.85)),
        aspect=float(rng.uniform(0.7, 1.0)),
        base_rotation=float(rng.uniform(0.0, math.pi)),
    )


def _silhouette(kind: str, u: np.ndarray, v: np.ndarray, aspect: float) -> np.ndarray:
    va = v / aspect
    if kind == "ellipse":
        return u * u + va * va <= 1.0
    if kind == "rect":
        return (np.abs(u) <= 0.9) & (np.abs(va) <= 0.9)
    if kind == "diamond":
        return np.abs(u) / 1.25 + np.abs(va) / 1.25 <= 1.0
    if kind == "tee":
        torso = (np.abs(u) <= 0.5) & (va >= -0.9) & (va <= 0.9)
        sleeves = (np.abs(u) <= 1.1) & (va >= -0.9) & (va <= -0.3)
        return torso | sleeves
    raise ValueError(f"unknown shape kind {kind!r}")


def _stripe_texture(period: int, angle: float, palette, xs: np.ndarray,
                    ys: np.ndarray) -> np.ndarray:
    t = xs * math.cos(angle) + ys * math.sin(angle)
    band = (np.floor(t / period).astype(np.int64) % 2).astype(bool)
    pal = np.array(palette, dtype=np.float64)  # (2, 3)
    return np.where(band[None, :, :], pal[1][:, None, None], pal[0][:, None, None])


def render_sample(spec: ItemSpec, domain: str, extents: tuple[int, int],
                  rng: np.random.Generator,
                  occlusion_prob: float = OCCLUSION_PROB,
                  distractors: tuple[ItemSpec, ...] = ()) -> tuple[np.ndarray, np.ndarray, dict]:
    """Render one sample: (image (3,h,w) in [0,1], mask (1,h,w) in {0,1}, debug info).

    Consumer clutter rectangles wear the distractor items' stripe textures when
    given, so background actively mimics other catalog items.
    """
    h, w = extents
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    if domain == "shop":
        rot = spec.base_rotation
        scale = spec.base_scale
        ty = tx = 0.0
    elif domain == "consumer":
        rot = spec.base_rotation + rng.uniform(-0.9, 0.9)
        scale = spec.base_scale * rng.uniform(0.65, 1.25)
        ty = rng.uniform(-0.18, 0.18) * min(h, w)
        tx = rng.uniform(-0.18, 0.18) * min(h, w)
    else:
        raise ValueError(f"unknown domain {domain!r}")

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    s_px = scale * min(h, w) / 2.0
    dx = xs - cx - tx
    dy = ys - cy - ty
    u = (math.cos(rot) * dx + math.sin(rot) * dy) / s_px
    v = (-math.sin(rot) * dx + math.cos(rot) * dy) / s_px
    inside = _silhouette(spec.shape_kind, u, v, spec.aspect)

    # striped garment texture in pixel units so the period is visible
    garment = _stripe_texture(spec.stripe_period, spec.stripe_angle, spec.palette, xs, ys)

    if domain == "shop":
        background = np.full((3, h, w), 0.96, dtype=np.float64)
    else:
        background = np.empty((3, h, w), dtype=np.float64)
        background[:] = rng.uniform(0.2, 0.8, 3)[:, None, None]
        for j in range(int(rng.integers(4, 8))):
            ry0, rx0 = int(rng.integers(0, h)), int(rng.integers(0, w))
            rh = int(rng.integers(h // 4, max(h // 4 + 1, 3 * h // 4)))
            rw = int(rng.integers(w // 4, max(w // 4 + 1, 3 * w // 4)))
            if distractors:
                other = distractors[j % len(distractors)]
                patch = _stripe_texture(other.stripe_period, other.stripe_angle,
                                        other.palette, xs, ys)
                background[:, ry0:ry0 + rh, rx0:rx0 + rw] = \
                    patch[:, ry0:ry0 + rh, rx0:rx0 + rw]
            else:
                color = rng.uniform(0.0, 1.0, 3)
                background[:, ry0:ry0 + rh, rx0:rx0 + rw] = color[:, None, None]
        background += rng.uniform(-0.08, 0.08, (3, h, w))
        background = np.clip(background, 0.0, 1.0)

    img = np.where(inside[None, :, :], garment, background)

    occ_box = None
    if domain == "consumer" and inside.any() and rng.random() < occlusion_prob:
        rows = np.flatnonzero(inside.any(axis=1))
        cols = np.flatnonzero(inside.any(axis=0))
        by0, by1 = int(rows[0]), int(rows[-1]) + 1
        bx0, bx1 = int(cols[0]), int(cols[-1]) + 1
        bbox_area = (by1 - by0) * (bx1 - bx0)
        frac = rng.uniform(0.10, 0.25)
        ar = rng.uniform(0.5, 2.0)
        ow = max(1, int(round(math.sqrt(frac * bbox_area * ar))))
        oh = max(1, int(round(frac * bbox_area / ow)))
        ocy = int(rng.integers(by0, by1))
        ocx = int(rng.integers(bx0, bx1))
        oy0, oy1 = max(0, ocy - oh // 2), min(h, ocy - oh // 2 + oh)
        ox0, ox1 = max(0, ocx - ow // 2), min(w, ocx - ow // 2 + ow)
        if oy1 > oy0 and ox1 > ox0:
            img[:, oy0:oy1, ox0:ox1] = rng.uniform(0.0, 1.0, 3)[:, None, None]
            occ_box = (oy0, oy1, ox0, ox1)

    mask = inside.copy()
    if occ_box is not None:
        oy0, oy1, ox0, ox1 = occ_box
        mask[oy0:oy1, ox0:ox1] = False

    img32 = np.clip(img, 0.0, 1.0).astype(np.float32)
    mask32 = mask[None, :, :].astype(np.float32)
    return img32, mask32, {"silhouette": inside, "occluder": occ_box}


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Generate / load

def generate_dataset(out_dir, n_items: int, consumers_per_item: int,
                     extents: tuple[int, int] = (32, 32), seed: int = 0,
                     shops_per_item: int = 1,
                     occlusion_prob: float = OCCLUSION_PROB) -> DatasetManifest:
    """Write a full dataset under out_dir and return its manifest.

    Fully deterministic per seed: identical invocations produce byte-identical
    files (including the manifest).
    """
    if n_items < 2:
        raise ValueError(f"need at least 2 items, got {n_items}")
    if consumers_per_item < 1 or shops_per_item < 1:
        raise ValueError("need at least one image per domain per item")
    h, w = extents
    if h < MIN_EXTENT or w < MIN_EXTENT:
        raise ValueError(f"extents too small: {h}x{w} (minimum {MIN_EXTENT}x{MIN_EXTENT})")

    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    specs = [_sample_item_spec(f"item{i:03d}", make_rng(seed, "item", i))
             for i in range(n_items)]
    items: list[ItemRecord] = []
    hashes: dict[str, str] = {}
    for i in range(n_items):
        item_id = specs[i].item_id
        record = ItemRecord(id=item_id, split="train")
        for domain, count, bucket in (("shop", shops_per_item, record.shop),
                                      ("consumer", consumers_per_item, record.consumer)):
            for k in range(count):
                image_id = f"{item_id}_{domain}_{k}"
                rng = make_rng(seed, "render", i, domain, k)
                distractors = ()
                if domain == "consumer":
                    # clutter wears other items' textures; mild confusion by design
                    others = [j for j in range(n_items) if j != i]
                    picked = rng.choice(others, size=min(3, len(others)), replace=False)
                    distractors = tuple(specs[j] for j in picked)
                img, mask, _ = render_sample(specs[i], domain, (h, w), rng,
                                             occlusion_prob, distractors=distractors)
                img_path = root / image_rel_path(image_id)
                mask_path = root / mask_rel_path(image_id)
                write_ppm(img_path, quantize(img))
                write_pgm(mask_path, quantize(mask))
                hashes[image_rel_path(image_id)] = _sha256_file(img_path)
                hashes[mask_rel_path(image_id)] = _sha256_file(mask_path)
                bucket.append(image_id)
        items.append(record)

    manifest = DatasetManifest(seed=seed, extents=(h, w), items=items, hashes=hashes)
    (root / MANIFEST_NAME).write_text(manifest_to_json(manifest))
    return manifest


def manifest_to_json(manifest: DatasetManifest) -> str:
    doc = {
        "seed": manifest.seed,
        "extents": {"h": manifest.extents[0], "w": manifest.extents[1]},
        "items": [
            {
                "id": it.id,
                "shop": [image_rel_path(sid) for sid in it.shop],
                "consumer": [image_rel_path(sid) for sid in it.consumer],
                "split": it.split,
            }
            for it in manifest.items
        ],
        "hashes": manifest.hashes,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def _ids_from_paths(paths: list[str], item_id: str) -> list[str]:
    ids = []
    for p in paths:
        stem = Path(p).stem
        if not stem.startswith(item_id):
            raise ValueError(f"manifest entry {p!r} does not belong to item {item_id}")
        ids.append(stem)
    return ids


def manifest_from_json(text: str) -> DatasetManifest:
    doc = json.loads(text)
    items = []
    for entry in doc["items"]:
        split = entry.get("split", "train")
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r} for item {entry['id']}")
        items.append(ItemRecord(
            id=entry["id"],
            shop=_ids_from_paths(entry["shop"], entry["id"]),
            consumer=_ids_from_paths(entry["consumer"], entry["id"]),
            split=split,
        ))
    ext = doc["extents"]
    return DatasetManifest(seed=int(doc["seed"]), extents=(int(ext["h"]), int(ext["w"])),
                           items=items, hashes=dict(doc["hashes"]))


class Dataset:
    """A loaded dataset: manifest plus lazy, hash-verified image access."""

    channels = 3  # PPM images

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = {}

    @property
    def items(self):
        return self.manifest.items

    @property
    def extents(self) -> tuple[int, int]:
        return self.manifest.extents

    def item_of(self, image_id: str) -> str:
        return self.manifest.item_of(image_id)

    def _read(self, rel: str, parser) -> np.ndarray:
        key = rel
        if key in self._cache:
            return self._cache[key]
        path = self.root / rel
        if not path.is_file():
            raise ValueError(f"missing dataset file: {path}")
        arr = parser(path)  # parse first so truncation reports a short read
        digest = _sha256_file(path)
        expected = self.manifest.hashes.get(rel)
        if expected is not None and digest != expected:
            raise ValueError(f"hash mismatch for {path}: {digest} != manifest {expected}")
        self._cache[key] = arr
        return arr

    def image(self, image_id: str) -> np.ndarray:
        """(3, h, w) float32 in [0, 1]."""
        u8 = self._read(image_rel_path(image_id), read_ppm)
        return (u8.astype(np.float32) / 255.0)

    def mask(self, image_id: str) -> np.ndarray:
        """(1, h, w) float32 in [0, 1]."""
        u8 = self._read(mask_rel_path(image_id), read_pgm)
        return (u8.astype(np.float32) / 255.0)


def load_dataset(root) -> Dataset:
    """Parse the manifest and verify every referenced file exists."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ValueError(f"missing dataset manifest: {manifest_path}")
    manifest = manifest_from_json(manifest_path.read_text())
    for it in manifest.items:
        for sid in it.shop + it.consumer:
            for rel in (image_rel_path(sid), mask_rel_path(sid)):
                if not (root / rel).is_file():
                    raise ValueError(f"missing dataset file: {root / rel}")
    return Dataset(root, manifest)


class ArrayDataset:
    """In-memory dataset over image arrays, for the estimator front end.

    Labels group images into items; a domains array ("shop"/"consumer")
    splits each item's images across the two roles. Without domains, every
    image counts as a shop image of its item.
    """

    def __init__(self, images: np.ndarray, labels, domains=None, masks=None):
        n = images.shape[0]
        self.extents = (images.shape[2], images.shape[3])
        self.channels = images.shape[1]
        self._images: dict[str, np.ndarray] = {}
        self._masks: dict[str, np.ndarray] = {}
        records: dict[str, ItemRecord] = {}
        for i in range(n):
            image_id = f"s{i:05d}"
            label = str(labels[i])
            rec = records.setdefault(label, ItemRecord(id=label))
            domain = "shop" if domains is None else str(domains[i])
            if domain == "shop":
                rec.shop.append(image_id)
            elif domain == "consumer":
                rec.consumer.append(image_id)
            else:
                raise ValueError(f"domain must be 'shop' or 'consumer', got {domain!r}")
            self._images[image_id] = np.ascontiguousarray(images[i], dtype=np.float32)
            if masks is not None:
                self._masks[image_id] = np.ascontiguousarray(masks[i], dtype=np.float32)
        self.items = sorted(records.values(), key=lambda r: r.id)

    def item_of(self, image_id: str) -> str:
        for it in self.items:
            if image_id in it.shop or image_id in it.consumer:
                return it.id
        raise KeyError(image_id)

    def image(self, image_id: str) -> np.ndarray:
        return self._images[image_id]

    def mask(self, image_id: str) -> np.ndarray:
        if image_id not in self._masks:
            raise ValueError(f"no mask available for {image_id}")
        return self._masks[image_id]


class OracleMapCache:
    """Per-image attention maps at the feature grid, computed once per id."""

    def __init__(self, ds, feature_hw: tuple[int, int]):
        self.ds = ds
        self.feature_hw = feature_hw
        self._cache: dict[str, np.ndarray] = {}

    def get(self, image_id: str) -> np.ndarray:
        m = self._cache.get(image_id)
        if m is None:
            m = oracle_attention(self.ds.mask(image_id), self.feature_hw)
            self._cache[image_id] = m
        return m

    def batch(self, ids) -> np.ndarray:
        return np.stack([self.get(i) for i in ids])


def batch_images(ds, ids) -> np.ndarray:
    return np.stack([ds.image(i) for i in ids])


def oracle_attention(mask: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Area-average a foreground mask down to the feature grid, clamped to [0, 1].

    Accepts (h, w), (1, h, w) or (n, 1, h, w); returns the same rank.
    """
    arr = np.asarray(mask, dtype=np.float32)
    squeeze = 4 - arr.ndim
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ValueError(f"mask must be (h,w), (1,h,w) or (n,1,h,w), got {np.shape(mask)}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("mask values outside [0, 1]")
    out = area_downsample(arr, target_hw)
    for _ in range(squeeze):
        out = out[0]
    return out
