"""Synthetic multi-scale toy datasets.

Two kinds of 256x256 base regions are generated:

* ``micro`` -- every region is sprinkled with small bright speckles;
  positives have a few of them replaced by white crosses. A speckle lights
  the same number of pixels as a cross in every 2x2 block, so the 2x and 4x
  box-mean renderings (10x, 5x) cannot tell them apart; only 20x can.
* ``macro`` -- every region holds one large bright blob: a circle for
  negatives, an elongated ellipse for positives. The shape is only
  recognisable when the whole region is in view (5x).

Each region is tiled into co-centred patch triplets. The 20x patch is a
64x64 crop, the 10x patch a 128x128 crop box-averaged 2x, and the 5x patch
the whole region box-averaged 4x.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pgm

REGION = 256
PATCH = 64
SCALES = ("s20", "s10", "s5")
SCALE_FACTORS = {"s20": 1, "s10": 2, "s5": 4}
SPLITS = ("train", "val", "test")

# texture
TEXTURE_BASE = 128.0
TEXTURE_SIGMA = 20.0
TEXTURE_OCTAVES = ((16, 1.0), (8, 0.5))  # (lattice spacing px, amplitude)

# micro anomaly
CROSS_SIZE = 5
CROSS_COUNT = (3, 6)
CROSS_VALUE = 255
# every micro region holds this many small bright objects; in positives
# CROSS_COUNT of them are crosses, the rest (and all objects in negatives) are
# "speckles": crosses whose lit pixels are rearranged inside each 2x2 block
OBJECT_COUNT = (6, 10)

# macro anomaly
SHAPE_DIAMETER = (120.0, 200.0)
ELLIPSE_RATIO = (1.6, 2.4)
SHAPE_LIFT = 70.0

_KIND_CODE = {"micro": 1, "macro": 2}


@dataclass
class BaseRegion:
    region_id: int
    label: int
    split: str
    pixels: np.ndarray  # (256, 256) uint8


@dataclass
class PatchTriplet:
    patch_id: int
    region_id: int
    label: int
    center: tuple[int, int]  # (x, y) in base-region pixels
    images: dict[str, np.ndarray]  # scale -> (64, 64) uint8


@dataclass
class PatchRecord:
    id: int
    region_id: int
    split: str
    label: int
    cx: int
    cy: int
    path_s20: str
    path_s10: str
    path_s5: str

    def path(self, scale: str) -> str:
        return getattr(self, f"path_{scale}")


@dataclass
class DatasetManifest:
    kind: str
    seed: int
    records: list[PatchRecord] = field(default_factory=list)
    root: Path = Path(".")

    def split(self, name: str) -> list[PatchRecord]:
        return [r for r in self.records if r.split == name]

    def image_path(self, rec: PatchRecord, scale: str) -> Path:
        return self.root / rec.path(scale)


def _rng(seed: int, kind: str, region_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, _KIND_CODE[kind], region_id, stream])


# ---------------------------------------------------------------------------
# rendering primitives


def _interp_matrix(n: int, spacing: int) -> np.ndarray:
    """Rows map lattice values to n pixels with smoothstep interpolation."""
    m = n // spacing + 2
    pos = (np.arange(n) + 0.5) / spacing
    i0 = np.floor(pos).astype(int)
    t = pos - i0
    s = t * t * (3.0 - 2.0 * t)
    w = np.zeros((n, m))
    w[np.arange(n), i0] = 1.0 - s
    w[np.arange(n), i0 + 1] = s
    return w


def value_noise(rng: np.random.Generator, size: int = REGION) -> np.ndarray:
    """Two-octave value noise with mean 128 and std 20 (float, unclipped)."""
    acc = np.zeros((size, size))
    for spacing, amp in TEXTURE_OCTAVES:
        w = _interp_matrix(size, spacing)
        lattice = rng.uniform(-1.0, 1.0, size=(w.shape[1], w.shape[1]))
        acc += amp * (w @ lattice @ w.T)
    acc -= acc.mean()
    acc *= TEXTURE_SIGMA / acc.std()
    return acc + TEXTURE_BASE


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Mean over non-overlapping factor x factor blocks, rounded to uint8."""
    h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"image {img.shape} not divisible by {factor}")
    blocks = img.astype(np.float64).reshape(h // factor, factor, w // factor, factor)
    return np.clip(np.round(blocks.mean(axis=(1, 3))), 0, 255).astype(np.uint8)


def cross_mask(size: int = CROSS_SIZE) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[size // 2, :] = True
    m[:, size // 2] = True
    return m


def ellipse_mask(cx: float, cy: float, a: float, b: float, theta: float,
                 size: int = REGION) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


@dataclass
class ShapeParams:
    cx: float
    cy: float
    a: float  # semi-axis along theta
    b: float
    theta: float

    @property
    def ratio(self) -> float:
        return max(self.a, self.b) / min(self.a, self.b)


def sample_shape(rng: np.random.Generator, positive: bool) -> ShapeParams:
    # "diameter" is the equal-area diameter so both classes cover the same area
    d = rng.uniform(*SHAPE_DIAMETER)
    r = d / 2.0
    if positive:
        ratio = rng.uniform(*ELLIPSE_RATIO)
        theta = rng.uniform(0.0, np.pi)
    else:
        ratio, theta = 1.0, 0.0
    a, b = r * np.sqrt(ratio), r / np.sqrt(ratio)
    hx = np.sqrt((a * np.cos(theta)) ** 2 + (b * np.sin(theta)) ** 2)
    hy = np.sqrt((a * np.sin(theta)) ** 2 + (b * np.cos(theta)) ** 2)
    mx, my = min(hx, REGION / 2), min(hy, REGION / 2)
    cx = rng.uniform(mx, REGION - mx)
    cy = rng.uniform(my, REGION - my)
    return ShapeParams(cx, cy, a, b, theta)


def speckle_pixels(x: int, y: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Pixels (x, y) of a cross at (x, y) shuffled within each even-aligned 2x2 block.

    Two-pixel blocks use a diagonal pair, which a cross never produces.
    """
    half = CROSS_SIZE // 2
    lit = [(x + dx, y + dy) for dy in range(-half, half + 1) for dx in range(-half, half + 1)
           if cross_mask()[dy + half, dx + half]]
    blocks: dict[tuple[int, int], int] = {}
    for px, py in lit:
        key = (px // 2, py // 2)
        blocks[key] = blocks.get(key, 0) + 1
    out = []
    for (bx, by), count in sorted(blocks.items()):
        cells = [(2 * bx, 2 * by), (2 * bx + 1, 2 * by), (2 * bx, 2 * by + 1), (2 * bx + 1, 2 * by + 1)]
        if count == 2:
            chosen = [cells[0], cells[3]] if rng.random() < 0.5 else [cells[1], cells[2]]
        else:
            chosen = [cells[i] for i in sorted(rng.permutation(4)[:count])]
        out.extend(chosen)
    return out


def render_micro(seed: int, region_id: int, label: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Return the region pixels and the centres (x, y) of any crosses drawn."""
    img = value_noise(_rng(seed, "micro", region_id, 0))
    rng = _rng(seed, "micro", region_id, 1)
    n_objects = int(rng.integers(OBJECT_COUNT[0], OBJECT_COUNT[1] + 1))
    n_cross = int(rng.integers(CROSS_COUNT[0], CROSS_COUNT[1] + 1)) if label else 0
    half = CROSS_SIZE // 2
    mask = cross_mask()
    centers: list[tuple[int, int]] = []
    for k in range(n_objects):
        # keep the whole 2x2-block footprint inside the region
        x, y = (int(v) for v in rng.integers(half + 1, REGION - half - 1, size=2))
        if k < n_cross:
            img[y - half:y + half + 1, x - half:x + half + 1][mask] = CROSS_VALUE
            centers.append((x, y))
        else:
            for px, py in speckle_pixels(x, y, rng):
                img[py, px] = CROSS_VALUE
    return np.clip(np.round(img), 0, 255).astype(np.uint8), centers


def render_macro(seed: int, region_id: int, label: int) -> tuple[np.ndarray, ShapeParams]:
    img = value_noise(_rng(seed, "macro", region_id, 0))
    shape = sample_shape(_rng(seed, "macro", region_id, 1), bool(label))
    mask = ellipse_mask(shape.cx, shape.cy, shape.a, shape.b, shape.theta)
    img[mask] += SHAPE_LIFT
    return np.clip(np.round(img), 0, 255).astype(np.uint8), shape


# ---------------------------------------------------------------------------
# tiling


def grid_centers(grid_step: int, size: int = REGION) -> list[tuple[int, int]]:
    """Patch centres on a regular grid whose 20x window fits inside the region."""
    if grid_step <= 0 or grid_step > size:
        raise ValueError(f"grid step {grid_step} must be in 1..{size}")
    if size % grid_step:
        raise ValueError(f"grid step {grid_step} does not divide {size}")
    half = PATCH // 2
    coords = [grid_step // 2 + k * grid_step for k in range(size // grid_step)]
    coords = [c for c in coords if half <= c <= size - half]
    return [(x, y) for y in coords for x in coords]


def _window(center: int, width: int, size: int = REGION) -> int:
    """Clamped start offset of a window of ``width`` centred at ``center``."""
    start = center - width // 2
    return int(min(max(start, 0), size - width))


def render_triplet(pixels: np.ndarray, cx: int, cy: int) -> dict[str, np.ndarray]:
    out = {}
    for scale in SCALES:
        f = SCALE_FACTORS[scale]
        w = PATCH * f
        x0, y0 = _window(cx, w), _window(cy, w)
        crop = pixels[y0:y0 + w, x0:x0 + w]
        out[scale] = crop.copy() if f == 1 else box_downsample(crop, f)
    return out


def tile_region(region: BaseRegion, grid_step: int = 64, first_id: int = 0) -> list[PatchTriplet]:
    triplets = []
    for k, (cx, cy) in enumerate(grid_centers(grid_step)):
        triplets.append(PatchTriplet(
            patch_id=first_id + k,
            region_id=region.region_id,
            label=region.label,
            center=(cx, cy),
            images=render_triplet(region.pixels, cx, cy),
        ))
    return triplets


# ---------------------------------------------------------------------------
# datasets


def split_counts(n_regions_per_class: int) -> dict[str, int]:
    """Per-class region counts for train/val/test in a 3:1:2 ratio."""
    if n_regions_per_class < 1:
        raise ValueError("need at least one region per class")
    test = round(n_regions_per_class / 3)
    val = round(n_regions_per_class / 6)
    train = n_regions_per_class - test - val
    if train < 1:
        train, test = 1, n_regions_per_class - 1 - val
    return {"train": train, "val": val, "test": test}


def make_regions(kind: str, n_regions_per_class: int, seed: int,
                 counts: dict[str, int] | None = None) -> list[BaseRegion]:
    if kind not in _KIND_CODE:
        raise ValueError(f"unknown dataset kind {kind!r}")
    counts = counts or split_counts(n_regions_per_class)
    render = render_micro if kind == "micro" else render_macro
    regions = []
    rid = 0
    for split in SPLITS:
        for _ in range(counts[split]):
            for label in (0, 1):
                pixels, _ = render(seed, rid, label)
                regions.append(BaseRegion(rid, label, split, pixels))
                rid += 1
    return regions


def write_dataset(kind: str, regions: list[BaseRegion], seed: int, out_dir: str | os.PathLike,
                  grid_step: int = 64) -> DatasetManifest:
    root = Path(out_dir)
    (root / "patches").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(kind=kind, seed=seed, root=root)
    next_id = 0
    for region in regions:
        for t in tile_region(region, grid_step, first_id=next_id):
            paths = {}
            for scale in SCALES:
                rel = f"patches/{t.patch_id:06d}_{scale}.pgm"
                pgm.write(root / rel, t.images[scale])
                paths[f"path_{scale}"] = rel
            manifest.records.append(PatchRecord(
                id=t.patch_id, region_id=t.region_id, split=region.split, label=t.label,
                cx=t.center[0], cy=t.center[1], **paths,
            ))
            next_id += 1
    save_manifest(manifest, root / "manifest.jsonl")
    return manifest


def gen_micro(n_regions_per_class: int, seed: int, out_dir: str | os.PathLike,
              counts: dict[str, int] | None = None, grid_step: int = 64) -> DatasetManifest:
    regions = make_regions("micro", n_regions_per_class, seed, counts)
    return write_dataset("micro", regions, seed, out_dir, grid_step)


def gen_macro(n_regions_per_class: int, seed: int, out_dir: str | os.PathLike,
              counts: dict[str, int] | None = None, grid_step: int = 64) -> DatasetManifest:
    regions = make_regions("macro", n_regions_per_class, seed, counts)
    return write_dataset("macro", regions, seed, out_dir, grid_step)


# ---------------------------------------------------------------------------
# manifest I/O

_FIELDS = ("id", "region_id", "split", "label", "cx", "cy", "path_s20", "path_s10", "path_s5")


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps({k: getattr(rec, k) for k in _FIELDS}) + "\n")
    meta = {"kind": manifest.kind, "seed": manifest.seed, "count": len(manifest.records)}
    (path.parent / "dataset.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


class ManifestError(ValueError):
    pass


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    meta_path = path.parent / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"kind": "unknown", "seed": -1}
    manifest = DatasetManifest(kind=meta["kind"], seed=meta["seed"], root=path.parent)
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                rec = PatchRecord(**{k: raw[k] for k in _FIELDS})
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad record ({exc})") from exc
            if rec.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rec.id}")
            seen.add(rec.id)
            if check_files:
                for scale in SCALES:
                    p = manifest.image_path(rec, scale)
                    if not p.is_file():
                        raise ManifestError(f"missing patch file {p}")
            manifest.records.append(rec)
    return manifest
