"""Label-free patch embedder: fixed hand-crafted descriptor + seeded projection.

Descriptor layout (160 values, intensities scaled to [0, 1]):

======= ====================================================================
0-79    4x4 grid of 16x16 cells, row-major; per cell: mean, std, max,
        mean |horizontal diff|, mean |vertical diff|
80-95   16-bin intensity histogram of the whole patch (bin width 16 grey
        levels), as fractions
96-143  same cells; per cell: min, median, and the lag-1 co-occurrence
        of the top grey-level bin (fraction of horizontal + vertical
        neighbour pairs with both pixels >= 240)
144-159 global: mean, std, max, mean |h diff|, mean |v diff|, the lag-1
        co-occurrence of the top grey-level bin over the whole patch (pairs
        that straddle cell borders included), the fraction of top-bin
        pixels with at least two top-bin 4-neighbours, then for bright-excess weights max(x - t, 0) at t = mean,
        mean + std/2, mean + std: weight mass, elongation 1 - l2/l1 and
        spread (l1 + l2) of the weighted coordinate covariance
======= ====================================================================

The descriptor is standardised with training-split statistics (z-scores
winsorised at +-8, so features that are almost constant in the training split
cannot blow up on held-out patches), projected to
``dim`` values by a matrix with i.i.d. N(0, 1/160) entries drawn from the
seed, and standardised again per output dimension (training split only).
Statistics are kept separately per scale.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container, pgm
from .toydata import PATCH, SCALES, SPLITS, DatasetManifest

DESC_DIM = 160
TOP_LEVEL = 240
# descriptor blocks; after z-scoring each block is scaled to equal total variance
BLOCKS = ((0, 80), (80, 96), (96, 144), (144, 160))
Z_CLIP = 8.0


def block_weights() -> np.ndarray:
    w = np.empty(DESC_DIM)
    for lo, hi in BLOCKS:
        w[lo:hi] = 1.0 / np.sqrt(hi - lo)
    return w


def _moments(w: np.ndarray) -> tuple[float, float, float]:
    """Mass, elongation and spread of a non-negative weight image."""
    total = w.sum()
    if total <= 0:
        return 0.0, 0.0, 0.0
    n = w.shape[0]
    c = (np.arange(n) + 0.5) / n
    py, px = w.sum(axis=1) / total, w.sum(axis=0) / total
    my, mx = py @ c, px @ c
    vyy = py @ (c - my) ** 2
    vxx = px @ (c - mx) ** 2
    vxy = ((c - my)[:, None] * (c - mx)[None, :] * w).sum() / total
    tr = vxx + vyy
    disc = np.sqrt(max((vxx - vyy) ** 2 / 4 + vxy * vxy, 0.0))
    l1, l2 = tr / 2 + disc, tr / 2 - disc
    elong = 1.0 - l2 / l1 if l1 > 0 else 0.0
    return total / w.size, elong, tr


def describe(image: np.ndarray) -> np.ndarray:
    """160-value descriptor of one 64x64 patch; see the module docstring."""
    img = np.asarray(image)
    if img.shape != (PATCH, PATCH):
        raise ValueError(f"expected a {PATCH}x{PATCH} patch, got {img.shape}")
    x = img.astype(np.float64) / 255.0
    out = np.empty(DESC_DIM)
    mu, sd = x.mean(), x.std()

    cells = x.reshape(4, 16, 4, 16).transpose(0, 2, 1, 3).reshape(16, 16, 16)
    dx = np.abs(np.diff(cells, axis=2))
    dy = np.abs(np.diff(cells, axis=1))
    out[:80] = np.stack([
        cells.mean(axis=(1, 2)),
        cells.std(axis=(1, 2)),
        cells.max(axis=(1, 2)),
        dx.mean(axis=(1, 2)),
        dy.mean(axis=(1, 2)),
    ], axis=1).reshape(-1)

    counts = np.bincount(np.asarray(img, dtype=np.int64).reshape(-1) // 16, minlength=16)
    out[80:96] = counts / img.size

    flat = cells.reshape(16, -1)
    top = np.asarray(img).reshape(4, 16, 4, 16).transpose(0, 2, 1, 3).reshape(16, 16, 16) >= TOP_LEVEL
    pairs = (top[:, :, 1:] & top[:, :, :-1]).sum(axis=(1, 2)) + (top[:, 1:, :] & top[:, :-1, :]).sum(axis=(1, 2))
    out[96:144] = np.stack([
        flat.min(axis=1),
        np.median(flat, axis=1),
        pairs / (2 * 16 * 15),
    ], axis=1).reshape(-1)

    bright = np.asarray(img) >= TOP_LEVEL
    n_pairs = (bright[:, 1:] & bright[:, :-1]).sum() + (bright[1:, :] & bright[:-1, :]).sum()
    padded = np.pad(bright, 1).astype(np.int64)
    neighbours = padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]
    g = [mu, sd, x.max(),
         np.abs(np.diff(x, axis=1)).mean(), np.abs(np.diff(x, axis=0)).mean(),
         n_pairs / (2 * PATCH * (PATCH - 1)), ((neighbours >= 2) & bright).mean()]
    for t in (mu, mu + sd / 2, mu + sd):
        g.extend(_moments(np.maximum(x - t, 0.0)))
    out[144:] = g
    return out


def projection_matrix(seed: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xE3B])
    return rng.normal(0.0, np.sqrt(1.0 / DESC_DIM), size=(DESC_DIM, dim))


def _std_guard(s: np.ndarray) -> np.ndarray:
    return np.where(s > 0, s, 1.0)


@dataclass
class EmbedderSpec:
    seed: int
    dim: int
    projection: np.ndarray
    desc_mean: dict[str, np.ndarray] = field(default_factory=dict)
    desc_std: dict[str, np.ndarray] = field(default_factory=dict)
    out_mean: dict[str, np.ndarray] = field(default_factory=dict)
    out_std: dict[str, np.ndarray] = field(default_factory=dict)

    def project(self, desc: np.ndarray, scale: str) -> np.ndarray:
        z = np.clip((desc - self.desc_mean[scale]) / self.desc_std[scale], -Z_CLIP, Z_CLIP)
        return (z * block_weights()) @ self.projection

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"projection": self.projection}
        for s in SCALES:
            out[f"desc_mean_{s}"] = self.desc_mean[s]
            out[f"desc_std_{s}"] = self.desc_std[s]
            out[f"out_mean_{s}"] = self.out_mean[s]
            out[f"out_std_{s}"] = self.out_std[s]
        return out

    @classmethod
    def from_tensors(cls, seed: int, t: dict[str, np.ndarray]) -> "EmbedderSpec":
        spec = cls(seed=seed, dim=t["projection"].shape[1], projection=t["projection"])
        for s in SCALES:
            spec.desc_mean[s] = t[f"desc_mean_{s}"]
            spec.desc_std[s] = t[f"desc_std_{s}"]
            spec.out_mean[s] = t[f"out_mean_{s}"]
            spec.out_std[s] = t[f"out_std_{s}"]
        return spec


def fit_spec(train_desc: dict[str, np.ndarray], seed: int, dim: int = 64) -> EmbedderSpec:
    """Normalisation statistics from training-split descriptors, per scale."""
    spec = EmbedderSpec(seed=seed, dim=dim, projection=projection_matrix(seed, dim))
    for s in SCALES:
        d = train_desc[s]
        spec.desc_mean[s] = d.mean(axis=0)
        spec.desc_std[s] = _std_guard(d.std(axis=0))
        y = spec.project(d, s)
        spec.out_mean[s] = y.mean(axis=0)
        spec.out_std[s] = _std_guard(y.std(axis=0))
    return spec


def embed_patch(image: np.ndarray, spec: EmbedderSpec, scale: str) -> np.ndarray:
    y = spec.project(describe(image)[None, :], scale)[0]
    return (y - spec.out_mean[scale]) / spec.out_std[scale]


# ---------------------------------------------------------------------------


@dataclass
class FeatureSet:
    """Per-patch embeddings for every scale, plus bookkeeping columns.

    ``feats`` has shape (N, S, D) with scales ordered as ``scales``.
    """

    feats: np.ndarray
    labels: np.ndarray
    region_ids: np.ndarray
    patch_ids: np.ndarray
    centers: np.ndarray  # (N, 2) as (x, y)
    split: np.ndarray  # index into SPLITS
    scales: tuple[str, ...] = SCALES

    def __len__(self) -> int:
        return self.feats.shape[0]

    def subset(self, mask: np.ndarray) -> "FeatureSet":
        return FeatureSet(self.feats[mask], self.labels[mask], self.region_ids[mask],
                          self.patch_ids[mask], self.centers[mask], self.split[mask], self.scales)

    def of_split(self, name: str) -> "FeatureSet":
        return self.subset(self.split == SPLITS.index(name))

    def with_scales(self, scales: tuple[str, ...]) -> "FeatureSet":
        idx = [self.scales.index(s) for s in scales]
        return FeatureSet(self.feats[:, idx, :], self.labels, self.region_ids, self.patch_ids,
                          self.centers, self.split, tuple(scales))

    def groups(self) -> np.ndarray:
        return np.unique(self.region_ids)

    def group_label(self, gid) -> int:
        return int(self.labels[np.flatnonzero(self.region_ids == gid)[0]])


def _read_patch(manifest: DatasetManifest, rec, scale: str) -> np.ndarray:
    path = manifest.image_path(rec, scale)
    try:
        img = pgm.read(path)
    except (OSError, pgm.PGMError) as exc:
        raise ValueError(f"cannot read patch image {path}: {exc}") from exc
    if img.shape != (PATCH, PATCH):
        raise ValueError(f"patch image {path} has shape {img.shape}")
    return img


def embed_dataset(manifest: DatasetManifest, seed: int, dim: int = 64,
                  out_path: str | os.PathLike | None = None) -> tuple[FeatureSet, EmbedderSpec]:
    """Embed every patch in manifest order; optionally persist the cache."""
    recs = manifest.records
    desc = {s: np.empty((len(recs), DESC_DIM)) for s in SCALES}
    for i, rec in enumerate(recs):
        for s in SCALES:
            desc[s][i] = describe(_read_patch(manifest, rec, s))
    split = np.array([SPLITS.index(r.split) for r in recs], dtype=np.int64)
    train = split == 0
    if not train.any():
        raise ValueError("manifest has no training patches to fit normalisation on")
    spec = fit_spec({s: desc[s][train] for s in SCALES}, seed, dim)

    feats = np.empty((len(recs), len(SCALES), dim))
    for j, s in enumerate(SCALES):
        y = spec.project(desc[s], s)
        feats[:, j, :] = (y - spec.out_mean[s]) / spec.out_std[s]

    fs = FeatureSet(
        feats=feats,
        labels=np.array([r.label for r in recs], dtype=np.int64),
        region_ids=np.array([r.region_id for r in recs], dtype=np.int64),
        patch_ids=np.array([r.id for r in recs], dtype=np.int64),
        centers=np.array([(r.cx, r.cy) for r in recs], dtype=np.int64).reshape(-1, 2),
        split=split,
    )
    if out_path is not None:
        save_features(out_path, fs, spec, kind=manifest.kind)
    return fs, spec


def save_features(path: str | os.PathLike, fs: FeatureSet, spec: EmbedderSpec,
                  kind: str = "unknown") -> None:
    tensors = {f"feat_{s}": fs.feats[:, j, :] for j, s in enumerate(fs.scales)}
    tensors.update({
        "labels": fs.labels,
        "region_ids": fs.region_ids,
        "patch_ids": fs.patch_ids,
        "centers": fs.centers,
        "split": fs.split,
    })
    tensors.update(spec.tensors())
    tensors["__manifest__"] = container.encode_json(
        {"seed": spec.seed, "dim": spec.dim, "kind": kind, "scales": list(fs.scales)})
    container.save(path, tensors)


def load_features(path: str | os.PathLike) -> tuple[FeatureSet, EmbedderSpec, dict]:
    t = container.load(Path(path))
    meta = container.decode_json(t["__manifest__"])
    scales = tuple(meta["scales"])
    fs = FeatureSet(
        feats=np.stack([t[f"feat_{s}"] for s in scales], axis=1),
        labels=t["labels"].astype(np.int64),
        region_ids=t["region_ids"].astype(np.int64),
        patch_ids=t["patch_ids"].astype(np.int64),
        centers=t["centers"].astype(np.int64).reshape(-1, 2),
        split=t["split"].astype(np.int64),
        scales=scales,
    )
    return fs, EmbedderSpec.from_tensors(meta["seed"], t), meta
