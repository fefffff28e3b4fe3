"""Attention fill-back onto the patch grid of a region and map export.

Every sampled instance carries a patch centre; its attention value is added to
the grid cell holding that centre. The map value of a cell is the mean over
all samples of that patch. Cells that were never sampled stay absent (NaN),
which is distinct from a zero score.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pgm
from .bagging import Bag
from .model import ForwardTrace
from .toydata import REGION, SCALES

DEFAULT_STEP = 64


class AttnMapError(ValueError):
    pass


@dataclass
class AttentionMap:
    name: str
    sums: np.ndarray  # (rows, cols)
    counts: np.ndarray  # (rows, cols), int

    @property
    def values(self) -> np.ndarray:
        """Mean score per cell; NaN where no sample landed."""
        out = np.full(self.sums.shape, np.nan)
        hit = self.counts > 0
        out[hit] = self.sums[hit] / self.counts[hit]
        return out

    @property
    def covered(self) -> np.ndarray:
        return self.counts > 0

    def normalized(self) -> np.ndarray:
        """Per-map min-max scaling of covered cells to [0, 1].

        A constant map becomes 0.5 everywhere it is covered. Absent cells stay NaN.
        """
        v = self.values
        hit = self.covered
        out = np.full(v.shape, np.nan)
        if not hit.any():
            return out
        lo, hi = v[hit].min(), v[hit].max()
        out[hit] = 0.5 if hi == lo else (v[hit] - lo) / (hi - lo)
        return out

    def merge(self, other: "AttentionMap") -> "AttentionMap":
        if self.sums.shape != other.sums.shape:
            raise AttnMapError("cannot merge maps of different grid shape")
        return AttentionMap(self.name, self.sums + other.sums, self.counts + other.counts)


def grid_shape(region: int = REGION, step: int = DEFAULT_STEP) -> tuple[int, int]:
    if step <= 0 or region % step:
        raise AttnMapError(f"grid step {step} must divide the region size {region}")
    return region // step, region // step


def fill_values(centers, values, name: str = "map", region: int = REGION,
                step: int = DEFAULT_STEP) -> AttentionMap:
    """Accumulate one value per centre (x, y) into its grid cell."""
    c = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if c.shape[0] != v.size:
        raise AttnMapError(f"{c.shape[0]} centres for {v.size} values")
    shape = grid_shape(region, step)
    bad = (c < 0).any(axis=1) | (c >= region).any(axis=1)
    if bad.any():
        x, y = c[np.flatnonzero(bad)[0]]
        raise AttnMapError(f"centre ({x}, {y}) lies outside the {region}x{region} region")
    rows, cols = c[:, 1] // step, c[:, 0] // step
    sums = np.zeros(shape)
    counts = np.zeros(shape, dtype=np.int64)
    np.add.at(sums, (rows, cols), v)
    np.add.at(counts, (rows, cols), 1)
    return AttentionMap(name, sums, counts)


def fill_back(traces: Sequence[ForwardTrace], bags: Sequence[Bag], scale: int,
              region: int = REGION, step: int = DEFAULT_STEP,
              name: str | None = None) -> AttentionMap:
    """Mean cross-scale attention a_s per patch cell, for scale index ``scale``."""
    if len(traces) == 0:
        raise AttnMapError("no traces to fill back")
    if len(traces) != len(bags):
        raise AttnMapError(f"{len(traces)} traces for {len(bags)} bags")
    centers = np.concatenate([b.centers for b in bags], axis=0)
    values = np.concatenate([t.scale_attention[:, scale] for t in traces])
    label = name or (SCALES[scale] if scale < len(SCALES) else f"scale{scale}")
    return fill_values(centers, values, f"attn_{label}", region, step)


def fill_back_instances(traces: Sequence[ForwardTrace], bags: Sequence[Bag],
                        region: int = REGION, step: int = DEFAULT_STEP) -> AttentionMap:
    """Mean instance pooling weight b_i per patch cell."""
    if len(traces) == 0:
        raise AttnMapError("no traces to fill back")
    centers = np.concatenate([b.centers for b in bags], axis=0)
    values = np.concatenate([t.instance_weights for t in traces])
    return fill_values(centers, values, "instance_b", region, step)


# ---------------------------------------------------------------------------
# export


def _fmt(x: float) -> str:
    return "NA" if np.isnan(x) else repr(float(x))


def to_csv(amap: AttentionMap) -> str:
    return "".join(",".join(_fmt(x) for x in row) + "\n" for row in amap.values)


def parse_csv(text: str) -> np.ndarray:
    rows = [line.split(",") for line in text.strip().splitlines()]
    return np.array([[np.nan if tok == "NA" else float(tok) for tok in row] for row in rows])


def to_image(amap: AttentionMap) -> np.ndarray:
    """8-bit rendering: round(255 * normalized), absent cells 0."""
    norm = amap.normalized()
    img = np.zeros(norm.shape, dtype=np.uint8)
    hit = ~np.isnan(norm)
    img[hit] = np.round(255.0 * norm[hit]).astype(np.uint8)
    return img


def export_map(amap: AttentionMap, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``{name}.csv`` (raw means, NA for absent) and ``{name}.pgm``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = out / f"{amap.name}.csv", out / f"{amap.name}.pgm"
    csv_path.write_text(to_csv(amap), encoding="utf-8")
    pgm.write(pgm_path, to_image(amap))
    return csv_path, pgm_path


def export_region(traces, bags, out_dir, n_scales: int, region: int = REGION,
                  step: int = DEFAULT_STEP, scale_names: Sequence[str] = SCALES) -> list[Path]:
    """All per-scale attention maps plus the instance weight map of one region."""
    paths: list[Path] = []
    for s in range(n_scales):
        paths.extend(export_map(fill_back(traces, bags, s, region, step, scale_names[s]), out_dir))
    paths.extend(export_map(fill_back_instances(traces, bags, region, step), out_dir))
    return paths


# ---------------------------------------------------------------------------
# distributions


def _summary(x: np.ndarray) -> dict:
    q = np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"n": int(x.size), "min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
            "q3": float(q[3]), "max": float(q[4])}


def scale_attention_stats(traces: Sequence[ForwardTrace], bags: Sequence[Bag],
                          scale_names: Sequence[str] = SCALES) -> dict:
    """Box-plot summary of a_s per bag label and scale.

    Returns ``{label: {scale_name: {n, min, q1, median, q3, max}}}``.
    """
    out: dict = {}
    for label in sorted({b.label for b in bags}):
        a = np.concatenate([t.scale_attention for t, b in zip(traces, bags) if b.label == label])
        out[label] = {scale_names[s]: _summary(a[:, s]) for s in range(a.shape[1])}
    return out
