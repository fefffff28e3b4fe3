"""MIL bag construction.

Training bags draw patches evenly across the phenotype clusters of one group
(slide or region). Test bags are drawn uniformly from a group, walking
through shuffled passes over its patches so that every patch lands in a
predictable minimum number of bags.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .embedder import FeatureSet


@dataclass
class Bag:
    bag_id: int
    group: int
    indices: np.ndarray  # rows of the FeatureSet
    label: int
    centers: np.ndarray  # (n, 2) patch centres, for attention fill-back

    def __len__(self) -> int:
        return int(self.indices.size)


def _group_rows(fs: FeatureSet, group: int) -> np.ndarray:
    rows = np.flatnonzero(fs.region_ids == group)
    if rows.size == 0:
        raise ValueError(f"group {group} has no patches")
    return rows


def _group_label(fs: FeatureSet, rows: np.ndarray, group: int) -> int:
    labels = np.unique(fs.labels[rows])
    if labels.size != 1:
        raise ValueError(f"group {group} mixes labels {labels.tolist()}")
    return int(labels[0])


def stratified_draw(clusters: np.ndarray, bag_size: int, rng: np.random.Generator) -> np.ndarray:
    """Positions into ``clusters`` for one bag.

    Nonempty clusters are visited round-robin in a shuffled order; each visit
    takes a random not-yet-used member of that cluster, falling back to any
    member once the cluster is used up.
    """
    ids = np.unique(clusters)
    order = rng.permutation(ids)
    pools = {int(c): list(rng.permutation(np.flatnonzero(clusters == c))) for c in ids}
    members = {int(c): np.flatnonzero(clusters == c) for c in ids}
    out = []
    for slot in range(bag_size):
        c = int(order[slot % order.size])
        pool = pools[c]
        if pool:
            out.append(int(pool.pop()))
        else:
            out.append(int(rng.choice(members[c])))
    return np.array(out, dtype=np.int64)


def make_train_bags(fs: FeatureSet, clusters: np.ndarray, bag_size: int = 8,
                    bags_per_group: int = 32, seed: int = 0,
                    stratified: bool = True) -> list[Bag]:
    """``clusters`` is the per-row cluster index aligned with ``fs``.

    With ``stratified=False`` every row is treated as one cluster, which
    gives plain uniform sampling (the "naive" bagging ablation).
    """
    rng = np.random.default_rng([seed, 0xBA6])
    bags = []
    for g in fs.groups():
        rows = _group_rows(fs, int(g))
        label = _group_label(fs, rows, int(g))
        cl = clusters[rows] if stratified else np.zeros(rows.size, dtype=np.int64)
        for _ in range(bags_per_group):
            pick = rows[stratified_draw(cl, bag_size, rng)]
            bags.append(Bag(len(bags), int(g), pick, label, fs.centers[pick]))
    return bags


def coverage_stream(n: int, bag_size: int, n_bags: int, rng: np.random.Generator) -> list[np.ndarray]:
    """``n_bags`` bags of positions 0..n-1 from consecutive shuffled passes.

    A bag never repeats a position while the group has at least ``bag_size``
    patches. Passes are consumed whole, so every position appears at least
    ``floor(n_bags * bag_size / n)`` times.
    """
    if n < bag_size:
        return [rng.choice(n, size=bag_size, replace=True) for _ in range(n_bags)]
    queue: list[int] = []
    bags = []
    for _ in range(n_bags):
        bag: list[int] = []
        while len(bag) < bag_size:
            if not queue:
                perm = [int(i) for i in rng.permutation(n)]
                # a pass starting mid-bag puts this bag's members last
                queue = [p for p in perm if p not in bag] + [p for p in perm if p in bag]
            bag.append(queue.pop(0))
        bags.append(np.array(bag, dtype=np.int64))
    return bags


def make_test_bags(fs: FeatureSet, bag_size: int = 8, n_bags: int = 100,
                   seed: int = 0) -> list[Bag]:
    """``n_bags`` uniform bags per group, no cluster stratification."""
    rng = np.random.default_rng([seed, 0x7E5])
    bags = []
    for g in fs.groups():
        rows = _group_rows(fs, int(g))
        label = _group_label(fs, rows, int(g))
        for pos in coverage_stream(rows.size, bag_size, n_bags, rng):
            pick = rows[pos]
            bags.append(Bag(len(bags), int(g), pick, label, fs.centers[pick]))
    return bags


def bags_needed(n_patches: int, bag_size: int = 8, min_visits: int = 10) -> int:
    return -(-min_visits * n_patches // bag_size)


def dump_bags(path: str | os.PathLike, bags: list[Bag], fs: FeatureSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in bags:
            fh.write(json.dumps({
                "bag_id": b.bag_id,
                "group": b.group,
                "label": b.label,
                "patch_ids": fs.patch_ids[b.indices].tolist(),
            }) + "\n")
