"""k-means (k-means++ seeding, Lloyd iterations) for phenotype clustering."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import container


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray  # (k, D)
    labels: np.ndarray  # (N,) cluster index per fitted point
    inertia: float
    n_iter: int = 0
    history: list[float] = field(default_factory=list)

    def assign(self, point: np.ndarray) -> int:
        return assign(self, point)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    idx = [int(rng.integers(n))]
    closest = _sq_dists(points, points[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(points, points[[nxt]])[:, 0])
    return points[idx].copy()


def _assign_nonempty(x: np.ndarray, c: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels (lowest index on ties); empty clusters are
    re-seeded in place at the farthest point of a cluster that can spare one."""
    d = _sq_dists(x, c)
    labels = d.argmin(axis=1)
    best = d[np.arange(x.shape[0]), labels]
    counts = np.bincount(labels, minlength=k)
    while (counts == 0).any():
        j = int(np.flatnonzero(counts == 0)[0])
        donor_ok = counts[labels] > 1
        far = int(np.where(donor_ok, best, -1.0).argmax())
        c[j] = x[far]
        counts[labels[far]] -= 1
        counts[j] += 1
        labels[far] = j
        best[far] = 0.0
    return labels, best


def _check_monotone(history: list[float], inertia: float) -> None:
    if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
        raise AssertionError(f"inertia rose from {history[-1]} to {inertia}")


def kmeans_fit(points, k: int = 8, seed: int = 0, max_iter: int = 100,
               tol: float = 1e-6) -> ClusterModel:
    """Lloyd's algorithm from a seeded k-means++ start.

    Empty clusters are re-seeded at the point farthest from its centroid.
    Inertia is recorded after every assignment step and must not increase.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ClusteringError(f"points must be 2-D, got shape {x.shape}")
    if k <= 0:
        raise ClusteringError(f"k must be positive, got {k}")
    if x.shape[0] < k:
        raise ClusteringError(f"{x.shape[0]} points cannot fill {k} clusters")

    rng = np.random.default_rng(seed)
    c = kmeans_pp_init(x, k, rng)
    history: list[float] = []
    labels = np.zeros(x.shape[0], dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, best = _assign_nonempty(x, c, k)
        inertia = float(best.sum())
        _check_monotone(history, inertia)
        history.append(inertia)

        new_c = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        shift = float(np.sqrt(((new_c - c) ** 2).sum(axis=1)).max())
        c = new_c
        if shift < tol:
            break

    labels, best = _assign_nonempty(x, c, k)
    inertia = float(best.sum())
    _check_monotone(history, inertia)
    history.append(inertia)
    return ClusterModel(k=k, centroids=c, labels=labels, inertia=inertia,
                        n_iter=n_iter, history=history)


def kmeans_best_of(points, k: int, seeds, **kw) -> ClusterModel:
    """Lowest-inertia fit over several seeds (earliest seed wins ties)."""
    best = None
    for s in seeds:
        m = kmeans_fit(points, k, seed=s, **kw)
        if best is None or m.inertia < best.inertia:
            best = m
    return best


def assign(model: ClusterModel, point) -> int:
    p = np.asarray(point, dtype=np.float64).reshape(-1)
    if p.shape[0] != model.centroids.shape[1]:
        raise ClusteringError(
            f"point has {p.shape[0]} dims, centroids have {model.centroids.shape[1]}")
    d = ((model.centroids - p) ** 2).sum(axis=1)
    return int(d.argmin())


# ---------------------------------------------------------------------------
# per-group clustering


@dataclass
class GroupClusters:
    """Cluster index for every patch, fitted separately within each group."""

    k: int
    assignments: np.ndarray  # (N,) aligned with the feature set
    centroids: dict[int, np.ndarray]  # group id -> (k, D)


def cluster_groups(feats: np.ndarray, group_ids: np.ndarray, k: int = 8,
                   seed: int = 0, **kw) -> GroupClusters:
    """Fit k-means within every group (slide / region) on its own points.

    Groups with fewer than k points use k = group size.
    """
    assignments = np.zeros(len(group_ids), dtype=np.int64)
    centroids = {}
    for g in np.unique(group_ids):
        idx = np.flatnonzero(group_ids == g)
        kk = min(k, idx.size)
        m = kmeans_fit(feats[idx], kk, seed=seed, **kw)
        assignments[idx] = m.labels
        centroids[int(g)] = m.centroids
    return GroupClusters(k=k, assignments=assignments, centroids=centroids)


def save_clusters(path: str | os.PathLike, gc: GroupClusters, patch_ids: np.ndarray,
                  group_ids: np.ndarray) -> None:
    groups = sorted(gc.centroids)
    tensors = {
        "patch_ids": patch_ids,
        "group_ids": group_ids,
        "assignments": gc.assignments,
        "centroid_groups": np.repeat(groups, [gc.centroids[g].shape[0] for g in groups]),
        "centroids": np.concatenate([gc.centroids[g] for g in groups], axis=0),
        "__manifest__": container.encode_json({"k": gc.k}),
    }
    container.save(path, tensors)


def load_clusters(path: str | os.PathLike) -> tuple[GroupClusters, np.ndarray]:
    """Returns the clusters and the patch ids they are aligned with."""
    t = container.load(path)
    meta = container.decode_json(t["__manifest__"])
    cg = t["centroid_groups"].astype(np.int64)
    centroids = {int(g): t["centroids"][cg == g] for g in np.unique(cg)}
    gc = GroupClusters(k=int(meta["k"]), assignments=t["assignments"].astype(np.int64),
                       centroids=centroids)
    return gc, t["patch_ids"].astype(np.int64)
