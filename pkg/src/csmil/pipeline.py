"""Stage functions chaining generation, embedding, clustering, training,
evaluation and attention maps, plus the ablation sweep.

Every stage reads and writes files so that the command-line tool and the
test-suite drive exactly the same code. Output layout for one dataset::

    {out}/{dataset}/data/            manifest.jsonl, dataset.json, patches/
    {out}/{dataset}/feats.csml       feature cache
    {out}/{dataset}/clusters.csml    per-region phenotype clusters
    {out}/{dataset}/{variant}/       config.json, ckpt.csml, train.log,
                                     metrics.json, attention.json, maps/
"""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attnmap
from .bagging import bags_needed, dump_bags, make_test_bags, make_train_bags
from .clustering import cluster_groups, load_clusters, save_clusters
from .embedder import FeatureSet, embed_dataset, load_features
from .model import forward_bag, load_checkpoint, save_checkpoint
from .toydata import SCALES, gen_macro, gen_micro, load_manifest
from .trainer import TrainConfig, evaluate, train


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    dataset: str = "micro"
    regions: int = 120
    seed: int = 0
    dim: int = 64
    k: int = 8
    grid_step: int = 64
    bag_size: int = 8
    bags_per_group: int = 32
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 0.0
    eval_every: int = 4
    val_bags: int = 16
    test_bags: int = 100
    mode: str = "cs"
    act: str = "relu"
    shared: bool = True
    stratified: bool = True
    hidden: int = 64
    attn_dim: int = 32
    scales: tuple = SCALES
    out: str = "out"

    def __post_init__(self):
        if self.dataset not in ("micro", "macro"):
            raise ConfigError(f"dataset must be micro or macro, got {self.dataset!r}")
        self.scales = tuple(self.scales)
        if not self.scales or any(s not in SCALES for s in self.scales):
            raise ConfigError(f"scales must be drawn from {SCALES}, got {self.scales}")
        if len(set(self.scales)) != len(self.scales):
            raise ConfigError(f"duplicate scales in {self.scales}")
        for name in ("regions", "dim", "k", "bag_size", "test_bags"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def variant(self) -> str:
        if len(self.scales) == 1:
            return f"single-{self.scales[0]}"
        name = f"{self.mode}-{self.act}-{'shared' if self.shared else 'nonshared'}"
        if not self.stratified:
            name += "-naive"
        if self.scales != SCALES:
            name += "-" + "+".join(self.scales)
        return name

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, bags_per_group=self.bags_per_group, bag_size=self.bag_size,
            lr=self.lr, weight_decay=self.weight_decay, eval_every=self.eval_every,
            val_bags=self.val_bags, seed=self.seed, mode=self.mode, act=self.act,
            shared=self.shared, hidden=self.hidden, attn_dim=self.attn_dim,
            stratified=self.stratified)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        return d

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- paths
    @property
    def dataset_dir(self) -> Path:
        return Path(self.out) / self.dataset

    @property
    def data_dir(self) -> Path:
        return self.dataset_dir / "data"

    @property
    def manifest_path(self) -> Path:
        return self.data_dir / "manifest.jsonl"

    @property
    def feats_path(self) -> Path:
        return self.dataset_dir / "feats.csml"

    @property
    def clusters_path(self) -> Path:
        return self.dataset_dir / "clusters.csml"

    @property
    def variant_dir(self) -> Path:
        return self.dataset_dir / self.variant


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def coerce_value(name: str, value):
    """Convert a config-file or flag value to the field's type."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = _FIELDS[name].default
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("true", "1", "yes"):
                return True
            if text in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = value.split(",") if isinstance(value, str) else list(value)
            return tuple(str(s).strip() for s in items if str(s).strip())
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def resolve_config(file_path: str | os.PathLike | None = None, overrides: dict | None = None) -> RunConfig:
    """File values first, then non-None overrides (command-line flags)."""
    values: dict = {}
    if file_path is not None:
        try:
            raw = json.loads(Path(file_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {file_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {file_path} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        values.update({k: coerce_value(k, v) for k, v in raw.items()})
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = coerce_value(k, v)
    return RunConfig(**values)


def write_json(path: str | os.PathLike, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# stages


def stage_gen(cfg: RunConfig):
    gen = gen_micro if cfg.dataset == "micro" else gen_macro
    return gen(cfg.regions, cfg.seed, cfg.data_dir, grid_step=cfg.grid_step)


def stage_embed(manifest_path, seed: int, dim: int, out_path) -> FeatureSet:
    manifest = load_manifest(manifest_path)
    fs, _ = embed_dataset(manifest, seed, dim, out_path)
    return fs


def stage_cluster(feats_path, k: int, seed: int, out_path) -> None:
    """k-means on 20x embeddings, fitted separately inside every region."""
    fs, _, _ = load_features(feats_path)
    if "s20" not in fs.scales:
        raise ValueError("feature cache has no 20x features to cluster")
    gc = cluster_groups(fs.feats[:, fs.scales.index("s20"), :], fs.region_ids, k, seed)
    save_clusters(out_path, gc, fs.patch_ids, fs.region_ids)


def load_inputs(feats_path, clusters_path=None, scales=None) -> tuple[FeatureSet, np.ndarray | None]:
    fs, _, _ = load_features(feats_path)
    clusters = None
    if clusters_path is not None:
        gc, patch_ids = load_clusters(clusters_path)
        if not np.array_equal(patch_ids, fs.patch_ids):
            raise ValueError(f"clusters {clusters_path} do not match the patches of {feats_path}")
        clusters = gc.assignments
    if scales is not None:
        fs = fs.with_scales(tuple(scales))
    return fs, clusters


def stage_train(cfg: RunConfig, feats_path, clusters_path, ckpt_path, log_path) -> dict:
    fs, clusters = load_inputs(feats_path, clusters_path, cfg.scales)
    train_rows = fs.split == 0
    params, log = train(fs.subset(train_rows), fs.of_split("val"), clusters[train_rows],
                        cfg.train_config(), log_path)
    save_checkpoint(params, ckpt_path, {"scales": list(cfg.scales), "best_epoch": log.best_epoch})
    return {"best_epoch": log.best_epoch, "final_train_loss": log.train_loss[-1]}


def stage_eval(ckpt_path, feats_path, n_bags: int = 100, bag_size: int = 8, seed: int = 0,
               split: str = "test"):
    params, meta = load_checkpoint(ckpt_path)
    fs, _ = load_inputs(feats_path, scales=meta.get("scales"))
    res = evaluate(params, fs.of_split(split), bag_size, n_bags, seed)
    return res, tuple(fs.scales)


def eval_record(res, scales, extra: dict | None = None) -> dict:
    rec = res.metrics()
    rec["attention"] = {str(k): v for k, v in
                        attnmap.scale_attention_stats(res.traces, res.bags, scales).items()}
    rec["normalization_violations"] = normalization_violations(res.traces)
    if extra:
        rec.update(extra)
    return rec


def normalization_violations(traces, tol: float = 1e-6) -> int:
    bad = 0
    for t in traces:
        bad += int(np.sum(np.abs(t.scale_attention.sum(axis=1) - 1.0) > tol))
        bad += int(abs(t.instance_weights.sum() - 1.0) > tol)
    return bad


def stage_attnmap(ckpt_path, feats_path, region: int, out_dir, bag_size: int = 8,
                  n_bags: int | None = None, seed: int = 0, min_visits: int = 10) -> list[Path]:
    """Maps for one region from test-protocol bags (each patch sampled >= min_visits times)."""
    params, meta = load_checkpoint(ckpt_path)
    fs, _ = load_inputs(feats_path, scales=meta.get("scales"))
    rows = fs.region_ids == region
    if not rows.any():
        raise ValueError(f"region {region} is not in {feats_path}")
    sub = fs.subset(rows)
    n = max(n_bags or 0, bags_needed(len(sub), bag_size, min_visits))
    bags, traces = region_traces(params, sub, bag_size, n, seed)
    return attnmap.export_region(traces, bags, out_dir, len(fs.scales),
                                 scale_names=fs.scales)


def region_traces(params, fs: FeatureSet, bag_size: int, n_bags: int, seed: int):
    """Test-protocol bags over ``fs`` and the forward trace of each."""
    bags = make_test_bags(fs, bag_size, n_bags, seed)
    return bags, [forward_bag(fs.feats[b.indices], params)[1] for b in bags]


def stage_bags(feats_path, clusters_path, out_path, split: str = "train", bag_size: int = 8,
               n_bags: int = 32, seed: int = 0, stratified: bool = True) -> int:
    fs, clusters = load_inputs(feats_path, clusters_path)
    rows = fs.split == ("train", "val", "test").index(split)
    sub = fs.subset(rows)
    if split == "train":
        bags = make_train_bags(sub, clusters[rows], bag_size, n_bags, seed, stratified)
    else:
        bags = make_test_bags(sub, bag_size, n_bags, seed)
    dump_bags(out_path, bags, sub)
    return len(bags)


# ---------------------------------------------------------------------------
# whole runs


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stamp_key(stage: str, params: dict, inputs: list) -> str:
    h = hashlib.sha256(json.dumps({"stage": stage, "params": params}, sort_keys=True).encode())
    for p in inputs:
        h.update(file_digest(p).encode())
    return h.hexdigest()


def _cached(stage: str, artifact: Path, params: dict, inputs: list, build) -> None:
    """Rebuild ``artifact`` unless its stamp matches the hashed stage inputs."""
    stamp = artifact.parent / (artifact.name + ".stamp")
    key = _stamp_key(stage, params, inputs)
    if artifact.exists() and stamp.exists() and stamp.read_text().strip() == key:
        return
    build()
    stamp.write_text(key + "\n")


def prepare_dataset(cfg: RunConfig) -> None:
    """Generate, embed and cluster, reusing artifacts whose inputs are unchanged."""
    cfg.dataset_dir.mkdir(parents=True, exist_ok=True)
    _cached("gen", cfg.manifest_path,
            {"dataset": cfg.dataset, "regions": cfg.regions, "seed": cfg.seed,
             "grid_step": cfg.grid_step}, [], lambda: stage_gen(cfg))
    _cached("embed", cfg.feats_path, {"seed": cfg.seed, "dim": cfg.dim}, [cfg.manifest_path],
            lambda: stage_embed(cfg.manifest_path, cfg.seed, cfg.dim, cfg.feats_path))
    _cached("cluster", cfg.clusters_path, {"k": cfg.k, "seed": cfg.seed}, [cfg.feats_path],
            lambda: stage_cluster(cfg.feats_path, cfg.k, cfg.seed, cfg.clusters_path))


def run_variant(cfg: RunConfig, maps: bool = False) -> dict:
    """Train and evaluate one model variant on prepared data; returns the metrics record."""
    vdir = cfg.variant_dir
    vdir.mkdir(parents=True, exist_ok=True)
    write_json(vdir / "config.json", cfg.to_dict())
    ckpt = vdir / "ckpt.csml"
    info = stage_train(cfg, cfg.feats_path, cfg.clusters_path, ckpt, vdir / "train.log")
    res, scales = stage_eval(ckpt, cfg.feats_path, cfg.test_bags, cfg.bag_size, cfg.seed)
    rec = eval_record(res, scales, {"variant": cfg.variant, "dataset": cfg.dataset,
                                    "seed": cfg.seed, **info})
    write_json(vdir / "metrics.json", rec)
    if maps:
        pos = int(res.groups[res.labels == 1][0])
        stage_attnmap(ckpt, cfg.feats_path, pos, vdir / "maps", cfg.bag_size, seed=cfg.seed)
    return rec


def run_all(cfg: RunConfig, maps: bool = True) -> dict:
    prepare_dataset(cfg)
    return run_variant(cfg, maps=maps)


ABLATION_PRESETS = {
    # fusion strategies and single-scale backbones
    "fusion": [{"scales": (s,)} for s in SCALES]
              + [{"mode": m} for m in ("mean", "concat", "cs")],
    # kernel sharing x attention activation
    "kernel": [{"shared": sh, "act": a} for sh in (False, True) for a in ("tanh", "relu")],
    # naive vs cluster-stratified training bags
    "bagging": [{"stratified": False}, {"stratified": True}],
}


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of ``{key: [values]}`` into a list of override dicts."""
    keys = sorted(grid)
    for k in keys:
        if k not in _FIELDS:
            raise ConfigError(f"unknown grid key {k!r}")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def ablate(cfg: RunConfig, cells: list[dict]) -> list[dict]:
    """Train and evaluate every cell on the same prepared dataset and seed."""
    if not cells:
        raise ConfigError("ablation grid is empty")
    prepare_dataset(cfg)
    rows = []
    for i, cell in enumerate(cells):
        try:
            ccfg = cfg.replace(**{k: coerce_value(k, v) for k, v in cell.items()})
            rec = run_variant(ccfg)
        except Exception as exc:
            raise AblationError(i, cell, exc) from exc
        rows.append({"variant": ccfg.variant, "auc": rec["auc"], "ap": rec["ap"],
                     "accuracy": rec["accuracy"]})
    return rows


class AblationError(RuntimeError):
    def __init__(self, index: int, cell: dict, cause: Exception):
        super().__init__(f"ablation cell {index} {json.dumps(cell, sort_keys=True, default=list)} failed: {cause}")
        self.index, self.cell, self.cause = index, cell, cause


def format_table(rows: list[dict]) -> tuple[str, str]:
    """Aligned text and comma-separated renderings of the ablation table."""
    header = ["variant", "auc", "ap", "accuracy"]
    body = [[r["variant"]] + [f"{r[c]:.4f}" for c in header[1:]] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    text = "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(line, widths)))
                     for line in [header] + body) + "\n"
    csv = "\n".join(",".join(line) for line in [header] + body) + "\n"
    return text, csv


def single_scale_run(cfg: RunConfig, scale: str) -> dict:
    """The same pipeline restricted to one scale's features (S = 1)."""
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    prepare_dataset(cfg)
    return run_variant(cfg.replace(scales=(scale,)))
