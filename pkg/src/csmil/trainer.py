"""Training loop, Adam updates, validation-loss model selection and evaluation."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .bagging import Bag, make_test_bags, make_train_bags
from .embedder import FeatureSet
from .metrics import accuracy, pr_ap, roc_auc, slide_score
from .model import (CsMilParams, ForwardTrace, ModelConfig, forward_bag, init_params,
                    load_checkpoint, nll_loss, save_checkpoint)

__all__ = [
    "TrainConfig", "TrainLog", "Adam", "DivergenceError", "EvalResult",
    "train", "train_step", "bag_loss", "evaluate", "nll_loss",
    "save_checkpoint", "load_checkpoint",
]


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 100
    bags_per_group: int = 32
    bag_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    eval_every: int = 4
    val_bags: int = 16
    seed: int = 0
    mode: str = "cs"
    act: str = "relu"
    shared: bool = True
    hidden: int = 64
    attn_dim: int = 32
    stratified: bool = True

    def __post_init__(self):
        if not self.epochs >= self.eval_every >= 1:
            raise ValueError(f"need epochs >= eval_every >= 1, got {self.epochs}, {self.eval_every}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.bag_size < 1 or self.bags_per_group < 1 or self.val_bags < 1:
            raise ValueError("bag counts and sizes must be positive")

    def model_config(self, in_dim: int, n_scales: int) -> ModelConfig:
        return ModelConfig(mode=self.mode, act=self.act, shared=self.shared, in_dim=in_dim,
                           hidden=self.hidden, attn_dim=self.attn_dim, n_scales=n_scales,
                           bag_size=self.bag_size)


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)  # one per epoch
    val_epochs: list[int] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def records(self) -> list[dict]:
        out = [{"epoch": e + 1, "split": "train", "loss": l, "auc": None}
               for e, l in enumerate(self.train_loss)]
        out += [{"epoch": e, "split": "val", "loss": l, "auc": a}
                for e, l, a in zip(self.val_epochs, self.val_loss, self.val_auc)]
        out.sort(key=lambda r: (r["epoch"], r["split"] != "train"))
        return out

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"best_epoch": self.best_epoch}) + "\n")


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, params: CsMilParams, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.tensors.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def bag_loss(params: CsMilParams, fs: FeatureSet, bag: Bag) -> tuple[float, ForwardTrace]:
    y, trace = forward_bag(fs.feats[bag.indices], params)
    return nll_loss(y, bag.label).data.item(), trace


def train_step(params: CsMilParams, opt: Adam, fs: FeatureSet, bag: Bag) -> float:
    """One forward/backward pass on ``bag`` followed by an optimizer step."""
    params.zero_grad()
    with ad.Tape() as tape:
        y, _ = forward_bag(fs.feats[bag.indices], params)
        loss = nll_loss(y, bag.label)
        tape.backward(loss)
    value = loss.data.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite training loss on bag {bag.bag_id}")
    opt.step()
    return value


def _validate(params: CsMilParams, fs: FeatureSet, bags: list[Bag]) -> tuple[float, float]:
    losses, probs = [], {}
    for b in bags:
        loss, trace = bag_loss(params, fs, b)
        losses.append(loss)
        probs.setdefault(b.group, []).append(trace.positive_prob)
    groups = sorted(probs)
    scores = [slide_score(probs[g]) for g in groups]
    labels = [fs.group_label(g) for g in groups]
    try:
        auc = roc_auc(scores, labels)
    except ValueError:
        auc = float("nan")
    return float(np.mean(losses)), auc


def train(train_fs: FeatureSet, val_fs: FeatureSet, clusters: np.ndarray,
          config: TrainConfig, log_path: str | os.PathLike | None = None
          ) -> tuple[CsMilParams, TrainLog]:
    """Fit a model; returns the parameters of the lowest-validation-loss evaluation.

    ``clusters`` holds the phenotype cluster of every row of ``train_fs``.
    Train bags are redrawn each epoch from a seed derived from the epoch.
    """
    if len(train_fs) == 0 or len(val_fs) == 0:
        raise ValueError("training and validation splits must be nonempty")
    clusters = np.asarray(clusters)
    if clusters.shape != (len(train_fs),):
        raise ValueError(f"{clusters.size} cluster labels for {len(train_fs)} training rows")
    mcfg = config.model_config(train_fs.feats.shape[2], train_fs.feats.shape[1])
    params = init_params(mcfg, config.seed)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps,
               config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 0x5F])
    val_bags = make_test_bags(val_fs, config.bag_size, config.val_bags, seed=config.seed)

    log = TrainLog()
    best, best_loss = params.copy(), float("inf")
    for epoch in range(1, config.epochs + 1):
        bags = make_train_bags(train_fs, clusters, config.bag_size, config.bags_per_group,
                               seed=config.seed * 1_000_003 + epoch,
                               stratified=config.stratified)
        losses = [train_step(params, opt, train_fs, bags[i])
                  for i in order_rng.permutation(len(bags))]
        log.train_loss.append(float(np.mean(losses)))
        if epoch % config.eval_every == 0:
            vl, va = _validate(params, val_fs, val_bags)
            if not np.isfinite(vl):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
            log.val_epochs.append(epoch)
            log.val_loss.append(vl)
            log.val_auc.append(va)
            if vl < best_loss:
                best_loss, best = vl, params.copy()
                log.best_epoch = epoch
    params.zero_grad()
    if log_path is not None:
        log.write(log_path)
    return best, log


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    groups: np.ndarray
    labels: np.ndarray
    scores: np.ndarray  # slide-level score per group
    auc: float
    ap: float
    accuracy: float
    bags: list[Bag] = field(default_factory=list, repr=False)
    traces: list[ForwardTrace] = field(default_factory=list, repr=False)

    def metrics(self) -> dict:
        return {"auc": self.auc, "ap": self.ap, "accuracy": self.accuracy,
                "n_groups": int(self.groups.size), "n_bags": len(self.bags)}


def evaluate(params: CsMilParams, fs: FeatureSet, bag_size: int = 8, n_bags: int = 100,
             seed: int = 0) -> EvalResult:
    """Score every group as the mean positive probability over its test bags."""
    bags = make_test_bags(fs, bag_size, n_bags, seed=seed)
    traces, probs = [], {}
    for b in bags:
        _, trace = forward_bag(fs.feats[b.indices], params)
        traces.append(trace)
        probs.setdefault(b.group, []).append(trace.positive_prob)
    groups = np.array(sorted(probs), dtype=np.int64)
    scores = np.array([slide_score(probs[g]) for g in groups])
    labels = np.array([fs.group_label(g) for g in groups], dtype=np.int64)
    return EvalResult(groups, labels, scores, roc_auc(scores, labels), pr_ap(scores, labels),
                      accuracy(scores, labels), bags, traces)

