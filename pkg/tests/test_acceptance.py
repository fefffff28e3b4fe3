"""The ten acceptance criteria at their stated tolerances.

Criteria 1 to 5 and 9 train every variant on desk-scale toy data for seeds
0, 1 and 2 (data seed equals training seed). Every variant shares one
training configuration, ``ACCEPTANCE``, so the ablations differ only in the
factor being ablated. Each test prints a single PASS/FAIL line, and the lines
are repeated in the terminal summary.
"""
import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from csmil import autodiff as ad
from csmil import model, pipeline
from csmil.clustering import kmeans_best_of, kmeans_fit
from csmil.metrics import pr_ap, roc_auc
from csmil.model import ModelConfig, forward_bag, init_params, nll_loss
from csmil.autodiff import Tensor

SEEDS = (0, 1, 2)
# short schedule with decoupled weight decay and per-scale encoders; the
# trade-offs behind it are recorded with the results in the README
ACCEPTANCE = dict(epochs=20, bags_per_group=4, eval_every=2, weight_decay=3.0, shared=False,
                  test_bags=100)
VARIANTS = {"cs": {}, "mean": {"mode": "mean"}, "concat": {"mode": "concat"},
            "s20": {"scales": ("s20",)}, "s10": {"scales": ("s10",)}, "s5": {"scales": ("s5",)}}


def report(n: int, passed: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line, flush=True)
    ACCEPTANCE_LINES.append(line)


def at_least_two(flags) -> bool:
    return sum(bool(f) for f in flags) >= 2


def fmt(values) -> str:
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """``runs[dataset][variant]`` is the list of metric records over SEEDS."""
    root = tmp_path_factory.mktemp("acceptance")
    out = {"micro": {v: [] for v in VARIANTS}, "macro": {v: [] for v in VARIANTS}}
    for seed in SEEDS:
        for dataset in ("micro", "macro"):
            t = time.time()
            base = pipeline.RunConfig(dataset=dataset, seed=seed, out=str(root / f"seed{seed}"),
                                      **ACCEPTANCE)
            pipeline.prepare_dataset(base)
            for name, change in VARIANTS.items():
                out[dataset][name].append(pipeline.run_variant(base.replace(**change)))
            print(f"{dataset} seed {seed}: {time.time() - t:.0f}s", flush=True)
    out["root"] = root
    return out


def aucs(runs, dataset, variant):
    return [r["auc"] for r in runs[dataset][variant]]


@pytest.mark.slow
def test_criterion_1_micro_scale_separation(runs):
    cs, s10, s20 = aucs(runs, "micro", "cs"), aucs(runs, "micro", "s10"), aucs(runs, "micro", "s20")
    ok = (at_least_two(a >= 0.90 for a in cs) and at_least_two(0.35 <= a <= 0.65 for a in s10)
          and at_least_two(a >= 0.95 for a in s20))
    report(1, ok, f"micro cs {fmt(cs)} >= 0.90; s10 {fmt(s10)} in [0.35, 0.65]; s20 {fmt(s20)} >= 0.95")
    assert ok


@pytest.mark.slow
def test_criterion_2_macro_scale_separation(runs):
    cs, s5, s20 = aucs(runs, "macro", "cs"), aucs(runs, "macro", "s5"), aucs(runs, "macro", "s20")
    ok = (at_least_two(a >= 0.90 for a in cs) and at_least_two(a >= 0.95 for a in s5)
          and at_least_two(a <= 0.85 for a in s20))
    report(2, ok, f"macro cs {fmt(cs)} >= 0.90; s5 {fmt(s5)} >= 0.95; s20 {fmt(s20)} <= 0.85")
    assert ok


@pytest.mark.slow
def test_criterion_3_fusion_ablation(runs):
    mean, concat, cs = (aucs(runs, "micro", v) for v in ("mean", "concat", "cs"))
    concat_macro = aucs(runs, "macro", "concat")
    both = {v: [(a + b) / 2 for a, b in zip(aucs(runs, "micro", v), aucs(runs, "macro", v))]
            for v in VARIANTS}
    cs_top = [all(both["cs"][i] >= both[v][i] for v in VARIANTS) for i in range(len(SEEDS))]
    checks = {
        "micro mean <= 0.70": at_least_two(a <= 0.70 for a in mean),
        "micro concat <= 0.70": at_least_two(a <= 0.70 for a in concat),
        "micro cs >= 0.90": at_least_two(a >= 0.90 for a in cs),
        "macro concat >= 0.95": at_least_two(a >= 0.95 for a in concat_macro),
        "cs has top two-dataset mean": at_least_two(cs_top),
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report(3, ok, f"micro mean {fmt(mean)} concat {fmt(concat)} cs {fmt(cs)}; macro concat "
                  f"{fmt(concat_macro)}; two-dataset means "
                  + " ".join(f"{v}={np.mean(both[v]):.3f}" for v in ("cs", "mean", "concat"))
                  + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


def positive_medians(rec):
    pos = rec["attention"]["1"]
    return pos["s20"]["median"], pos["s5"]["median"]


@pytest.mark.slow
def test_criterion_4_attention_localisation(runs):
    micro = [a - b for a, b in map(positive_medians, runs["micro"]["cs"])]
    macro = [b - a for a, b in map(positive_medians, runs["macro"]["cs"])]
    ok = at_least_two(d >= 0.05 for d in micro) and at_least_two(d >= 0.05 for d in macro)
    report(4, ok, f"micro median a20 - a5 {fmt(micro)} >= 0.05; macro median a5 - a20 {fmt(macro)} >= 0.05")
    assert ok


@pytest.mark.slow
def test_criterion_5_attention_normalisation(runs):
    recs = [r for d in ("micro", "macro") for v in VARIANTS for r in runs[d][v]]
    bad = sum(r["normalization_violations"] for r in recs)
    report(5, bad == 0, f"{bad} violations over {len(recs)} evaluated models")
    assert bad == 0


def test_criterion_6_gradient_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for seed in range(5):
        p = init_params(ModelConfig(in_dim=6, hidden=5, attn_dim=4), seed)
        x, target = rng.normal(size=(4, 3, 6)), seed % 2
        worst = max(worst, ad.finite_diff_check(lambda: nll_loss(forward_bag(x, p)[0], target),
                                                p.parameters()))
    report(6, worst < 1e-4, f"max relative error {worst:.2e} < 1e-4 over 5 draws")
    assert worst < 1e-4


def test_criterion_7_metric_oracles():
    rng = np.random.default_rng(7)
    auc_exact, ap_err = 0, 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, size=n)
        y[:2] = (0, 1)
        s = rng.integers(0, max(2, n // 4), size=n) / 7.0  # coarse grid injects ties
        pos, neg = s[y == 1], s[y == 0]
        pairwise = ((pos[:, None] > neg).sum() + 0.5 * (pos[:, None] == neg).sum()) / (pos.size * neg.size)
        auc_exact += roc_auc(s, y) == pairwise
        ap, prev = 0.0, 0.0
        for t in np.unique(s)[::-1]:
            sel = s >= t
            recall = y[sel].sum() / y.sum()
            ap += (recall - prev) * y[sel].sum() / sel.sum()
            prev = recall
        ap_err = max(ap_err, abs(pr_ap(s, y) - ap))
    ok = auc_exact == 100 and ap_err <= 1e-12
    report(7, ok, f"AUC exact on {auc_exact}/100 sets; max AP error {ap_err:.1e}")
    assert ok


def test_criterion_8_kmeans_oracle():
    rng = np.random.default_rng(8)
    hits, monotone = 0, True
    for _ in range(20):
        x = rng.normal(size=(8, 2))
        best = np.inf
        for bits in itertools.product([0, 1], repeat=7):
            m = np.array((0,) + bits, dtype=bool)
            if m.any():
                best = min(best, sum(((q - q.mean(axis=0)) ** 2).sum() for q in (x[m], x[~m])))
        hits += abs(kmeans_best_of(x, 2, range(5)).inertia - best) <= 1e-9
        for s in range(5):
            h = kmeans_fit(x, 2, seed=s).history
            monotone &= all(b <= a + 1e-12 for a, b in zip(h, h[1:]))
    ok = hits >= 18 and monotone
    report(8, ok, f"optimum matched on {hits}/20 instances; inertia monotone: {monotone}")
    assert ok


@pytest.mark.slow
def test_criterion_9_determinism(runs, tmp_path):
    cfg = pipeline.RunConfig(dataset="micro", seed=0, out=str(runs["root"] / "seed0"), **ACCEPTANCE)
    again = cfg.replace(out=str(tmp_path))
    pipeline.stage_gen(again)
    pipeline.stage_embed(again.manifest_path, again.seed, again.dim, again.feats_path)
    pipeline.stage_cluster(again.feats_path, again.k, again.seed, again.clusters_path)
    pairs = [(cfg.manifest_path, again.manifest_path), (cfg.feats_path, again.feats_path),
             (cfg.clusters_path, again.clusters_path)]
    # retrain in place: same resolved config, same paths recorded in the outputs
    names = ("config.json", "ckpt.csml", "train.log", "metrics.json")
    before = {n: (cfg.variant_dir / n).read_bytes() for n in names}
    pipeline.run_variant(cfg)
    same = [a.read_bytes() == b.read_bytes() for a, b in pairs]
    same += [(cfg.variant_dir / n).read_bytes() == before[n] for n in names]
    ok = all(same)
    report(9, ok, f"{sum(same)}/{len(same)} artifacts byte-identical on re-run "
                  "(manifest, features, clusters, config, checkpoint, log, metrics)")
    assert ok


def test_criterion_10_equal_logits_reduce_to_mean():
    rng = np.random.default_rng(10)
    worst = 0.0
    for i in range(100):
        cs = init_params(ModelConfig(mode="cs", shared=bool(i % 2)), i)
        cs.tensors["att.W"] = Tensor(np.zeros((32, 1)))  # every scale logit is exactly 0
        h = model.encode_bag(rng.normal(size=(8, 3, 64)), cs)
        diff = model.fuse(h, model.cross_scale_attention(h, cs), "cs").data - model.fuse(h, None, "mean").data
        worst = max(worst, float(np.abs(diff).max()))
    report(10, worst <= 1e-12, f"max |cs - mean| {worst:.1e} <= 1e-12 over 100 instances")
    assert worst <= 1e-12
