import numpy as np
import pytest

from csmil import attnmap, bagging, pgm
from csmil.attnmap import AttnMapError, fill_back, fill_values
from csmil.bagging import Bag
from csmil.embedder import FeatureSet
from csmil.model import ForwardTrace, ModelConfig, forward_bag, init_params


def trace(a, b=None):
    a = np.asarray(a, dtype=float)
    b = np.full(a.shape[0], 1 / a.shape[0]) if b is None else np.asarray(b, float)
    return ForwardTrace(a, b, np.zeros(2), np.array([0.5, 0.5]))


def bag_at(centers, label=1):
    c = np.asarray(centers).reshape(-1, 2)
    return Bag(0, 0, np.arange(c.shape[0]), label, c)


def test_single_instance_single_cell():
    m = fill_back([trace([[0.2, 0.3, 0.5]])], [bag_at([(96, 32)])], 2)
    assert m.name == "attn_s5"
    assert m.covered.sum() == 1 and m.covered[0, 1]
    assert m.values[0, 1] == 0.5
    assert np.isnan(m.values[0, 0])


def test_two_samples_average():
    m = fill_values([(10, 10), (20, 30)], [0.2, 0.4])
    assert m.counts[0, 0] == 2
    assert m.values[0, 0] == pytest.approx(0.3, abs=1e-15)


def test_outside_centre_rejected():
    with pytest.raises(AttnMapError, match="outside"):
        fill_values([(256, 0)], [1.0])
    with pytest.raises(AttnMapError, match="divide"):
        attnmap.grid_shape(256, 48)
    with pytest.raises(AttnMapError):
        fill_back([], [], 0)


def test_constant_map_is_mid_grey():
    m = fill_values([(32, 32), (96, 96)], [0.7, 0.7])
    img = attnmap.to_image(m)
    assert img[0, 0] == 128 and img[1, 1] == 128
    assert img[0, 1] == 0  # absent


def test_min_max_extremes():
    m = fill_values([(32, 32), (96, 32), (160, 32)], [0.1, 0.4, 0.9])
    img = attnmap.to_image(m)
    assert img[0, 0] == 0 and img[0, 2] == 255
    assert img[0, 1] == round(255 * 0.3 / 0.8)
    norm = m.normalized()
    assert np.nanmin(norm) == 0.0 and np.nanmax(norm) == 1.0


def test_csv_round_trip_and_files(tmp_path):
    rng = np.random.default_rng(0)
    m = fill_values(rng.integers(0, 192, size=(30, 2)), rng.random(30), name="attn_s20")
    back = attnmap.parse_csv(attnmap.to_csv(m))
    np.testing.assert_array_equal(np.isnan(back), np.isnan(m.values))
    hit = m.covered
    assert np.abs(back[hit] - m.values[hit]).max() <= 1e-6
    csv_path, pgm_path = attnmap.export_map(m, tmp_path)
    assert csv_path.name == "attn_s20.csv" and "NA" in csv_path.read_text()
    np.testing.assert_array_equal(pgm.read(pgm_path), attnmap.to_image(m))


def test_merge_equals_joint_fill():
    a = fill_values([(0, 0), (70, 0)], [1.0, 2.0])
    b = fill_values([(0, 0)], [3.0])
    merged = a.merge(b)
    np.testing.assert_array_equal(merged.values, fill_values([(0, 0), (70, 0), (0, 0)], [1.0, 2.0, 3.0]).values)


def small_features(n=16, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([(x, y) for y in (32, 96, 160, 224) for x in (32, 96, 160, 224)])[:n]
    return FeatureSet(rng.normal(size=(n, 3, 64)), np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64),
                      np.arange(n), centers, np.full(n, 2))


def run_region(fs, params, n_bags, seed=0):
    bags = bagging.make_test_bags(fs, 8, n_bags, seed)
    return bags, [forward_bag(fs.feats[b.indices], params)[1] for b in bags]


def test_protocol_coverage_and_per_cell_sum():
    fs = small_features()
    p = init_params(ModelConfig(), 1)
    bags, traces = run_region(fs, p, bagging.bags_needed(16))
    maps = [fill_back(traces, bags, s) for s in range(3)]
    assert all(m.counts.min() >= 10 for m in maps)
    # every instance's three scale weights sum to one, so the per-cell means do too
    total = sum(m.values for m in maps)
    np.testing.assert_allclose(total, 1.0, atol=1e-6)


def test_shuffled_traces_give_identical_maps():
    fs = small_features()
    p = init_params(ModelConfig(), 2)
    bags, traces = run_region(fs, p, 20)
    order = np.random.default_rng(0).permutation(len(bags))
    a = fill_back(traces, bags, 0)
    b = fill_back([traces[i] for i in order], [bags[i] for i in order], 0)
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(a.counts, b.counts)


def test_export_region_names(tmp_path):
    fs = small_features()
    p = init_params(ModelConfig(), 0)
    bags, traces = run_region(fs, p, 20)
    paths = attnmap.export_region(traces, bags, tmp_path, 3)
    assert sorted(x.name for x in paths) == sorted(
        f"{n}.{e}" for n in ("attn_s20", "attn_s10", "attn_s5", "instance_b") for e in ("csv", "pgm"))
    inst = attnmap.parse_csv((tmp_path / "instance_b.csv").read_text())
    assert np.all(np.isfinite(inst))


def test_stats_single_scale():
    tr = [trace(np.ones((4, 1)))]
    st = attnmap.scale_attention_stats(tr, [bag_at([(0, 0)] * 4)], ("s20",))
    assert st[1]["s20"] == {"n": 4, "min": 1.0, "q1": 1.0, "median": 1.0, "q3": 1.0, "max": 1.0}


def test_untrained_medians_near_a_third():
    rng = np.random.default_rng(3)
    p = init_params(ModelConfig(), 5)
    traces, bags = [], []
    for i in range(125):
        x = rng.normal(size=(8, 3, 64))
        traces.append(forward_bag(x, p)[1])
        bags.append(bag_at(np.zeros((8, 2), int), label=i % 2))
    st = attnmap.scale_attention_stats(traces, bags)
    assert st[0]["s20"]["n"] + st[1]["s20"]["n"] == 1000
    for label in (0, 1):
        for s in ("s20", "s10", "s5"):
            assert abs(st[label][s]["median"] - 1 / 3) <= 0.05
