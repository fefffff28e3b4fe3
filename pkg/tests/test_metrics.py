import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csmil.metrics import accuracy, average_ranks, pr_ap, roc_auc, slide_score


def pairwise_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (pos.size * neg.size)


def step_ap(s, y):
    """Walk distinct thresholds from the top, adding precision times recall gained."""
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        sel = s >= t
        tp = int((y[sel] == 1).sum())
        recall = tp / int(y.sum())
        ap += (recall - prev_recall) * tp / int(sel.sum())
        prev_recall = recall
    return ap


def random_scored_set(rng):
    n = int(rng.integers(2, 201))
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    # coarse grid so ties are common
    s = rng.integers(0, max(2, n // 4), size=n) / 7.0
    return s, y


def test_auc_matches_pairwise_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s, y = random_scored_set(rng)
        assert roc_auc(s, y) == pairwise_auc(s, y)


def test_ap_matches_step_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        s, y = random_scored_set(rng)
        assert abs(pr_ap(s, y) - step_ap(s, y)) <= 1e-12


@pytest.mark.parametrize("s, y, want", [
    ([0.1, 0.9], [0, 1], 1.0),
    ([0.3, 0.3, 0.3], [0, 1, 1], 0.5),
    ([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], 0.75),
])
def test_auc_examples(s, y, want):
    assert roc_auc(s, y) == want


@pytest.mark.parametrize("s, y, want", [
    ([0.9, 0.8, 0.1], [1, 1, 0], 1.0),
    ([0.8, 0.4, 0.35, 0.1], [1, 0, 1, 0], 5 / 6),
    ([0.9, 0.8, 0.7, 0.6, 0.5], [0, 0, 0, 0, 1], 1 / 5),
])
def test_ap_examples(s, y, want):
    assert pr_ap(s, y) == pytest.approx(want, abs=1e-15)


def test_ap_groups_ties_at_one_threshold():
    # one tied block holding one positive and one negative: precision 1/2 at recall 1
    assert pr_ap([0.5, 0.5], [1, 0]) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=40), st.integers(0, 2 ** 31 - 1))
def test_auc_invariant_under_monotone_transform(scores, seed):
    # integer scores keep the cubic below exactly representable and strictly increasing
    s = np.array(scores, dtype=np.float64)
    y = np.random.default_rng(seed).integers(0, 2, size=s.size)
    y[0], y[1] = 0, 1
    assert roc_auc(s, y) == roc_auc(s ** 3 + 5 * s - 7, y)


def test_average_ranks():
    np.testing.assert_array_equal(average_ranks(np.array([3.0, 1.0, 3.0, 2.0])), [3.5, 1, 3.5, 2])


def test_errors():
    with pytest.raises(ValueError, match="both classes"):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError, match="positive"):
        pr_ap([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError, match="finite"):
        roc_auc([np.nan, 0.2], [0, 1])
    with pytest.raises(ValueError, match="0 or 1"):
        roc_auc([0.1, 0.2], [0, 2])
    with pytest.raises(ValueError, match="labels"):
        roc_auc([0.1], [0, 1])


def test_slide_score():
    assert slide_score([0.2, 0.8]) == 0.5
    assert slide_score([0.37]) == 0.37
    assert slide_score([0.7] * 100) == pytest.approx(0.7, abs=1e-15)
    with pytest.raises(ValueError):
        slide_score([])


def test_accuracy():
    assert accuracy([0.9, 0.1], [1, 0]) == 1.0
    assert accuracy([0.1, 0.9], [1, 0]) == 0.0
    assert accuracy([0.9, 0.9], [1, 0]) == 0.5
    assert accuracy([0.5], [1]) == 1.0
