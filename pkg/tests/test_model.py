import itertools

import numpy as np
import pytest

from csmil import autodiff as ad
from csmil import model
from csmil.autodiff import Tape, Tensor
from csmil.model import CsMilParams, ModelConfig, forward_bag, init_params, nll_loss

VARIANTS = [dict(mode=m, shared=s, act=a)
            for m, s, a in itertools.product(model.MODES, (True, False), model.ACTIVATIONS)]


def compact(**kw):
    return ModelConfig(in_dim=6, hidden=5, attn_dim=4, n_scales=3, **kw)


def bag(rng, n=4, S=3, D=6):
    return rng.normal(size=(n, S, D))


def test_zero_input_zero_bias_encodes_to_zero():
    p = init_params(ModelConfig(), 0)
    np.testing.assert_array_equal(model.ms_encode(np.zeros(64), 0, p).data, np.zeros(64))


def test_ms_encode_formula():
    p = init_params(ModelConfig(shared=False), 1)
    F = np.random.default_rng(0).normal(size=64)
    A, b = p.encoder(2)
    np.testing.assert_allclose(model.ms_encode(F, 2, p).data, np.maximum(F @ A.data + b.data, 0), atol=1e-14)
    with pytest.raises(ValueError, match="feature dim"):
        model.ms_encode(np.zeros(5), 0, p)


def test_shared_vs_separate_encoders():
    F = np.random.default_rng(1).normal(size=64)
    p = init_params(ModelConfig(shared=True), 0)
    np.testing.assert_array_equal(model.ms_encode(F, 0, p).data, model.ms_encode(F, 2, p).data)
    assert p.encoder(0)[0] is p.encoder(2)[0]
    q = init_params(ModelConfig(shared=False), 0)
    assert not np.allclose(model.ms_encode(F, 0, q).data, model.ms_encode(F, 2, q).data)


def test_single_scale_attention_is_one():
    cfg = ModelConfig(n_scales=1)
    p = init_params(cfg, 0)
    h = model.encode_bag(np.random.default_rng(0).normal(size=(5, 1, 64)), p)
    np.testing.assert_array_equal(model.cross_scale_attention(h, p).data, np.ones((5, 1)))


def test_identical_scales_get_equal_attention():
    p = init_params(ModelConfig(), 3)
    row = np.random.default_rng(0).normal(size=64)
    h = model.encode_bag(np.tile(row, (2, 3, 1)), p)
    np.testing.assert_allclose(model.cross_scale_attention(h, p).data, 1 / 3, atol=1e-15)


def test_engineered_logits_give_sevenths():
    cfg = ModelConfig(in_dim=1, hidden=1, attn_dim=1, n_scales=3)
    p = init_params(cfg, 0)
    p.tensors["att.V"] = Tensor(np.ones((1, 1)))
    p.tensors["att.W"] = Tensor(np.ones((1, 1)))
    h = Tensor(np.array([[[0.0], [np.log(2)], [np.log(4)]]]))
    np.testing.assert_allclose(model.attention_logits(h, p).data, [[0, np.log(2), np.log(4)]], atol=1e-15)
    np.testing.assert_allclose(model.cross_scale_attention(h, p).data, [[1 / 7, 2 / 7, 4 / 7]],
                               rtol=0, atol=1e-15)


def test_fuse_modes():
    rng = np.random.default_rng(2)
    h = Tensor(rng.normal(size=(2, 3, 4)))
    a = Tensor(np.array([[1.0, 0, 0], [1.0, 0, 0]]))
    np.testing.assert_array_equal(model.fuse(h, a, "cs-attention").data, h.data[:, 0])
    same = Tensor(np.tile(h.data[:, :1], (1, 3, 1)))
    np.testing.assert_allclose(model.fuse(same, None, "mean-vector").data, h.data[:, 0], atol=1e-15)
    assert model.fuse(h, None, "concatenation").shape == (2, 12)
    np.testing.assert_array_equal(model.fuse(h, None, "concat").data[1], h.data[1].reshape(-1))
    with pytest.raises(ValueError, match="unknown fusion"):
        model.fuse(h, a, "max")
    with pytest.raises(ValueError):
        model.fuse(h, None, "cs")


def test_single_instance_pooling():
    p = init_params(compact(), 0)
    f = Tensor(np.random.default_rng(3).normal(size=(1, 5)))
    y, b, logits = model.pool_and_classify(f, p)
    np.testing.assert_array_equal(b.data, [1.0])
    want = f.data[0] @ p["cls.W"].data + p["cls.b"].data
    np.testing.assert_allclose(logits.data, want, atol=1e-14)


def test_duplicate_instances_equal_pool_weights():
    p = init_params(compact(), 0)
    row = np.random.default_rng(4).normal(size=5)
    _, b, _ = model.pool_and_classify(Tensor(np.tile(row, (6, 1))), p)
    np.testing.assert_allclose(b.data, 1 / 6, atol=1e-15)


@pytest.mark.parametrize("variant", VARIANTS, ids=lambda v: "-".join(map(str, v.values())))
def test_forward_invariants(variant):
    rng = np.random.default_rng(5)
    p = init_params(ModelConfig(**variant), 7)
    for _ in range(5):
        x = rng.normal(size=(8, 3, 64))
        y, tr = forward_bag(x, p)
        assert abs(y.data.sum() - 1) <= 1e-9
        np.testing.assert_allclose(tr.scale_attention.sum(axis=1), 1.0, atol=1e-9)
        assert abs(tr.instance_weights.sum() - 1) <= 1e-9
        perm = rng.permutation(8)
        y2, tr2 = forward_bag(x[perm], p)
        np.testing.assert_allclose(y2.data, y.data, rtol=0, atol=1e-9)
        np.testing.assert_allclose(tr2.instance_weights, tr.instance_weights[perm], atol=1e-12)


def test_identical_instances_match_single_instance():
    p = init_params(ModelConfig(), 2)
    x = np.random.default_rng(6).normal(size=(1, 3, 64))
    y1, _ = forward_bag(x, p)
    y8, _ = forward_bag(np.repeat(x, 8, axis=0), p)
    np.testing.assert_allclose(y8.data, y1.data, rtol=0, atol=1e-12)


def test_bad_bag_shapes():
    p = init_params(ModelConfig(), 0)
    with pytest.raises(ValueError, match="empty"):
        forward_bag(np.zeros((0, 3, 64)), p)
    with pytest.raises(ValueError, match=r"\(n, 3, 64\)"):
        forward_bag(np.zeros((4, 2, 64)), p)


def expected_count(D, L, M, S, mode, shared):
    Lf = S * L if mode == "concat" else L
    enc = (1 if shared else S) * (D * L + L)
    att = M * L + M if mode == "cs" else 0
    return enc + att + 2 * M * Lf + M + 2 * Lf + 2


@pytest.mark.parametrize("mode", model.MODES)
def test_parameter_counts(mode):
    shared = init_params(ModelConfig(mode=mode, shared=True), 0).count()
    separate = init_params(ModelConfig(mode=mode, shared=False), 0).count()
    assert shared == expected_count(64, 64, 32, 3, mode, True)
    assert separate - shared == 2 * (64 * 64 + 64)
    assert init_params(ModelConfig(mode="cs"), 0).count() == 10498


def test_init_ranges_and_determinism():
    a, b = init_params(ModelConfig(), 4), init_params(ModelConfig(), 4)
    for name, t in a.tensors.items():
        assert t.data.tobytes() == b[name].data.tobytes()
    lim = np.sqrt(6 / (64 + 64))
    assert np.abs(a["enc0.A"].data).max() <= lim
    assert np.all(a["enc0.b"].data == 0) and np.all(a["cls.b"].data == 0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(act="gelu")
    with pytest.raises(ValueError):
        ModelConfig(hidden=0)
    assert ModelConfig(mode="concatenation").mode == "concat"


def test_nll_examples():
    y = Tensor(np.array([0.25, 0.75]))
    assert nll_loss(y, 1).item() == pytest.approx(-np.log(0.75), abs=1e-15)
    assert nll_loss(Tensor(np.array([1.0, 0.0])), 1).item() == pytest.approx(-np.log(1e-12))
    with pytest.raises(ValueError):
        nll_loss(Tensor(np.array([0.5, 0.6])), 0)
    with pytest.raises(ValueError):
        nll_loss(y, 2)


@pytest.mark.parametrize("variant", VARIANTS, ids=lambda v: "-".join(map(str, v.values())))
def test_gradient_through_bag_and_loss(variant):
    rng = np.random.default_rng(8)
    for seed in range(5):
        p = init_params(compact(**variant), seed)
        x, target = bag(rng), seed % 2
        err = ad.finite_diff_check(lambda: nll_loss(forward_bag(x, p)[0], target), p.parameters())
        assert err < 1e-4


def test_equal_logits_reduce_cs_to_mean():
    rng = np.random.default_rng(9)
    for i in range(100):
        cs = init_params(ModelConfig(mode="cs", shared=bool(i % 2)), i)
        # a zero output vector makes every scale's logit exactly 0
        cs.tensors["att.W"] = Tensor(np.zeros((32, 1)))
        mean = CsMilParams(ModelConfig(mode="mean", shared=bool(i % 2)),
                           {k: v for k, v in cs.tensors.items() if not k.startswith("att.")})
        x = rng.normal(size=(8, 3, 64))
        h = model.encode_bag(x, cs)
        f_cs = model.fuse(h, model.cross_scale_attention(h, cs), "cs").data
        f_mean = model.fuse(h, None, "mean").data
        assert np.abs(f_cs - f_mean).max() <= 1e-12
        assert np.abs(forward_bag(x, cs)[0].data - forward_bag(x, mean)[0].data).max() <= 1e-12


def test_checkpoint_round_trip(tmp_path):
    p = init_params(ModelConfig(mode="concat", shared=False, act="tanh"), 3)
    model.save_checkpoint(p, tmp_path / "m.csml", {"best_epoch": 12})
    q, meta = model.load_checkpoint(tmp_path / "m.csml")
    assert q.config == p.config and meta["best_epoch"] == 12
    assert meta["model"]["mode"] == "concat" and meta["model"]["shared"] is False
    for k in p.tensors:
        assert q[k].data.tobytes() == p[k].data.tobytes()
    model.save_checkpoint(q, tmp_path / "again.csml", {"best_epoch": 12})
    assert (tmp_path / "again.csml").read_bytes() == (tmp_path / "m.csml").read_bytes()


def test_checkpoint_shape_mismatch(tmp_path):
    from csmil import container

    p = init_params(ModelConfig(), 0)
    model.save_checkpoint(p, tmp_path / "m.csml")
    t = container.load(tmp_path / "m.csml")
    t["cls.b"] = np.zeros(3)
    container.save(tmp_path / "bad.csml", t)
    with pytest.raises(ValueError, match="cls.b"):
        model.load_checkpoint(tmp_path / "bad.csml")
