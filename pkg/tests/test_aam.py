import math

import numpy as np
import pytest

from vitgzsl import diffnum as dn
from vitgzsl.aam import (
    AttributeAttention,
    AttributeFeatureExtractor,
    attention_map,
    export_attention,
    min_max,
    read_pgm,
    train_attribute_extractor,
    write_pgm,
)
from vitgzsl.dataset import SEEN_TRAIN, UNSEEN_TEST, TaintAudit
from vitgzsl.diffnum import Tape
from vitgzsl.errors import ConfigError, ShapeMismatch, TaintViolation, UnseenClassInBatch
from vitgzsl.f2a import make_one_hot_attribute
from vitgzsl.layers import gradcheck_module


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data = rng.standard_normal(p.shape) * scale
    return module


def oracle_aam(a, X, P, heads):
    """Scalar-loop evaluation of the query/key/value projections, per-head
    scaled dot-product softmax and the attention-weighted value sum."""
    n, d = len(X), len(X[0])
    dh = d // heads
    q = [sum(a[i] * P["q_w"][i][j] for i in range(len(a))) + P["q_b"][j] for j in range(d)]
    k = [[sum(X[r][i] * P["k_w"][i][j] for i in range(d)) + P["k_b"][j] for j in range(d)] for r in range(n)]
    v = [[X[r][j] + sum(X[r][i] * P["v_w"][i][j] for i in range(d)) + P["v_b"][j] for j in range(d)] for r in range(n)]
    out, maps = [0.0] * d, []
    for h in range(heads):
        cols = range(h * dh, (h + 1) * dh)
        s = [sum(q[c] * k[r][c] for c in cols) / math.sqrt(dh) for r in range(n)]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        w = [x / sum(e) for x in e]
        maps.append(w)
        for c in cols:
            out[c] = sum(w[r] * v[r][c] for r in range(n))
    return out, maps


def _p(aam):
    return {
        "q_w": aam.query.weight.data.tolist(),
        "q_b": aam.query.bias.data.tolist(),
        "k_w": aam.key.weight.data.tolist(),
        "k_b": aam.key.bias.data.tolist(),
        "v_w": aam.value.weight.data.tolist(),
        "v_b": aam.value.bias.data.tolist(),
    }


def test_forward_matches_oracle_100_cases():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        heads = int(rng.integers(1, 3))
        d = heads * int(rng.integers(1, 8 // heads + 1))
        n = int(rng.integers(1, 9))
        attrs = int(rng.integers(1, 6))
        aam = randomize(AttributeAttention(attrs, d, 3, heads, dtype=np.float64), rng)
        a, X = rng.standard_normal(attrs), rng.standard_normal((n, d))
        x, attn = aam(a[None], X[None])
        ref, maps = oracle_aam(a.tolist(), X.tolist(), _p(aam), heads)
        worst = max(worst, np.max(np.abs(x.data[0] - ref)), np.max(np.abs(attn.data[0, :, 0] - np.array(maps))))
    assert worst <= 1e-10


def test_projection_shapes_and_value_residual(rng):
    aam = randomize(AttributeAttention(7, 4, 2, 2, dtype=np.float64), rng)
    X = rng.standard_normal((3, 4))
    q, k, v = aam.project_qkv(rng.standard_normal(7), X)
    assert q.shape == (1, 4) and k.shape == (3, 4) and v.shape == (3, 4)
    aam.value.weight.data[:] = 0
    aam.value.bias.data[:] = 0
    _, _, v = aam.project_qkv(rng.standard_normal(7), X)
    np.testing.assert_array_equal(v.data, X)
    with pytest.raises(ShapeMismatch):
        aam.project_qkv(np.ones(6), X)
    with pytest.raises(ShapeMismatch):
        aam.project_qkv(np.ones(7), np.ones((3, 5)))


def test_attention_limiting_cases(rng):
    aam = randomize(AttributeAttention(3, 4, 2, 2, dtype=np.float64), rng)
    X = np.tile(rng.standard_normal(4), (5, 1))
    x, attn = aam(rng.standard_normal(3), X)
    np.testing.assert_allclose(attn.data, 0.2, atol=1e-15)
    _, _, v = aam.project_qkv(np.ones(3), X)
    np.testing.assert_allclose(x.data, v.data[0], atol=1e-12)
    _, attn1 = aam(rng.standard_normal(3), rng.standard_normal((1, 4)))
    np.testing.assert_array_equal(attn1.data, np.ones((2, 1, 1)))


def test_row_stochastic_1000_trials():
    rng = np.random.default_rng(8)
    aam = randomize(AttributeAttention(5, 8, 2, 2, dtype=np.float64), rng, 2.0)
    with dn.no_tape():
        _, attn = aam(rng.standard_normal((1000, 5)) * 3, rng.standard_normal((1000, 6, 8)) * 3)
    assert np.all(attn.data >= 0)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)


def test_permutation_invariance(rng):
    aam = randomize(AttributeAttention(4, 6, 2, 3, dtype=np.float64), rng)
    a, X = rng.standard_normal(4), rng.standard_normal((7, 6))
    base, _ = aam(a, X)
    for _ in range(5):
        perm = rng.permutation(7)
        out, _ = aam(a, X[perm])
        np.testing.assert_allclose(out.data, base.data, atol=1e-6)


def test_single_head_equals_plain_attention(rng):
    aam = randomize(AttributeAttention(4, 6, 2, 1, dtype=np.float64), rng)
    a, X = rng.standard_normal(4), rng.standard_normal((5, 6))
    q, k, v = aam.project_qkv(a, X)
    w = dn.softmax_rows(q.data @ k.data.T / math.sqrt(6)).data
    out, _ = aam(a, X)
    np.testing.assert_array_equal(out.data, (w @ v.data)[0])


def test_model_width_scale(rng):
    head = randomize(AttributeAttention(3, 8, 2, 2, scale="head", dtype=np.float64), rng)
    model = AttributeAttention(3, 8, 2, 2, scale="model", dtype=np.float64)
    model.load_state_dict(head.state_dict())
    a, X = rng.standard_normal(3), rng.standard_normal((4, 8))
    q, k, _ = head.project_qkv(a, X)
    s = (q.data[:, :4] @ k.data[:, :4].T)[0]
    np.testing.assert_allclose(model(a, X)[1].data[0, 0], dn.softmax_rows(s[None] / math.sqrt(8)).data[0], atol=1e-12)
    with pytest.raises(ConfigError):
        AttributeAttention(3, 8, 2, 2, scale="sqrt")
    with pytest.raises(ConfigError):
        AttributeAttention(3, 9, 2, 2)


def test_dropout_only_in_training(rng):
    aam = randomize(AttributeAttention(3, 4, 2, 2, dropout=0.5, dtype=np.float64), rng)
    a, X = rng.standard_normal(3), rng.standard_normal((4, 4))
    e1, _ = aam(a, X)
    e2, _ = aam(a, X, training=False, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(e1.data, e2.data)
    t1, _ = aam(a, X, training=True, rng=np.random.default_rng(0))
    assert not np.allclose(t1.data, e1.data)


def test_aux_classifier(rng):
    aam = AttributeAttention(3, 4, 5, 2)
    logits = aam.aux_classify(rng.standard_normal((2, 4)))
    assert logits.shape == (2, 5)
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_allclose(dn.softmax_rows(logits).data, 0.2)


# -- attention maps ----------------------------------------------------------------


def test_min_max_rules():
    np.testing.assert_array_equal(min_max(np.full((2, 2), 0.3)), np.zeros((2, 2)))
    np.testing.assert_allclose(min_max([1.0, 3.0, 2.0]), [0.0, 1.0, 0.5])


def test_attention_map_layout(rng):
    aam = randomize(AttributeAttention(5, 8, 2, 2, dtype=np.float64), rng)
    X = rng.standard_normal((16, 8))
    amap = attention_map(aam, make_one_hot_attribute(1, 5), X)
    assert amap.per_head.shape == (2, 1, 16)
    np.testing.assert_allclose(amap.per_head.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(amap.averaged, amap.per_head.mean(axis=0)[0])
    for r in range(4):
        for c in range(4):
            assert amap.grid[r, c] == amap.averaged[4 * r + c]
    assert amap.normalized.min() == 0.0 and amap.normalized.max() == 1.0


def test_attention_map_constant_scores(rng):
    aam = AttributeAttention(5, 8, 2, 2, dtype=np.float64)
    amap = attention_map(aam, np.ones(5), rng.standard_normal((4, 8)))
    np.testing.assert_array_equal(amap.normalized, np.zeros((2, 2)))


def test_pgm_round_trip(tmp_path, rng):
    values = rng.random((4, 4))
    write_pgm(tmp_path / "m.pgm", values)
    img, maxval = read_pgm(tmp_path / "m.pgm")
    assert maxval == 255
    np.testing.assert_array_equal(img, np.rint(values * 255).astype(int))
    assert (tmp_path / "m.pgm").read_text().startswith("P2\n4 4\n255\n")


def test_export_names(tmp_path, rng):
    aam = randomize(AttributeAttention(5, 8, 2, 2, dtype=np.float64), rng)
    amap = attention_map(aam, rng.standard_normal(5), rng.standard_normal((16, 8)))
    paths = export_attention(amap, str(tmp_path / "img3"))
    assert [p.rsplit("/", 1)[1] for p in paths] == ["img3_head0.pgm", "img3_head1.pgm", "img3_avg.pgm"]
    avg, _ = read_pgm(paths[-1])
    assert avg.max() == 255 and avg.min() == 0


# -- joint F2A + AAM model --------------------------------------------------------------


@pytest.fixture
def tiny_extractor():
    rng = np.random.default_rng(3)
    ext = AttributeFeatureExtractor(8, 5, [2, 4, 7], num_heads=2, dropout=0.0, rng=rng, dtype=np.float64)
    randomize(ext, rng, 0.4)
    data = dict(
        cls=rng.standard_normal((3, 8)),
        patches=rng.standard_normal((3, 4, 8)),
        attrs=rng.random((3, 5)),
        labels=np.array([2, 7, 4]),
    )
    return ext, data


def test_joint_loss_gradcheck(tiny_extractor):
    ext, d = tiny_extractor
    loss_fn = lambda: ext.joint_loss(d["cls"], d["patches"], d["attrs"], d["labels"])[0]
    errs = gradcheck_module(loss_fn, ext, eps=1e-5)
    assert max(errs.values()) <= 1e-4, errs


def test_joint_loss_input_gradcheck(tiny_extractor):
    ext, d = tiny_extractor
    f = lambda p: ext.joint_loss(d["cls"], p, d["attrs"], d["labels"])[0]
    assert dn.gradcheck(f, d["patches"], 1e-5) <= 1e-4


def test_joint_loss_terms(tiny_extractor):
    ext, d = tiny_extractor
    loss, parts = ext.joint_loss(d["cls"], d["patches"], d["attrs"], d["labels"])
    assert loss.item() == pytest.approx(parts["mse"] + parts["ce"])
    ce_only, parts2 = ext.joint_loss(d["cls"], d["patches"], d["attrs"], d["labels"], use_mse=False)
    assert ce_only.item() == pytest.approx(parts2["ce"])
    with dn.no_tape():
        a_hat = ext.f2a(d["cls"]).data
    assert parts["mse"] == pytest.approx(np.mean(np.sum((a_hat - d["attrs"]) ** 2, axis=1)))


def test_joint_loss_rejects_unseen(tiny_extractor):
    ext, d = tiny_extractor
    with pytest.raises(UnseenClassInBatch):
        ext.joint_loss(d["cls"], d["patches"], d["attrs"], np.array([2, 3, 4]))


def test_f2a_receives_ce_gradient_without_mse(tiny_extractor):
    ext, d = tiny_extractor
    ext.zero_grad()
    with Tape() as tape:
        loss, _ = ext.joint_loss(d["cls"], d["patches"], d["attrs"], d["labels"], mse_weight=0.0)
        tape.backward(loss)
    assert any(np.abs(p.grad).max() > 0 for p in ext.f2a.parameters())


def test_training_reduces_ce_and_audits(tiny_extractor):
    ext, d = tiny_extractor
    rng = np.random.default_rng(0)
    cls = np.repeat(d["cls"], 4, axis=0) + 0.05 * rng.standard_normal((12, 8))
    patches = np.repeat(d["patches"], 4, axis=0)
    labels = np.repeat(d["labels"], 4)
    class_attrs = np.zeros((8, 5))
    class_attrs[d["labels"]] = d["attrs"]
    audit = TaintAudit()
    hist = train_attribute_extractor(ext, cls, patches, labels, class_attrs, epochs=40, lr=1e-2, batch_size=4, tags=np.full(12, SEEN_TRAIN), audit=audit)
    assert hist[-1][2] < hist[0][2]
    assert ext.trained
    assert audit.stages_touching(SEEN_TRAIN) == ["aam"]
    with pytest.raises(TaintViolation):
        train_attribute_extractor(ext, cls, patches, labels, class_attrs, epochs=1, tags=np.full(12, UNSEEN_TEST))
