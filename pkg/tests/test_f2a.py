import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vitgzsl import diffnum as dn
from vitgzsl.errors import IndexOutOfRange, KindMismatch, ShapeMismatch
from vitgzsl.f2a import AttributeVector, FeatureToAttribute, f2a_mse_loss, make_one_hot_attribute
from vitgzsl.layers import gradcheck_module


def test_one_hot_examples():
    np.testing.assert_array_equal(make_one_hot_attribute(2, 5).values, [0, 0, 10, 0, 0])
    with pytest.raises(IndexOutOfRange):
        make_one_hot_attribute(5, 5)
    with pytest.raises(IndexOutOfRange):
        make_one_hot_attribute(-1, 5)


@given(st.data())
def test_one_hot_invariant(data):
    a = data.draw(st.integers(1, 400))
    k = data.draw(st.integers(0, a - 1))
    probe = make_one_hot_attribute(k, a)
    assert probe.kind == "one_hot_probe"
    assert np.count_nonzero(probe.values) == 1
    assert probe.values.sum() == 10.0


def test_zero_weights_give_zero_attribute():
    f2a = FeatureToAttribute(6, 4)
    out = f2a.synthesize_attribute(np.ones((3, 6)))
    assert out.kind == "synthetic"
    np.testing.assert_array_equal(out.values, np.zeros((3, 4)))


def test_shapes_and_hidden_width(rng):
    for d, a in ((4, 9), (12, 3), (5, 5)):
        f2a = FeatureToAttribute(d, a, rng=rng)
        assert f2a.fc1.n_out == max(a, d)
        assert len(f2a.synthesize_attribute(rng.standard_normal(d))) == a
    with pytest.raises(ShapeMismatch):
        f2a(np.ones(7))


def test_deterministic_inference(rng):
    f2a = FeatureToAttribute(6, 4, rng=rng)
    x = rng.standard_normal((2, 6))
    np.testing.assert_array_equal(f2a.synthesize_attribute(x).values, f2a.synthesize_attribute(x).values)


def test_mse_examples(rng):
    a = AttributeVector(rng.random(6))
    assert f2a_mse_loss(a.values, a).item() == 0.0
    assert f2a_mse_loss(a.values + 1.0, a).item() == pytest.approx(1.0)
    with pytest.raises(KindMismatch):
        f2a_mse_loss(a.values, AttributeVector(a.values, "synthetic"))


def test_mse_gradcheck_through_both_layers(rng):
    f2a = FeatureToAttribute(5, 4, rng=rng, dtype=np.float64)
    for p in f2a.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    x, target = rng.standard_normal((3, 5)), rng.random((3, 4))
    errs = gradcheck_module(lambda: f2a_mse_loss(f2a(x), target), f2a)
    assert max(errs.values()) <= 1e-4
    assert dn.gradcheck(lambda t: f2a_mse_loss(f2a(t), target), x, 1e-5) <= 1e-4
