import numpy as np
import pytest

from vitgzsl.aam import AttributeFeatureExtractor
from vitgzsl.errors import ConfigError, LayerOutOfRange, MissingModule
from vitgzsl.features import assemble, average_patches, canonical_variant
from vitgzsl.vit import LayerFeatures


@pytest.fixture
def feats(rng):
    return LayerFeatures(rng.standard_normal((3, 5, 8)), rng.standard_normal((3, 5, 4, 8)))


@pytest.fixture
def extractor(rng):
    ext = AttributeFeatureExtractor(8, 6, [0, 1], rng=rng, dtype=np.float64)
    ext.trained = True
    return ext


def test_avg_loop_oracle(feats):
    out = assemble(feats, None, "avg", 1, 2).vector
    patches = feats.layer(2)[1]
    for i in range(5):
        acc = np.zeros(8)
        for row in patches[i]:
            acc += row
        np.testing.assert_allclose(out[i], acc / len(patches[i]), atol=1e-7)


def test_avg_of_equal_patches_and_permutation(rng):
    row = rng.standard_normal(8)
    np.testing.assert_allclose(average_patches(np.tile(row, (4, 1))), row, atol=1e-15)
    p = rng.standard_normal((2, 16, 8)) * 1e3
    for _ in range(10):
        np.testing.assert_array_equal(average_patches(p[:, rng.permutation(16)]), average_patches(p))


def test_variants_and_order(feats, extractor):
    cls = assemble(feats, None, "cls", 2, 3).vector
    np.testing.assert_array_equal(cls, feats.layer(2)[0])
    aam = assemble(feats, extractor, "aam", 2, 3).vector
    np.testing.assert_array_equal(aam, extractor.features(feats.layer(2)[0], feats.layer(3)[1]))
    both = assemble(feats, extractor, "cls+aam", 2, 3)
    assert both.vector.shape == (5, 16)
    np.testing.assert_array_equal(both.vector[:, :8], cls)
    np.testing.assert_array_equal(both.vector[:, 8:], aam)
    again = assemble(feats, extractor, "cls_plus_aam", 2, 3)
    np.testing.assert_array_equal(again.vector, both.vector)
    assert both.variant == "cls_plus_aam" and both.cls_layer == 2 and both.aam_layer == 3


def test_l2norm_halves(feats, extractor):
    v = assemble(feats, extractor, "cls+aam", 1, 1, l2norm=True).vector
    np.testing.assert_allclose(np.linalg.norm(v[:, :8], axis=1), 1.0)
    np.testing.assert_allclose(np.linalg.norm(v[:, 8:], axis=1), 1.0)


def test_errors(feats, extractor):
    with pytest.raises(LayerOutOfRange):
        assemble(feats, None, "cls", 4, 1)
    with pytest.raises(LayerOutOfRange):
        assemble(feats, None, "avg", 1, 0)
    untrained = AttributeFeatureExtractor(8, 6, [0, 1])
    with pytest.raises(MissingModule):
        assemble(feats, untrained, "aam", 1, 1)
    with pytest.raises(MissingModule):
        assemble(feats, None, "cls+aam", 1, 1)
    with pytest.raises(ConfigError):
        canonical_variant("max")


def test_single_image_features(rng, extractor):
    single = LayerFeatures(rng.standard_normal((2, 8)), rng.standard_normal((2, 4, 8)))
    assert assemble(single, extractor, "cls+aam", 1, 2).vector.shape == (16,)
