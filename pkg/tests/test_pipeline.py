from dataclasses import replace

import numpy as np
import pytest

from vitgzsl.dataset import SEEN_TEST, SEEN_TRAIN, SYNTHETIC, UNSEEN_TEST, load_features, save_features
from vitgzsl.errors import ConfigError
from vitgzsl.gzsl import evaluate
from vitgzsl.pipeline import (
    BackboneConfig,
    GzslPipeline,
    PipelineConfig,
    best_by_variant,
    layer_sweep,
    load_classifier,
    load_cvae,
    load_extractor,
    run_gzsl_protocol,
    save_classifier,
    save_cvae,
    save_extractor,
    stage_rng,
    sweep_csv,
)


def _params(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


def test_stage_rngs_are_independent():
    a = stage_rng(0, "aam").random(4)
    assert np.array_equal(a, stage_rng(0, "aam").random(4))
    assert not np.array_equal(a, stage_rng(0, "cvae").random(4))
    assert not np.array_equal(a, stage_rng(1, "aam").random(4))


def test_config_parsing():
    cfg = PipelineConfig.from_mapping({"variant": "avg", "use_mse": "false", "aam_lr": "1e-4", "aam_epochs": "7"})
    assert (cfg.variant, cfg.use_mse, cfg.aam_lr, cfg.aam_epochs) == ("avg", False, 1e-4, 7)
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"aam_lrr": "1"})
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"aam_epochs": "many"})
    with pytest.raises(ConfigError):
        PipelineConfig(variant="mean")
    assert BackboneConfig.from_mapping({"embed_dim": "8"}).embed_dim == 8


def test_tiny_run_report_invariants(tiny_dataset, tiny_backbone, tiny_config):
    p = GzslPipeline(tiny_dataset, tiny_backbone, tiny_config)
    report = p.run()
    assert min(report.acc_s, report.acc_u) <= report.acc_h <= max(report.acc_s, report.acc_u)
    denom = report.acc_s + report.acc_u
    assert report.acc_h == (2 * report.acc_s * report.acc_u / denom if denom else 0.0)
    assert set(report.per_class) == set(range(tiny_dataset.num_classes))
    n_test = np.isin(tiny_dataset.tags, [SEEN_TEST, UNSEEN_TEST]).sum()
    assert sum(report.confusion.values()) == n_test
    assert p.synthetic.features.shape == (10 * len(tiny_dataset.unseen_classes), p.real.features.shape[1])
    assert np.all(p.synthetic.tags == SYNTHETIC)


def test_no_training_stage_sees_test_rows(tiny_dataset, tiny_backbone, tiny_config):
    p = GzslPipeline(tiny_dataset, tiny_backbone, tiny_config)
    p.run()
    assert [stage for stage, _ in p.audit.records] == ["aam", "cvae", "classifier"]
    assert p.audit.stages_touching(UNSEEN_TEST) == []
    assert p.audit.stages_touching(SEEN_TEST) == []
    assert p.audit.stages_touching(SYNTHETIC) == ["classifier"]
    n_train = int(np.sum(tiny_dataset.tags == SEEN_TRAIN))
    for stage, counts in p.audit.records:
        assert counts["seen_train"] == n_train, stage


def test_backbone_frozen_by_downstream_training(tiny_dataset, tiny_backbone, tiny_config):
    before = _params(tiny_backbone)
    run_gzsl_protocol(tiny_dataset, tiny_backbone, tiny_config)
    after = _params(tiny_backbone)
    assert before.keys() == after.keys()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_run_is_deterministic(tiny_dataset, tiny_backbone, tiny_config):
    a = run_gzsl_protocol(tiny_dataset, tiny_backbone, tiny_config)
    b = run_gzsl_protocol(tiny_dataset, tiny_backbone, tiny_config)
    assert a.to_csv() == b.to_csv()


@pytest.mark.parametrize("variant", ["cls", "avg", "aam"])
def test_other_variants_run(tiny_dataset, tiny_backbone, tiny_config, variant):
    p = GzslPipeline(tiny_dataset, tiny_backbone, replace(tiny_config, variant=variant))
    report = p.run()
    assert (p.extractor is None) == (variant != "aam")
    assert 0.0 <= report.acc_h <= 100.0


def test_feature_store_replay(tiny_dataset, tiny_backbone, tiny_config, tmp_path):
    p = GzslPipeline(tiny_dataset, tiny_backbone, tiny_config)
    report = p.run()
    save_features(tmp_path / "real.vgzf", p.real)
    save_features(tmp_path / "synth.vgzf", p.synthetic)
    save_classifier(tmp_path / "clf.vgzw", p.classifier)

    real = load_features(tmp_path / "real.vgzf")
    test = real.select(SEEN_TEST, UNSEEN_TEST)
    clf = load_classifier(tmp_path / "clf.vgzw")
    replay = evaluate(clf, test.features, test.labels, tiny_dataset.seen_classes, tiny_dataset.unseen_classes)
    assert replay == report

    q = GzslPipeline(tiny_dataset, tiny_backbone, tiny_config)
    q.train_classifier(real, load_features(tmp_path / "synth.vgzf"))
    assert q.evaluate(real) == report


def test_module_files_round_trip(tiny_dataset, tiny_backbone, tiny_config, tmp_path):
    p = GzslPipeline(tiny_dataset, tiny_backbone, tiny_config)
    p.run()
    save_extractor(tmp_path / "aam.vgzw", p.extractor, tiny_config)
    ext, layers = load_extractor(tmp_path / "aam.vgzw")
    assert layers == (2, 2)
    for k, v in p.extractor.state_dict().items():
        np.testing.assert_array_equal(ext.state_dict()[k], v)
    save_cvae(tmp_path / "cvae.vgzw", p.cvae)
    cvae = load_cvae(tmp_path / "cvae.vgzw")
    assert cvae.trained and cvae.recon == p.cvae.recon
    for k, v in p.cvae.state_dict().items():
        np.testing.assert_array_equal(cvae.state_dict()[k], v)


def test_layer_sweep_rows(tiny_dataset, tiny_backbone, tiny_config):
    rows = layer_sweep(tiny_dataset, tiny_backbone, [2], ["cls+aam"], tiny_config)
    assert len(rows) == 1 and rows[0].layer == 2 and rows[0].variant == "cls+aam"
    assert min(rows[0].acc_s, rows[0].acc_u) <= rows[0].acc_h <= max(rows[0].acc_s, rows[0].acc_u)
    single = run_gzsl_protocol(tiny_dataset, tiny_backbone, tiny_config)
    assert rows[0].acc_h == single.acc_h
    lines = sweep_csv(rows).splitlines()
    assert lines[0] == "layer,variant,acc_s,acc_u,acc_h" and lines[1].startswith("2,cls+aam,")


def test_layer_sweep_grid_order(tiny_dataset, tiny_backbone, tiny_config):
    rows = layer_sweep(tiny_dataset, tiny_backbone, [2, 1], ["cls", "avg"], replace(tiny_config, clf_epochs=5))
    assert [(r.layer, r.variant) for r in rows] == [(1, "avg"), (1, "cls"), (2, "avg"), (2, "cls")]
    best = best_by_variant(rows)
    assert set(best) == {"avg", "cls"}
    assert best["cls"].acc_h == max(r.acc_h for r in rows if r.variant == "cls")
