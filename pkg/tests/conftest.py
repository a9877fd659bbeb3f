import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    from vitgzsl.dataset import SyntheticSpec

    return SyntheticSpec(num_seen=4, num_unseen=2, num_attributes=8, samples_per_class=10, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    from vitgzsl.dataset import generate

    return generate(tiny_spec, np.random.default_rng(tiny_spec.seed))


@pytest.fixture(scope="session")
def tiny_backbone(tiny_dataset):
    from vitgzsl.pipeline import BackboneConfig, train_backbone

    config = BackboneConfig(embed_dim=16, num_layers=2, num_heads=2, backbone_epochs=5)
    model, _ = train_backbone(tiny_dataset, config, seed=0)
    return model


@pytest.fixture(scope="session")
def tiny_config():
    from vitgzsl.pipeline import PipelineConfig

    return PipelineConfig(
        cls_layer=2,
        aam_layer=2,
        aam_epochs=3,
        cvae_hidden=16,
        cvae_latent=4,
        cvae_epochs=3,
        samples_per_unseen=10,
        clf_epochs=20,
    )


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number, ok, detail in sorted(ACCEPTANCE):
            terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
