import numpy as np
import pytest

from divergence import AuditConfig, EstimatorConfig
from domains import rotated_domains, sample_examples
from harness import ExperimentConfig, Method
from training import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_train_config():
    return TrainConfig(
        epochs=3,
        batch_size=16,
        encoder_widths=[8, 4],
        discriminator_widths=[8],
        projection_size=8,
        warmup_iterations=0,
        lr_classifier=0.05,
        lr_discriminator=0.05,
    )


@pytest.fixture
def moons_specs():
    return rotated_domains([0.0, 30.0, 60.0], "moons", noise=0.05)


@pytest.fixture
def moons_sources(moons_specs):
    return {
        spec.domain_id: sample_examples(spec, 120, np.random.default_rng(100 + spec.domain_id))
        for spec in moons_specs
    }


@pytest.fixture
def fast_estimator():
    return EstimatorConfig(folds=3, max_per_domain=150, epochs=40, hidden=8)


@pytest.fixture
def small_experiment(small_train_config, fast_estimator):
    return ExperimentConfig(
        angles=[0.0, 30.0, 60.0],
        n_per_domain=80,
        seeds=[1],
        methods=[Method.g2dm],
        train=small_train_config.model_copy(update={"epochs": 2}),
        estimator=fast_estimator,
        audit=AuditConfig(grid_step=0.5, refinements=2, mixture_size=60, lambda_epochs=20, estimator=fast_estimator),
        hull_pairs=2,
        rp_sizes=[4, 0],
    )
