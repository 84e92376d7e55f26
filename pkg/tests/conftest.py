"""Shared fixtures: one dataset build and one source training per session.

Training the source classifier takes about 90 s on one CPU; every test
that needs a trained model shares the session-scoped instance and must
treat it as read-only (clone before mutating).
"""

import pytest

from gues.experiments import (ExperimentConfig, build_datasets, build_heldout,
                              train_source_classifier)


@pytest.fixture(scope="session")
def config(tmp_path_factory):
    return ExperimentConfig(out_dir=str(tmp_path_factory.mktemp("runs")))


@pytest.fixture(scope="session")
def datasets(config):
    return build_datasets(config)


@pytest.fixture(scope="session")
def source_samples(datasets):
    return datasets[0]


@pytest.fixture(scope="session")
def target_samples(datasets):
    return datasets[1]


@pytest.fixture(scope="session")
def trained(config, source_samples):
    return train_source_classifier(config, source_samples)


@pytest.fixture(scope="session")
def classifier(trained):
    return trained[0]


@pytest.fixture(scope="session")
def holdout_scores(trained):
    return trained[1]


@pytest.fixture(scope="session")
def heldout20(config):
    return build_heldout(config, 20)
