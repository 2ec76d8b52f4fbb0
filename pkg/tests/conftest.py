import os

import numpy as np
import pytest

from iconnet.audio_io import generate_synthetic
from iconnet.experiment import SYNTHETIC_MODEL, SYNTHETIC_TRAIN, TrainConfig, segment_matrix
from iconnet.estimator import IConNetClassifier
from iconnet.model import save_model


@pytest.fixture(scope="session")
def synthetic_manifest():
    return generate_synthetic(0, 12)


@pytest.fixture(scope="session")
def trained_synthetic(synthetic_manifest, tmp_path_factory):
    """IConNet (reduced synthetic front end) fitted on every synthetic recording.

    Returns ``(estimator, model_path)``.
    """
    cfg = TrainConfig(**SYNTHETIC_TRAIN)
    ids = [e.id for e in synthetic_manifest]
    X, y, _ = segment_matrix(synthetic_manifest, ids, cfg.window_samples, cfg.train_hop_samples)
    est = IConNetClassifier(**SYNTHETIC_MODEL, max_epochs=8, batch_size=cfg.batch_size,
                            learning_rate=cfg.learning_rate, random_state=0)
    est.fit(X, y)
    path = tmp_path_factory.mktemp("models") / "synthetic.icon"
    save_model(est.model_, path, {"segment_len": cfg.window_samples, "sample_rate_hz": cfg.sample_rate_hz})
    return est, path


@pytest.fixture(scope="session")
def corpus_root():
    root = os.environ.get("ICONNET_DATA")
    if not root:
        pytest.skip("ICONNET_DATA not set; PhysioNet 2016 corpus unavailable")
    return root


def tone_burst(n, rate, f0, center, width):
    t = np.arange(n)
    env = np.exp(-0.5 * ((t - center) / width) ** 2)
    return env * np.sin(2 * np.pi * f0 * t / rate)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
