import numpy as np
import pytest

from afpm.data_model import DatasetWriter


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_toy_dataset(path, task="mi", n_trials=3, channels=("C3", "CZ", "C4"),
                      n_samples=32, rate_hz=256.0, labels=None,
                      domain_ids=None, data=None):
    """Small on-disk dataset for IO and pipeline tests."""
    rng = np.random.default_rng(0)
    writer = DatasetWriter(out_dir=str(path), name="toy", task=task,
                           rate_hz=rate_hz,
                           class_names=("class_a", "class_b"))
    for i in range(n_trials):
        x = data[i] if data is not None else rng.standard_normal((len(channels), n_samples))
        writer.add_trial(
            x, channels,
            labels[i] if labels is not None else i % 2,
            domain_ids[i] if domain_ids is not None else f"toy:s00:{i % 2}",
        )
    return writer.finish()


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))
