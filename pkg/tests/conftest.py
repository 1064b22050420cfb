import numpy as np
import pytest
import yaml

from app.net import init_params
from app.schemas import ExperimentConfig, ModelConfig
from app.tensor import backward, no_grad

# Scaled-down experiment that runs a full search/train/eval pipeline in seconds.
TINY_CONFIG_YAML = """
seed: 3
model:
  stem_channels: 4
  stage_widths: [4, 6, 8, 8]
  kernel: 3
  searched_stages: [1, 2]
bilevel:
  search_epochs: 1
  retrain_epochs: 2
  iters_per_epoch: 1
  warmup_epochs: 1
data:
  dataset_seed: 5
  n_train_ids: 4
  n_test_ids: 3
  images_per_modality: 4
  height: 16
  width: 8
  identities_per_batch: 2
  images_per_identity: 2
"""


GRADIENT_SEEDS = range(100)


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_gradient(build_loss, tensor, h=1e-6) -> np.ndarray:
    """Central differences of build_loss() with respect to every entry of tensor.data."""
    grad = np.zeros_like(tensor.data)
    with no_grad():
        for idx in np.ndindex(tensor.data.shape):
            original = tensor.data[idx]
            tensor.data[idx] = original + h
            f_plus = build_loss().item()
            tensor.data[idx] = original - h
            f_minus = build_loss().item()
            tensor.data[idx] = original
            grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def gradient_error(build_loss, *tensors, h=1e-6) -> float:
    for t in tensors:
        t.zero_grad()
    backward(build_loss())
    analytic = [t.grad.copy() for t in tensors]
    numeric = [numeric_gradient(build_loss, t, h) for t in tensors]
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_experiment():
    return ExperimentConfig.model_validate(yaml.safe_load(TINY_CONFIG_YAML))


@pytest.fixture
def tiny_model_config(tiny_experiment):
    return tiny_experiment.model


@pytest.fixture
def tiny_net(tiny_model_config):
    return init_params(tiny_model_config, np.random.default_rng(11))


@pytest.fixture
def default_model_config():
    return ModelConfig(num_identities=8)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG_YAML)
    return str(path)


@pytest.fixture
def mock_env(monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("OUTPUT_DIR", "/tmp/nfs-runs")
    monkeypatch.setenv("LOG_JSON", "false")
    yield
