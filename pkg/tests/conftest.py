import matplotlib
import numpy as np
import pytest
import torch

matplotlib.use("Agg")
torch.set_num_threads(1)  # single-core sandbox; oversubscription only hurts

from fedbackdoor.data import LabeledDataset, load_digits_dataset, synthetic_shapes
from fedbackdoor.models import ClassifierSpec, init_params, params_from_module, module_schema
from fedbackdoor.params import ModelParams


@pytest.fixture(scope="session")
def digits16():
    """Real handwritten digits at desk-scale resolution."""
    return load_digits_dataset(image_size=16)


@pytest.fixture(scope="session")
def tiny_shapes():
    return synthetic_shapes(n_train_per_class=24, n_test_per_class=8, image_size=16, seed=3)


@pytest.fixture(scope="session")
def digits_spec(digits16):
    train, _ = digits16
    return ClassifierSpec(
        input_shape=train.image_shape, num_classes=10, conv_channels=(8, 16, 32), feature_dim=64
    )


def train_centralized(spec, dataset, epochs=4, lr=0.2, batch_size=32, seed=0):
    """Plain centralized SGD, used as an independent reference model."""
    from fedbackdoor.models import build_with_params, to_nchw

    torch.manual_seed(seed)
    model = spec.build()
    optimizer = torch.optim.SGD(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    x, y = dataset.samples, dataset.labels
    for _ in range(epochs):
        perm = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = perm[start : start + batch_size]
            optimizer.zero_grad()
            loss = torch.nn.functional.cross_entropy(
                model(to_nchw(x[idx])), torch.from_numpy(y[idx])
            )
            loss.backward()
            optimizer.step()
    return params_from_module(model, module_schema(spec))


@pytest.fixture(scope="session")
def clean_digits_model(digits16, digits_spec):
    """A well-trained clean classifier shared by metric and defense tests."""
    train, test = digits16
    params = train_centralized(digits_spec, train, epochs=12)
    from fedbackdoor.metrics import main_task_accuracy

    acc = main_task_accuracy(digits_spec, params, test)
    assert acc >= 0.9, f"fixture model only reached {acc:.3f}"
    return params
