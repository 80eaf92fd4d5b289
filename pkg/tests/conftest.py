"""Session fixtures shared by the acceptance tests.

The heavy artifacts — an IDX-exported image dataset, a trained network, a
depth sweep — are built once per session and reused by every criterion that
needs them.

By default the dataset is scikit-learn's bundled 8x8 digits, written out to
IDX files and read back so the full loading path is exercised.  Point
NOISEBOUND_MNIST_DIR at a directory holding the standard MNIST basenames
(train-images-idx3-ubyte etc., optionally gzipped) to run against MNIST
instead.
"""

import os
import time

import numpy as np
import pytest

from noisebound.cli import MNIST_DIR_ENV, SweepSpec, _resolve_idx_pair, run_sweep
from noisebound.data import load_mnist, subset, write_idx_images, write_idx_labels
from noisebound.linalg import RngStream
from noisebound.network import init_network
from noisebound.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def image_dataset(tmp_path_factory):
    """(Dataset, tag) for the acceptance runs."""
    env_dir = os.environ.get(MNIST_DIR_ENV)
    if env_dir:
        images, labels = _resolve_idx_pair(env_dir, "train")
        return load_mnist(images, labels), f"mnist({env_dir})"

    from sklearn.datasets import load_digits

    bundle = load_digits()
    # digits pixels are 0..16; map onto the full byte range so the loader's
    # /255 scaling lands the features back in [0, 1] with max exactly 1.0
    raw = np.round(bundle.images * (255.0 / 16.0)).astype(np.uint8)
    idx_dir = tmp_path_factory.mktemp("digits-idx")
    image_path = idx_dir / "train-images-idx3-ubyte"
    label_path = idx_dir / "train-labels-idx1-ubyte"
    write_idx_images(image_path, raw)
    write_idx_labels(label_path, bundle.target.astype(np.uint8))
    return load_mnist(image_path, label_path), "sklearn-digits(8x8)"


@pytest.fixture(scope="session")
def trained_net(image_dataset):
    """(params, subset, TrainResult, seconds) for a depth-5 width-40 network
    trained on a 1024-example subset.

    Training runs with the default recipe; on the small digits images it
    typically exhausts the epoch cap short of the stopping fraction, which is
    fine — the audits and noise checks don't require convergence.
    """
    data, _ = image_dataset
    sub = subset(data, 1024, RngStream(0, 0x5B5E7))
    dims = (data.input_dim, 40, 40, 40, 40, data.num_classes)
    params0 = init_network(dims, "inv-sqrt-fanin", RngStream(0, 0x1217))
    t0 = time.perf_counter()
    result = train(params0, sub, TrainConfig())
    elapsed = time.perf_counter() - t0
    return result.params, sub, result, elapsed


@pytest.fixture(scope="session")
def depth_sweep(image_dataset, tmp_path_factory):
    """(rows, slope_rows, seconds) from a width-40 sweep over depths 2..8."""
    data, _ = image_dataset
    spec = SweepSpec(
        axis="depth",
        values=tuple(range(2, 9)),
        width=40,
        depth=None,
        m=1024,
        gamma_class=10.0,
        delta=0.01,
        runs=1,
        seed=0,
        optimizer="sgd",
        learning_rate=0.1,
        batch_size=64,
        stop_fraction=0.99,
        stop_margin=10.0,
        max_epochs=2000,
        init_scheme="inv-sqrt-fanin",
    )
    out_dir = tmp_path_factory.mktemp("depth-sweep")
    t0 = time.perf_counter()
    rows, slope_rows, failed = run_sweep(spec, data, out_dir)
    elapsed = time.perf_counter() - t0
    assert not failed, "sweep runs diverged; acceptance depends on all rows"
    return rows, slope_rows, elapsed
