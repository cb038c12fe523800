import gzip
import os
import struct
from dataclasses import replace

import numpy as np
import pytest

from app.config import preset
from ml_training.console import set_quiet
from ml_training.data_pipeline import IMAGE_MAGIC, LABEL_MAGIC, MNIST_FILES


def pytest_collection_modifyitems(config, items):
    if os.getenv("BDK_MNIST_DIR"):
        return
    skip = pytest.mark.skip(reason="set BDK_MNIST_DIR to the MNIST IDX directory")
    for item in items:
        if "mnist" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def quiet_console():
    set_quiet(True)
    yield
    set_quiet(False)


def idx_images(pixels):
    n, rows, cols = pixels.shape
    return struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pixels.astype(np.uint8).tobytes()


def idx_labels(labels):
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()


@pytest.fixture
def fake_mnist_dir(tmp_path):
    """Gzipped IDX files of random 28x28 digits: 600 train, 200 test"""
    rng = np.random.default_rng(1234)
    directory = tmp_path / "mnist"
    directory.mkdir()
    for split, count in (("train", 600), ("test", 200)):
        images_name, labels_name = MNIST_FILES[split]
        labels = rng.integers(0, 10, size=count)
        pixels = rng.integers(0, 256, size=(count, 28, 28))
        # brighten a label-dependent column band so the task is learnable
        for digit in range(10):
            pixels[labels == digit, :, 2 * digit:2 * digit + 3] = 255
        with gzip.open(directory / (images_name + ".gz"), 'wb') as f:
            f.write(idx_images(pixels))
        with gzip.open(directory / (labels_name + ".gz"), 'wb') as f:
            f.write(idx_labels(labels))
    return str(directory)


@pytest.fixture
def blobs_config(tmp_path):
    """Short blob-data grid that finishes in seconds"""
    cfg = preset("blobs")
    return replace(
        cfg,
        n_labeled=(100,),
        capacity_factors=(1.0,),
        pool_size=300,
        blob_per_class=100,
        blob_test_per_class=40,
        base_width=8,
        checkpoint_every=100,
        out_dir=str(tmp_path / "results"),
        teacher=replace(cfg.teacher, batch_size=50, burn_in=100, thinning=20, total_iters=400),
    )


@pytest.fixture
def mnist_config(fake_mnist_dir, tmp_path):
    cfg = preset("desk")
    return replace(
        cfg,
        data_dir=fake_mnist_dir,
        n_labeled=(100,),
        mask_sides=(0, 14),
        pool_size=300,
        test_size=100,
        base_width=8,
        checkpoint_every=0,
        out_dir=str(tmp_path / "mnist-results"),
        teacher=replace(cfg.teacher, batch_size=50, burn_in=40, thinning=20, total_iters=200),
    )


def numeric_gradient(loss, values, h=1e-5):
    """Central finite differences of loss() w.r.t. the array `values`, perturbed in place"""
    grad = np.zeros_like(values)
    for i in range(values.size):
        original = values[i]
        values[i] = original + h
        upper = loss()
        values[i] = original - h
        lower = loss()
        values[i] = original
        grad[i] = (upper - lower) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
