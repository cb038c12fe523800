# [file name]: data_service.py
"""Dataset acquisition and per-cell dataset construction."""

import os
from dataclasses import dataclass
from functools import lru_cache

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import requests  # noqa: E402

from ml_training.console import status  # noqa: E402
from ml_training.data_pipeline import (MNIST_FILES, MaskSpec, UnlabeledPool, dump_masked_dataset,  # noqa: E402
                                       load_mnist, mask_dataset, mnist_available, subsample_labeled,
                                       synthetic_blobs)
from ml_training.errors import DataError, ValidationError  # noqa: E402
from ml_training.seeding import substream_seed  # noqa: E402

DEFAULT_MIRROR = "https://storage.googleapis.com/cvdf-datasets/mnist/"


@dataclass(frozen=True)
class CellData:
    labeled: object
    pool: UnlabeledPool
    test: object
    num_classes: int = 10

    @property
    def input_shape(self):
        return tuple(self.test.inputs.shape[1:])


@lru_cache(maxsize=4)
def _cached_mnist(data_dir, split):
    return load_mnist(data_dir, split)


def _subsample_if_smaller(dataset, size, seed):
    if size >= len(dataset):
        return dataset
    return subsample_labeled(dataset, size, seed)


class DataService:
    def __init__(self, mirror=None):
        self.mirror = mirror or os.getenv("BDK_MNIST_MIRROR", DEFAULT_MIRROR)

    def fetch_data(self, data_dir, force=False, timeout=60):
        """Download the four gzip IDX files into data_dir"""
        os.makedirs(data_dir, exist_ok=True)
        downloaded, skipped = [], []
        for pair in MNIST_FILES.values():
            for name in pair:
                target = os.path.join(data_dir, name + ".gz")
                if not force and (os.path.exists(target) or os.path.exists(os.path.join(data_dir, name))):
                    skipped.append(name)
                    continue
                url = self.mirror.rstrip("/") + "/" + name + ".gz"
                status(f"📥 Downloading {url}")
                try:
                    response = requests.get(url, timeout=timeout)
                    response.raise_for_status()
                except requests.RequestException as e:
                    raise DataError(f"download failed for {url}: {e}") from e
                with open(target + ".part", 'wb') as f:
                    f.write(response.content)
                os.replace(target + ".part", target)
                downloaded.append(name)

        if not mnist_available(data_dir):
            raise DataError(f"MNIST files still missing in {data_dir}")
        status(f"✅ MNIST ready in {data_dir} ({len(downloaded)} downloaded, {len(skipped)} already present)")
        return {"status": "success", "data_dir": data_dir, "downloaded": downloaded, "skipped": skipped}

    def check_available(self, cfg):
        if cfg.dataset == "mnist" and not mnist_available(cfg.data_dir):
            raise DataError(f"MNIST IDX files not found in '{cfg.data_dir}' (run fetch-data or set BDK_DATA_DIR)")

    def build_cell_data(self, cfg, cell, data_seed):
        """
        Labeled set, unlabeled pool and test set for one cell.

        The pool is masked once; the labeled set is drawn from the masked
        pool so labeled and unlabeled images share their occlusions. Test
        images are masked from an independent substream.
        """
        if cfg.dataset == "blobs":
            return self._build_blob_data(cfg, cell, data_seed)

        self.check_available(cfg)
        train = _cached_mnist(cfg.data_dir, "train")
        test = _cached_mnist(cfg.data_dir, "test")
        if cfg.pool_size > len(train):
            raise ValidationError(f"pool_size {cfg.pool_size} exceeds the {len(train)} training images")

        pool = _subsample_if_smaller(train, cfg.pool_size, substream_seed(data_seed, "pool_subsample"))
        pool = mask_dataset(pool, MaskSpec(cell.mask_side, substream_seed(data_seed, "train_mask")))
        labeled = _subsample_if_smaller(pool, cell.n_labeled, substream_seed(data_seed, "subsample"))

        test = _subsample_if_smaller(test, cfg.test_size, substream_seed(data_seed, "test_subsample"))
        test = mask_dataset(test, MaskSpec(cell.mask_side, substream_seed(data_seed, "test_mask")))
        return CellData(labeled, pool.unlabeled(), test)

    def _build_blob_data(self, cfg, cell, data_seed):
        train = synthetic_blobs(cfg.blob_classes, cfg.blob_dims, cfg.blob_per_class, cfg.blob_separation,
                                substream_seed(data_seed, "blobs_train"))
        test = synthetic_blobs(cfg.blob_classes, cfg.blob_dims, cfg.blob_test_per_class, cfg.blob_separation,
                               substream_seed(data_seed, "blobs_test"))
        pool = _subsample_if_smaller(train, cfg.pool_size, substream_seed(data_seed, "pool_subsample"))
        labeled = _subsample_if_smaller(pool, cell.n_labeled, substream_seed(data_seed, "subsample"))
        return CellData(labeled, pool.unlabeled(), test, cfg.blob_classes)

    def dump_cell_data(self, cfg, cell, data_seed, out_dir):
        """Write the cell's labeled and test sets as IDX files with provenance sidecars"""
        data = self.build_cell_data(cfg, cell, data_seed)
        paths = {
            "labeled": dump_masked_dataset(data.labeled, out_dir, f"{cell.cell_id}-labeled"),
            "test": dump_masked_dataset(data.test, out_dir, f"{cell.cell_id}-test"),
        }
        status(f"💾 Masked datasets written to {out_dir}")
        return paths

    def mask_preview(self, data_dir, m, out_path, count=8, seed=0):
        """Original test images above their masked copies, saved as PNG or SVG"""
        if count < 1:
            raise ValidationError("preview needs at least one image")
        test = _cached_mnist(data_dir, "test")
        sample = _subsample_if_smaller(test, count, substream_seed(seed, "test_subsample"))
        masked = mask_dataset(sample, MaskSpec(m, substream_seed(seed, "test_mask")))

        fig, axes = plt.subplots(2, len(sample), figsize=(1.2 * len(sample), 2.6), squeeze=False)
        for col in range(len(sample)):
            for row, images in enumerate((sample.inputs, masked.inputs)):
                ax = axes[row][col]
                ax.imshow(images[col, 0], cmap="gray", vmin=0.0, vmax=1.0)
                ax.set_xticks([])
                ax.set_yticks([])
        axes[0][0].set_ylabel("original")
        axes[1][0].set_ylabel(f"m={m}")
        fig.suptitle(f"mask side {m}, rate {masked.provenance.mask.rate:.3f}")
        fig.tight_layout()

        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        fig.savefig(out_path, metadata={"Date": None} if out_path.endswith(".svg") else None)
        plt.close(fig)
        status(f"🖼️ Mask preview saved to {out_path}")
        return {"status": "success", "path": out_path, "mask_rate": masked.provenance.mask.rate,
                "corners": np.asarray(masked.provenance.corners).tolist()}


data_service = DataService()
