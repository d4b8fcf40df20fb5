import os

import numpy as np
import pytest
import torch

from sucode.config import RunConfig
from sucode.synth import DegradationParams, SceneSpec, build_dataset, default_palette

torch.set_num_threads(max(1, os.cpu_count() or 1))


@pytest.fixture
def toy_config():
    return RunConfig(class_count=3, codebook_entries=32, embed_dim=16,
                     image_size=64, epochs=2, batch_size=4, seed=11)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 train + 4 test triplets at 64x64 with C=3; shared across tests."""
    root = tmp_path_factory.mktemp("tinydata")
    palette = default_palette(3)
    params = DegradationParams()
    train = root / "train"
    test = root / "test"
    build_dataset(8, SceneSpec(size=64, object_count=4, palette=palette, seed=3),
                  params, str(train))
    build_dataset(4, SceneSpec(size=64, object_count=4, palette=palette, seed=99),
                  params, str(test))
    return {"train": str(train), "test": str(test)}


def brute_force_nearest(z: np.ndarray, book: np.ndarray) -> np.ndarray:
    """Exhaustive per-location argmin oracle (float64, first index on ties)."""
    h, w, _ = z.shape
    idx = np.zeros((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            dist = ((book.astype(np.float64) - z[i, j].astype(np.float64)) ** 2
                    ).sum(axis=1)
            idx[i, j] = int(np.argmin(dist))
    return idx
