"""Shared fixtures: a small generated dataset reused across test modules."""

import pytest

from melab import datagen as dg


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Compact corpus: 3 familiar / 2 novel classes, 32x32 images."""
    cfg = dg.DatasetConfig(n_familiar=3, n_novel=2, train_pairs_per_class=8,
                           dev_per_class=2, test_audio_per_class=6,
                           test_images_per_class=6, image_size=32, seed=77)
    out = tmp_path_factory.mktemp("smallds")
    manifest = dg.build_dataset(cfg, out)
    return out, manifest


@pytest.fixture(scope="session")
def medium_dataset(tmp_path_factory):
    """Slightly richer corpus for sampler audits: 4 familiar / 3 novel."""
    cfg = dg.DatasetConfig(n_familiar=4, n_novel=3, train_pairs_per_class=16,
                           dev_per_class=2, test_audio_per_class=8,
                           test_images_per_class=8, image_size=32, seed=99)
    out = tmp_path_factory.mktemp("meds")
    manifest = dg.build_dataset(cfg, out)
    return out, manifest
