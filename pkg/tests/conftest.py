"""Shared fixtures: an IDX-encoded digits corpus and a trained model on it.

The image benchmark is the sklearn 8x8 digits set written through our own IDX
codec, so the binary ingestion path is exercised end to end on every run.
Training fixtures are session-scoped because several modules share them.
"""

import numpy as np
import pytest
from sklearn.datasets import load_digits

from otrobust.datasets import (load_idx, stratified_subset, write_idx_images,
                               write_idx_labels)
from otrobust.neighbors import build_atlas
from otrobust.network import ResidualNet, train_network


@pytest.fixture(scope="session")
def digits_idx_paths(tmp_path_factory):
    root = tmp_path_factory.mktemp("digits_idx")
    raw = load_digits()
    images = np.round(raw.data / 16.0 * 255.0).astype(np.uint8).reshape(-1, 8, 8)
    labels = raw.target.astype(np.uint8)
    # fixed disjoint split before any subsetting
    rng = np.random.default_rng(12345)
    order = rng.permutation(len(images))
    tr, te = order[:1400], order[1400:]
    paths = {
        "train_images": root / "train-images.idx",
        "train_labels": root / "train-labels.idx",
        "test_images": root / "test-images.idx",
        "test_labels": root / "test-labels.idx",
    }
    write_idx_images(paths["train_images"], images[tr], 8, 8)
    write_idx_labels(paths["train_labels"], labels[tr])
    write_idx_images(paths["test_images"], images[te], 8, 8)
    write_idx_labels(paths["test_labels"], labels[te])
    return paths


@pytest.fixture(scope="session")
def digits_split(digits_idx_paths):
    """1000-train / 200-test image subset, loaded through the IDX codec."""
    p = digits_idx_paths
    train = load_idx(p["train_images"], p["train_labels"], name="digits")
    test = load_idx(p["test_images"], p["test_labels"], name="digits")
    return stratified_subset(train, 1000, seed=7), stratified_subset(test, 200, seed=8)


@pytest.fixture(scope="session")
def digits_model(digits_split):
    """Energy-regularized classifier + transport atlas on the digits subset."""
    train, _ = digits_split
    net = ResidualNet(train.dim, train.num_classes, depth=3, seed=0)
    train_network(net, train.x, train.y, task="classification", epochs=30,
                  batch_size=64, lr=0.05, alpha=0.01, seed=0)
    atlas = build_atlas(net, train.x, train.y)
    return net, atlas


@pytest.fixture(scope="session")
def digits_model_smooth(digits_split):
    """Deeper, strongly energy-regularized variant of digits_model.

    The heavier displacement penalty flattens the feature map's local
    curvature, so tight smoothness windows stay feasible without widening —
    the regime where the interpolation defense snaps hardest to the atlas.
    """
    train, _ = digits_split
    net = ResidualNet(train.dim, train.num_classes, depth=5, seed=0)
    train_network(net, train.x, train.y, task="classification", epochs=30,
                  batch_size=64, lr=0.05, alpha=0.05, seed=0)
    atlas = build_atlas(net, train.x, train.y)
    return net, atlas
