import numpy as np
import pytest

from otrobust.datasets import SyntheticSpec, generate_synthetic
from otrobust.embedding import embedding_attack, train_embedding, triplet_loss
from otrobust.errors import ConfigError


def test_triplet_loss_zero_when_negative_far():
    a = np.array([1.0, 0.0])
    n = np.array([4.0, 0.0])
    assert triplet_loss(a, a, n, margin=0.5) == 0.0


def test_triplet_loss_anchor_equals_negative():
    a = np.array([0.0, 0.0])
    p = np.array([3.0, 4.0])
    assert triplet_loss(a, p, a, margin=0.5) == pytest.approx(25.0 + 0.5)


def test_triplet_loss_matches_hand_arithmetic():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a, p, n = rng.normal(size=(3, 3))
        m = float(rng.uniform(0.1, 1.0))
        expect = max(0.0, float(((a - p) ** 2).sum() - ((a - n) ** 2).sum() + m))
        assert triplet_loss(a, p, n, margin=m) == pytest.approx(expect, abs=1e-12)


def test_triplet_loss_nonnegative_and_zero_condition():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, p, n = rng.normal(size=(3, 4))
        val = triplet_loss(a, p, n, margin=0.3)
        assert val >= 0.0
        gap = ((a - p) ** 2).sum() + 0.3 - ((a - n) ** 2).sum()
        assert (val == 0.0) == (gap <= 0.0)


def _two_blob_data(seed=0, n=120):
    tr, _ = generate_synthetic(SyntheticSpec(dim=6, num_classes=2, class_std=0.15,
                                             train_count=n, test_count=10,
                                             rng_seed=seed))
    return tr.x, tr.y


def test_training_separates_classes():
    x, y = _two_blob_data()
    net = train_embedding(x, y, embed_dim=4, epochs=30, batch_size=32,
                          learning_rate=0.05, seed=0)
    e = net.outputs(x)
    same, diff = [], []
    for i in range(0, len(x), 3):
        for j in range(i + 1, len(x), 3):
            d = float(np.linalg.norm(e[i] - e[j]))
            (same if y[i] == y[j] else diff).append(d)
    assert np.mean(same) < np.mean(diff)


def test_zero_epochs_returns_random_init():
    x, y = _two_blob_data(seed=1, n=20)
    a = train_embedding(x, y, embed_dim=3, epochs=0, seed=5)
    b = train_embedding(x, y, embed_dim=3, epochs=0, seed=5)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p, q)


def test_seed_determinism():
    x, y = _two_blob_data(seed=2, n=40)
    a = train_embedding(x, y, embed_dim=3, epochs=5, seed=9)
    b = train_embedding(x, y, embed_dim=3, epochs=5, seed=9)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p, q)


def test_single_class_rejected():
    x = np.random.default_rng(3).normal(size=(10, 4))
    with pytest.raises(ConfigError):
        train_embedding(x, np.zeros(10, dtype=int), epochs=1)


def test_attack_epsilon_zero_is_identity():
    x, y = _two_blob_data(seed=4, n=20)
    net = train_embedding(x, y, embed_dim=3, epochs=2, seed=0)
    np.testing.assert_array_equal(embedding_attack(net, x[0], 0.0), x[0])


def test_attack_projection_invariant():
    x, y = _two_blob_data(seed=5, n=30)
    net = train_embedding(x, y, embed_dim=3, epochs=3, seed=0)
    for eps in (0.05, 0.3, 1.0):
        for i in range(5):
            adv = embedding_attack(net, x[i], eps, steps=15, seed=i)
            assert np.linalg.norm(adv - x[i]) <= eps + 1e-9


def test_attack_beats_random_noise_on_average():
    x, y = _two_blob_data(seed=6, n=100)
    net = train_embedding(x, y, embed_dim=4, epochs=25, batch_size=32,
                          learning_rate=0.05, seed=1)
    rng = np.random.default_rng(7)
    eps = 0.4
    adv_disp, noise_disp = [], []
    for i in range(50):
        base = net.outputs(x[i][None])[0]
        adv = embedding_attack(net, x[i], eps, steps=20, seed=i)
        adv_disp.append(np.linalg.norm(net.outputs(adv[None])[0] - base))
        eta = rng.normal(size=x.shape[1])
        eta = eta / np.linalg.norm(eta) * eps
        noise_disp.append(np.linalg.norm(net.outputs((x[i] + eta)[None])[0] - base))
    assert np.mean(adv_disp) >= np.mean(noise_disp)
