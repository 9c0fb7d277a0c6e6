"""Metric learning for neighbour retrieval, plus the attack that targets it.

A small net is trained with a triplet hinge so same-class points land closer
than different-class points; retrieval then measures Euclidean distance on
net.outputs(x) instead of raw inputs. The embedding attack probes the known
trade-off: a learned retrieval space improves neighbourhoods but gives an
adversary a differentiable handle on them.
"""

import numpy as np

from .errors import ConfigError
from .network import KIND_EMBEDDING, ResidualNet, SGD


def triplet_loss(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray,
                 margin: float) -> float:
    """max(0, ||a-p||^2 - ||a-n||^2 + margin) for one embedded triple."""
    ap = np.asarray(anchor, dtype=np.float64) - np.asarray(positive, dtype=np.float64)
    an = np.asarray(anchor, dtype=np.float64) - np.asarray(negative, dtype=np.float64)
    return float(max(0.0, (ap * ap).sum() - (an * an).sum() + margin))


def sample_triplets(rng, y: np.ndarray, batch_size: int):
    """Random (anchor, positive, negative) index triples from integer labels."""
    classes = np.unique(y)
    if len(classes) < 2:
        raise ConfigError("triplet sampling needs at least two classes")
    by_class = {int(c): np.flatnonzero(y == c) for c in classes}
    anchors = rng.integers(0, len(y), size=batch_size)
    pos = np.empty(batch_size, dtype=np.int64)
    neg = np.empty(batch_size, dtype=np.int64)
    for t, a in enumerate(anchors):
        same = by_class[int(y[a])]
        pos[t] = same[rng.integers(0, len(same))]
        other = classes[classes != y[a]]
        pool = by_class[int(other[rng.integers(0, len(other))])]
        neg[t] = pool[rng.integers(0, len(pool))]
    return anchors, pos, neg


def triplet_batch_loss(e_a: np.ndarray, e_p: np.ndarray, e_n: np.ndarray,
                       margin: float):
    """Mean hinge over a batch plus gradients w.r.t. each embedding batch
    (already carrying the 1/B factor); inactive triplets contribute zero."""
    ap = e_a - e_p
    an = e_a - e_n
    slack = (ap * ap).sum(axis=1) - (an * an).sum(axis=1) + margin
    active = slack > 0.0
    loss = float(np.maximum(slack, 0.0).mean())
    scale = 2.0 / len(e_a)
    mask = active[:, None]
    g_a = scale * mask * (e_n - e_p)
    g_p = scale * mask * (-ap)
    g_n = scale * mask * an
    return loss, g_a, g_p, g_n


def train_embedding(x: np.ndarray, y: np.ndarray, *, embed_dim: int | None = None,
                    depth: int = 2, epochs: int = 10, batch_size: int = 64,
                    triplets_per_epoch: int | None = None,
                    learning_rate: float = 0.05, margin: float = 0.5,
                    momentum: float = 0.9, weight_decay: float = 5e-4,
                    seed: int = 0) -> ResidualNet:
    """Fit the retrieval embedding; returns the trained net.

    The net body is dimension-preserving, the head projects to `embed_dim`
    (defaults to the input width). Triplets are uniform random — anchors
    uniform, positives from the anchor's class, negatives from a uniformly
    chosen other class.
    """
    x = np.asarray(x, dtype=np.float64)
    n, dim = x.shape
    if len(np.unique(y)) < 2:
        raise ConfigError("embedding training needs at least two classes")
    net = ResidualNet(dim, embed_dim if embed_dim is not None else dim,
                      depth, residual=True, seed=seed)
    net.checkpoint_kind = KIND_EMBEDDING
    rng = np.random.default_rng(seed)
    opt = SGD(net.params, net.weight_flags, lr=learning_rate, momentum=momentum,
              weight_decay=weight_decay)
    per_epoch = triplets_per_epoch if triplets_per_epoch is not None else n
    steps = max(1, per_epoch // batch_size)
    for _ in range(epochs):
        for _ in range(steps):
            ai, pi, ni = sample_triplets(rng, y, batch_size)
            caches = [net.forward_full(x[idx]) for idx in (ai, pi, ni)]
            loss, g_a, g_p, g_n = triplet_batch_loss(
                caches[0]["outputs"], caches[1]["outputs"], caches[2]["outputs"],
                margin)
            if loss == 0.0:
                continue
            grads = None
            for cache, g_out in zip(caches, (g_a, g_p, g_n)):
                part = net.backward(cache, g_out)
                grads = part if grads is None else [a + b for a, b in zip(grads, part)]
            opt.step(grads)
    return net


def embedding_attack(net: ResidualNet, x: np.ndarray, epsilon: float,
                     steps: int = 20, step_size: float | None = None,
                     seed: int = 0) -> np.ndarray:
    """Gradient ascent on ||psi(x') - psi(x)||^2 inside the epsilon ball.

    The objective's gradient vanishes exactly at x' = x, so the walk starts
    from a seeded random point at radius epsilon/2. Every iterate is
    projected, so ||x' - x|| <= epsilon throughout.
    """
    x = np.asarray(x, dtype=np.float64)
    if epsilon <= 0.0:
        return x.copy()
    step = step_size if step_size is not None else 2.5 * epsilon / steps
    rng = np.random.default_rng(seed)
    anchor = net.outputs(x[None, :])[0]

    def project(pt):
        d = pt - x
        norm = float(np.linalg.norm(d))
        return x + d * (epsilon / norm) if norm > epsilon else pt

    direction = rng.standard_normal(x.size)
    x_adv = project(x + (epsilon / 2.0) * direction / np.linalg.norm(direction))
    for _ in range(steps):
        cache = net.forward_full(x_adv[None, :])
        g_out = 2.0 * (cache["outputs"] - anchor[None, :])
        g = net.grad_input(cache, g_out)[0]
        norm = float(np.linalg.norm(g))
        if norm > 0.0:
            x_adv = project(x_adv + step * g / norm)
    return x_adv
