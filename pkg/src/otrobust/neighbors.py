"""Transport atlas (input/feature pairs from a trained net) and exact k-NN
retrieval over it, in raw input space or a learned embedding space."""

from dataclasses import dataclass

import numpy as np

from . import _binio
from .errors import ConfigError, DataFormatError, ShapeError

_ATLAS_MAGIC = b"OTAT"
_ATLAS_VERSION = 1


class Atlas:
    """The discrete transport sample: training inputs x paired with their
    learned images z = features(x), plus optional labels for baselines.
    Immutable after construction; retrieval caches hang off it privately."""

    def __init__(self, x: np.ndarray, z: np.ndarray, y: np.ndarray | None = None):
        x = np.ascontiguousarray(x, dtype=np.float64)
        z = np.ascontiguousarray(z, dtype=np.float64)
        if x.ndim != 2 or z.ndim != 2 or len(x) != len(z):
            raise ShapeError(f"atlas x/z shape mismatch: {x.shape} vs {z.shape}")
        if y is not None and len(y) != len(x):
            raise ShapeError("atlas labels length mismatch")
        x.flags.writeable = False
        z.flags.writeable = False
        self.x = x
        self.z = z
        self.y = None if y is None else np.asarray(y)
        self._spaces: dict = {}   # retrieval-space cache, keyed by embedder id

    def __len__(self):
        return len(self.x)

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.z.shape[1]

    def search_space(self, embed) -> np.ndarray:
        key = id(embed)
        if key not in self._spaces:
            self._spaces[key] = (self.x if embed is None
                                 else np.asarray(embed(self.x), dtype=np.float64))
        return self._spaces[key]


def build_atlas(net, x: np.ndarray, y: np.ndarray | None = None,
                batch_size: int = 256) -> Atlas:
    """Extract the discrete map {(x_i, features(x_i))} from a trained net."""
    feats = [net.features(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    z = np.concatenate(feats) if feats else np.zeros_like(x)
    return Atlas(x, z, y)


def save_atlas(path, atlas: Atlas) -> None:
    with open(path, "wb") as f:
        f.write(_ATLAS_MAGIC)
        _binio.write_u8(f, _ATLAS_VERSION)
        _binio.write_u64(f, len(atlas))
        _binio.write_u64(f, atlas.input_dim)
        _binio.write_u8(f, 0 if atlas.y is None else 1)
        _binio.write_array(f, atlas.x)
        _binio.write_array(f, atlas.z)
        if atlas.y is not None:
            _binio.write_array(f, atlas.y)


def load_atlas(path) -> Atlas:
    with open(path, "rb") as f:
        _binio.check_magic(f, _ATLAS_MAGIC, "atlas")
        version = _binio.read_u8(f)
        if version != _ATLAS_VERSION:
            raise DataFormatError(f"unsupported atlas version {version}")
        n = _binio.read_u64(f)
        dim = _binio.read_u64(f)
        has_labels = _binio.read_u8(f)
        x = _binio.read_array(f)
        z = _binio.read_array(f)
        y = _binio.read_array(f) if has_labels else None
    if x.shape != (n, dim):
        raise DataFormatError("atlas header disagrees with payload shape")
    return Atlas(x, z, y)


@dataclass(frozen=True)
class NeighborQuery:
    """How to retrieve: neighbour count, comparison space, optional self-
    exclusion (leave-one-out)."""

    k: int = 10
    embed: object = None              # callable batch -> embedded batch, or None
    exclude_index: int | None = None

    @property
    def metric(self) -> str:
        return "euclidean" if self.embed is None else "embedded"


def pairwise_sq_dists(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """(m, n) squared Euclidean distances; clipped at zero against rounding."""
    q2 = (queries * queries).sum(axis=1)[:, None]
    p2 = (points * points).sum(axis=1)[None, :]
    d2 = q2 + p2 - 2.0 * queries @ points.T
    return np.maximum(d2, 0.0)


def knn_batch(atlas: Atlas, queries: np.ndarray, q: NeighborQuery) -> np.ndarray:
    """Indices of the q.k nearest atlas points per query row, ascending by
    distance with ties broken by lower index."""
    available = len(atlas) - (1 if q.exclude_index is not None else 0)
    if not 1 <= q.k <= available:
        raise ConfigError(f"k={q.k} but only {available} atlas points available")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    space = atlas.search_space(q.embed)
    if q.embed is not None:
        queries = np.asarray(q.embed(queries), dtype=np.float64)
    d2 = pairwise_sq_dists(queries, space)
    if q.exclude_index is not None:
        d2[:, q.exclude_index] = np.inf
    # stable sort => equal distances resolve to the lower index
    return np.argsort(d2, axis=1, kind="stable")[:, :q.k]


def knn(atlas: Atlas, query_x: np.ndarray, q: NeighborQuery) -> tuple[np.ndarray, np.ndarray]:
    """Single-query retrieval; returns (indices, distances) ascending."""
    query_x = np.asarray(query_x, dtype=np.float64)
    idx = knn_batch(atlas, query_x[None, :], q)[0]
    space = atlas.search_space(q.embed)
    point = query_x if q.embed is None else np.asarray(q.embed(query_x[None, :]))[0]
    dists = np.sqrt(pairwise_sq_dists(point[None, :], space[idx])[0])
    return idx, dists


def neighbor_window(atlas: Atlas, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Materialize the (x_i, z_i) pairs for retrieved indices, dropping exact
    duplicate pairs (they would only add redundant constraints)."""
    seen = set()
    keep = []
    for i in idx:
        key = (atlas.x[i].tobytes(), atlas.z[i].tobytes())
        if key not in seen:
            seen.add(key)
            keep.append(i)
    keep = np.asarray(keep, dtype=np.int64)
    return atlas.x[keep], atlas.z[keep]
