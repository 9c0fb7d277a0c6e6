"""Inference-time defenses sharing one protocol: .features(X) -> (B, d),
.logits(X) -> (B, out) and, for classification, .predict(X). The
interpolation defense replaces the trained net's forward pass with neighbour
retrieval plus the certified convex-interpolation solve; the frozen net and
the neighbour-mean are the undefended baseline and the cheap baseline.
"""

import numpy as np

from .cip import CipSolution, SmoothnessWindow, relax_until_feasible, robust_infer
from .errors import InferenceError
from .neighbors import Atlas, NeighborQuery, knn_batch, neighbor_window


class NetDefense:
    """No defense: the trained net evaluated as-is."""

    name = "frozen-net"

    def __init__(self, net):
        self.net = net

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.net.features(x)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net.outputs(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


class KNNMeanDefense:
    """Head applied to the plain average of the retrieved neighbour features."""

    name = "knn-mean"

    def __init__(self, net, atlas: Atlas, k: int = 10, embed=None):
        self.net = net
        self.atlas = atlas
        self.query = NeighborQuery(k=k, embed=embed)

    def features(self, x: np.ndarray) -> np.ndarray:
        idx = knn_batch(self.atlas, np.atleast_2d(x), self.query)
        return self.atlas.z[idx].mean(axis=1)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net.head_apply(self.features(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


class OTADDefense:
    """Convex-interpolation inference over the transport atlas.

    Per query: retrieve k nearest atlas inputs (optionally in a learned
    embedding space), drop exact duplicate pairs, then interpolate the
    neighbour features under the smoothness window, widening the window on
    inconsistency. The answer is head(z') — the trained head is kept, only
    the body's forward pass is replaced.

    on_infeasible: "error" propagates the solver's InferenceError when no
    window explains the neighbours; "nearest" falls back to the one-neighbour
    window, which is always consistent.
    """

    name = "otad"

    def __init__(self, net, atlas: Atlas, k: int = 10,
                 window: SmoothnessWindow | None = None, *, embed=None,
                 on_infeasible: str = "error", tol: float = 1e-13,
                 max_iters: int = 20000):
        if on_infeasible not in ("error", "nearest"):
            raise ValueError(f"unknown on_infeasible policy {on_infeasible!r}")
        self.net = net
        self.atlas = atlas
        self.k = k
        self.window = window if window is not None else SmoothnessWindow()
        self.embed = embed
        self.on_infeasible = on_infeasible
        self.tol = tol
        self.max_iters = max_iters

    def interpolate_one(self, x: np.ndarray, exclude: int | None = None) -> CipSolution:
        """Full solve for a single query; `exclude` removes one atlas index
        from retrieval (leave-one-out construction)."""
        q = NeighborQuery(k=self.k, embed=self.embed, exclude_index=exclude)
        try:
            return robust_infer(self.atlas, x, q, self.window, tol=self.tol,
                                max_iters=self.max_iters)
        except InferenceError:
            if self.on_infeasible == "error":
                raise
            idx = knn_batch(self.atlas, np.asarray(x, dtype=np.float64)[None, :], q)[0]
            xs, zs = neighbor_window(self.atlas, idx)
            return relax_until_feasible(xs[:1], zs[:1], x, self.window,
                                        tol=self.tol, max_iters=self.max_iters)

    def features(self, x: np.ndarray, trace: list | None = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty((len(x), self.atlas.feature_dim))
        for i, row in enumerate(x):
            sol = self.interpolate_one(row)
            out[i] = sol.z_prime
            if trace is not None:
                trace.append({
                    "relaxations": sol.relaxations_used,
                    "window_used": [sol.window_used.l, sol.window_used.L],
                    "v": sol.v,
                    "active_constraints": sol.active_constraints,
                    "residual": sol.gap,
                })
        return out

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net.head_apply(self.features(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


class SurrogateDefense:
    """The interpolation defense with the solve replaced by a trained
    regression model over (query, neighbour inputs, neighbour features)."""

    name = "otad-surrogate"

    def __init__(self, net, atlas: Atlas, model, embed=None):
        self.net = net
        self.atlas = atlas
        self.model = model
        self.query = NeighborQuery(k=model.k, embed=embed)

    def features(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx = knn_batch(self.atlas, x, self.query)
        return self.model.forward(x, self.atlas.x[idx], self.atlas.z[idx])

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net.head_apply(self.features(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)
