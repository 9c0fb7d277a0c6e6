"""Differentiable stand-ins for the interpolation solve.

Both models regress the solver's answer from (query, neighbour inputs,
neighbour features). Targets mix the exact solver output with the trained
net's own features:

    loss = alpha * ||out - z_solver||^2 + (1 - alpha) * ||out - z_net||^2

so alpha=1 imitates the defense and alpha=0 just distills the net. Training
rows come from the atlas itself with self-retrieval excluded, i.e. each
atlas point is solved against its remaining neighbours.

SurrogateMLP flattens the (2k+1) vectors into one input, so it is sensitive
to neighbour order (retrieval returns them nearest-first, which is stable).
SurrogateAttention treats them as tokens with role embeddings (query /
neighbour-input / neighbour-feature) and reads the answer off the query
token, making it invariant to neighbour permutation by construction.
"""

from dataclasses import dataclass

import numpy as np

from . import _binio
from .defenses import OTADDefense
from .errors import ShapeError
from .neighbors import NeighborQuery, knn_batch
from .network import (KIND_SURROGATE_ATTENTION, KIND_SURROGATE_MLP, SGD,
                      _fan_in_uniform)


@dataclass
class SurrogateData:
    queries: np.ndarray       # (n, d)
    neighbor_x: np.ndarray    # (n, k, d)
    neighbor_z: np.ndarray    # (n, k, d)
    target_solver: np.ndarray  # (n, d) interpolation answers
    target_net: np.ndarray     # (n, d) trained-net features


def build_surrogate_dataset(defense: OTADDefense, *, progress=None) -> SurrogateData:
    """Leave-one-out solver targets over the defense's own atlas."""
    atlas, k = defense.atlas, defense.k
    n, d = atlas.x.shape
    nx = np.empty((n, k, d))
    nz = np.empty((n, k, d))
    target = np.empty((n, d))
    for i in range(n):
        q = NeighborQuery(k=k, embed=defense.embed, exclude_index=i)
        idx = knn_batch(atlas, atlas.x[i][None, :], q)[0]
        nx[i], nz[i] = atlas.x[idx], atlas.z[idx]
        target[i] = defense.interpolate_one(atlas.x[i], exclude=i).z_prime
        if progress is not None:
            progress(i, n)
    return SurrogateData(atlas.x.copy(), nx, nz, target, atlas.z.copy())


class SurrogateMLP:
    """Flat baseline: concat(query, neighbours) -> tanh MLP -> feature."""

    checkpoint_kind = KIND_SURROGATE_MLP

    def __init__(self, dim: int, k: int, hidden: tuple = (128,), seed: int = 0):
        self.dim = dim
        self.k = k
        self.hidden = tuple(int(h) for h in hidden)
        rng = np.random.default_rng(seed)
        widths = [(2 * k + 1) * dim, *self.hidden, dim]
        self.params = []
        self.weight_flags = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            self.params.append(_fan_in_uniform(rng, (w_out, w_in)))
            self.weight_flags.append(True)
            self.params.append(np.zeros(w_out))
            self.weight_flags.append(False)

    def _flatten(self, queries, nx, nz):
        b = len(queries)
        return np.concatenate(
            [queries, nx.reshape(b, -1), nz.reshape(b, -1)], axis=1)

    def forward_full(self, queries, nx, nz) -> dict:
        h = self._flatten(np.atleast_2d(queries), nx, nz)
        acts = [h]
        n_layers = len(self.params) // 2
        for li in range(n_layers):
            w, b = self.params[2 * li], self.params[2 * li + 1]
            h = h @ w.T + b
            if li < n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return {"acts": acts, "outputs": h}

    def forward(self, queries, nx, nz) -> np.ndarray:
        return self.forward_full(queries, nx, nz)["outputs"]

    def backward(self, cache: dict, g_out: np.ndarray) -> list:
        grads = [np.zeros_like(p) for p in self.params]
        acts = cache["acts"]
        n_layers = len(self.params) // 2
        g = g_out
        for li in range(n_layers - 1, -1, -1):
            w = self.params[2 * li]
            grads[2 * li] = g.T @ acts[li]
            grads[2 * li + 1] = g.sum(axis=0)
            if li > 0:
                s = acts[li]  # post-tanh activation of the previous layer
                g = (g @ w) * (1.0 - s * s)
        return grads

    def grad_inputs(self, cache: dict, g_out: np.ndarray):
        """Gradients w.r.t. (queries, neighbor_x, neighbor_z)."""
        acts = cache["acts"]
        n_layers = len(self.params) // 2
        g = g_out
        for li in range(n_layers - 1, -1, -1):
            w = self.params[2 * li]
            if li > 0:
                s = acts[li]
                g = (g @ w) * (1.0 - s * s)
            else:
                g = g @ w
        b, d, k = g.shape[0], self.dim, self.k
        return (g[:, :d],
                g[:, d:d * (k + 1)].reshape(b, k, d),
                g[:, d * (k + 1):].reshape(b, k, d))

    def write_payload(self, f) -> None:
        _binio.write_u64(f, self.dim)
        _binio.write_u32(f, self.k)
        _binio.write_u32(f, len(self.hidden))
        for h in self.hidden:
            _binio.write_u64(f, h)
        for p in self.params:
            _binio.write_array(f, p)

    @classmethod
    def read_payload(cls, f) -> "SurrogateMLP":
        dim = _binio.read_u64(f)
        k = _binio.read_u32(f)
        hidden = tuple(_binio.read_u64(f) for _ in range(_binio.read_u32(f)))
        model = cls(dim, k, hidden)
        model.params = [_binio.read_array(f) for _ in model.params]
        return model


class SurrogateAttention:
    """One multi-head self-attention block over 2k+1 role-tagged tokens.

    Tokens are linear projections of the raw vectors plus a learned embedding
    for the token's role; the block output at the query position (plus a
    residual skip) feeds an affine readout back to feature space.
    """

    checkpoint_kind = KIND_SURROGATE_ATTENTION

    def __init__(self, dim: int, k: int, d_model: int = 64, n_heads: int = 4,
                 seed: int = 0):
        if d_model % n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        self.dim = dim
        self.k = k
        self.d_model = d_model
        self.n_heads = n_heads
        rng = np.random.default_rng(seed)
        D = d_model
        self.params = [
            np.ascontiguousarray(_fan_in_uniform(rng, (D, dim)).T),  # W_in (dim, D)
            np.zeros((3, D)),                   # role embeddings
            _fan_in_uniform(rng, (D, D)),       # Wq
            _fan_in_uniform(rng, (D, D)),       # Wk
            _fan_in_uniform(rng, (D, D)),       # Wv
            _fan_in_uniform(rng, (D, D)),       # Wo
            np.ascontiguousarray(_fan_in_uniform(rng, (dim, D)).T),  # W_out (D, dim)
            np.zeros(dim),                      # b_out
        ]
        self.weight_flags = [True, False, True, True, True, True, True, False]
        types = np.concatenate([[0], np.ones(k, dtype=int), np.full(k, 2)])
        self._types = types

    def _tokens(self, queries, nx, nz) -> np.ndarray:
        queries = np.atleast_2d(queries)
        return np.concatenate([queries[:, None, :], nx, nz], axis=1)

    def forward_full(self, queries, nx, nz) -> dict:
        w_in, role, wq, wk, wv, wo, w_out, b_out = self.params
        R, D = self.n_heads, self.d_model
        dh = D // R
        x = self._tokens(queries, nx, nz)            # (B, T, dim)
        h0 = x @ w_in + role[self._types]            # (B, T, D)
        b, t = h0.shape[0], h0.shape[1]
        p = (h0 @ wq).reshape(b, t, R, dh)
        km = (h0 @ wk).reshape(b, t, R, dh)
        vv = (h0 @ wv).reshape(b, t, R, dh)
        s = np.einsum("btrh,bsrh->brts", p, km) / np.sqrt(dh)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        a = e / e.sum(axis=-1, keepdims=True)
        o = np.einsum("brts,bsrh->btrh", a, vv).reshape(b, t, D)
        f = o @ wo
        h1 = h0 + f
        out = h1[:, 0, :] @ w_out + b_out
        return {"x": x, "h0": h0, "p": p, "km": km, "v": vv, "a": a,
                "o": o, "h1": h1, "outputs": out}

    def forward(self, queries, nx, nz) -> np.ndarray:
        return self.forward_full(queries, nx, nz)["outputs"]

    def _chain(self, cache: dict, g_out: np.ndarray):
        """Shared backward chain: (parameter grads, token-input grads)."""
        w_in, role, wq, wk, wv, wo, w_out, b_out = self.params
        R, D = self.n_heads, self.d_model
        dh = D // R
        x, h0, a = cache["x"], cache["h0"], cache["a"]
        b, t = h0.shape[0], h0.shape[1]

        d_wout = cache["h1"][:, 0, :].T @ g_out
        d_bout = g_out.sum(axis=0)
        dh1 = np.zeros_like(h0)
        dh1[:, 0, :] = g_out @ w_out.T
        df = dh1                                      # h1 = h0 + f
        dh0 = dh1.copy()

        d_wo = np.einsum("btd,bte->de", cache["o"], df)
        do = (df @ wo.T).reshape(b, t, R, dh)
        da = np.einsum("btrh,bsrh->brts", do, cache["v"])
        dv = np.einsum("brts,btrh->bsrh", a, do)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        dp = np.einsum("brts,bsrh->btrh", ds, cache["km"]) / np.sqrt(dh)
        dkm = np.einsum("brts,btrh->bsrh", ds, cache["p"]) / np.sqrt(dh)

        dp = dp.reshape(b, t, D)
        dkm = dkm.reshape(b, t, D)
        dv = dv.reshape(b, t, D)
        d_wq = np.einsum("btd,bte->de", h0, dp)
        d_wk = np.einsum("btd,bte->de", h0, dkm)
        d_wv = np.einsum("btd,bte->de", h0, dv)
        dh0 += dp @ wq.T + dkm @ wk.T + dv @ wv.T

        d_win = np.einsum("btd,bte->de", x, dh0)
        d_role = np.zeros_like(role)
        for ty in range(3):
            d_role[ty] = dh0[:, self._types == ty, :].sum(axis=(0, 1))
        grads = [d_win, d_role, d_wq, d_wk, d_wv, d_wo, d_wout, d_bout]
        return grads, dh0 @ w_in.T

    def backward(self, cache: dict, g_out: np.ndarray) -> list:
        return self._chain(cache, g_out)[0]

    def grad_inputs(self, cache: dict, g_out: np.ndarray):
        """Gradients w.r.t. (queries, neighbor_x, neighbor_z)."""
        dx = self._chain(cache, g_out)[1]
        k = self.k
        return dx[:, 0, :], dx[:, 1:k + 1, :], dx[:, k + 1:, :]

    def write_payload(self, f) -> None:
        _binio.write_u64(f, self.dim)
        _binio.write_u32(f, self.k)
        _binio.write_u64(f, self.d_model)
        _binio.write_u32(f, self.n_heads)
        for p in self.params:
            _binio.write_array(f, p)

    @classmethod
    def read_payload(cls, f) -> "SurrogateAttention":
        dim = _binio.read_u64(f)
        k = _binio.read_u32(f)
        d_model = _binio.read_u64(f)
        n_heads = _binio.read_u32(f)
        model = cls(dim, k, d_model, n_heads)
        model.params = [_binio.read_array(f) for _ in model.params]
        return model


def train_surrogate(model, data: SurrogateData, *, alpha: float = 1.0,
                    epochs: int = 30, batch_size: int = 32, lr: float = 0.01,
                    momentum: float = 0.9, weight_decay: float = 5e-4,
                    seed: int = 0) -> list[dict]:
    """Minibatch SGD on the alpha-mixed squared error; returns epoch records."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    n = len(data.queries)
    rng = np.random.default_rng(seed)
    opt = SGD(model.params, model.weight_flags, lr=lr, momentum=momentum,
              weight_decay=weight_decay)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            cache = model.forward_full(data.queries[idx], data.neighbor_x[idx],
                                       data.neighbor_z[idx])
            out = cache["outputs"]
            d_solver = out - data.target_solver[idx]
            d_net = out - data.target_net[idx]
            loss = (alpha * (d_solver * d_solver).sum()
                    + (1.0 - alpha) * (d_net * d_net).sum()) / len(idx)
            g_out = 2.0 * (alpha * d_solver + (1.0 - alpha) * d_net) / len(idx)
            opt.step(model.backward(cache, g_out))
            loss_sum += loss * len(idx)
        history.append({"epoch": epoch, "loss": loss_sum / n})
    return history


class SurrogateBackward:
    """Adapter exposing a surrogate as the differentiable model an attack
    backpropagates through: forward retrieves neighbours and runs the
    surrogate plus the trained head, grad_input chains the head back through
    the surrogate's query input (neighbour retrieval is locally constant, so
    its contribution is zero almost everywhere)."""

    def __init__(self, net, atlas, model, embed=None):
        self.net = net
        self.atlas = atlas
        self.model = model
        self.query = NeighborQuery(k=model.k, embed=embed)

    def forward_full(self, x: np.ndarray) -> dict:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx = knn_batch(self.atlas, x, self.query)
        cache = self.model.forward_full(x, self.atlas.x[idx], self.atlas.z[idx])
        cache["features"] = cache["outputs"]
        cache["outputs"] = self.net.head_apply(cache["features"])
        return cache

    def grad_input(self, cache: dict, g_out: np.ndarray) -> np.ndarray:
        hw, _ = self.net.head
        return self.model.grad_inputs(cache, g_out @ hw)[0]
