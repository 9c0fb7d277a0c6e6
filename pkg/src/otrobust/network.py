"""Dimension-preserving residual MLP with hand-written float64 backprop.

Every block maps R^d -> R^d (two-layer tanh perceptron), so the same
architecture serves any input width and the per-block displacements
r_k = block(h) are directly comparable across depth. Training minimizes

    task loss (cross-entropy or squared error, batch mean)
    + alpha * mean_i sum_k ||r_k(x_i^{k-1})||^2

where the second term penalizes the total squared displacement the network
applies to each sample. Small displacement pushes the input->feature map
toward the identity-plus-gradient structure the interpolation defense needs.
"""

import json

import numpy as np

from . import _binio
from .errors import DataFormatError, ShapeError, TrainingError

_CKPT_MAGIC = b"OTCK"
_CKPT_VERSION = 1

KIND_CLASSIFIER = 0
KIND_EMBEDDING = 1
KIND_SURROGATE_MLP = 2
KIND_SURROGATE_ATTENTION = 3


def _fan_in_uniform(rng, shape):
    bound = 1.0 / np.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)


class ResidualNet:
    """Stack of d->d blocks plus an affine head.

    With residual=True each stage computes x + block(x); with residual=False
    the block output replaces the input. Parameters live in `self.params`
    (a flat list of arrays) so the optimizer and checkpoint code can treat
    the model generically; `self.weight_flags` marks which entries are
    weight matrices (subject to decay) versus biases.
    """

    checkpoint_kind = KIND_CLASSIFIER

    def __init__(self, dim: int, out_dim: int, depth: int = 4, *,
                 residual: bool = True, hidden: int | None = None, seed: int = 0):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.dim = dim
        self.out_dim = out_dim
        self.depth = depth
        self.residual = residual
        self.hidden = hidden if hidden is not None else dim
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        self.weight_flags: list[bool] = []
        for _ in range(depth):
            self._add(_fan_in_uniform(rng, (self.hidden, dim)), True)   # W1
            self._add(np.zeros(self.hidden), False)                     # b1
            self._add(_fan_in_uniform(rng, (dim, self.hidden)), True)   # W2
            self._add(np.zeros(dim), False)                             # b2
        self._add(_fan_in_uniform(rng, (out_dim, dim)), True)           # head W
        self._add(np.zeros(out_dim), False)                             # head b

    def _add(self, arr, is_weight):
        self.params.append(np.asarray(arr, dtype=np.float64))
        self.weight_flags.append(is_weight)

    def _block(self, k):
        i = 4 * k
        return self.params[i], self.params[i + 1], self.params[i + 2], self.params[i + 3]

    @property
    def head(self):
        return self.params[-2], self.params[-1]

    # --- forward ---

    def forward_full(self, x: np.ndarray) -> dict:
        """Run the net keeping every intermediate needed for backward().

        Returns a cache with per-block inputs, tanh activations, block outputs
        (the displacements), the pre-head features, and the head outputs.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ShapeError(f"input width {x.shape[1]}, model expects {self.dim}")
        inputs, acts, blocks = [], [], []
        h = x
        for k in range(self.depth):
            w1, b1, w2, b2 = self._block(k)
            s = np.tanh(h @ w1.T + b1)
            r = s @ w2.T + b2
            inputs.append(h)
            acts.append(s)
            blocks.append(r)
            h = h + r if self.residual else r
        hw, hb = self.head
        out = h @ hw.T + hb
        energy = float(sum((r * r).sum() for r in blocks)) / len(x)
        return {"inputs": inputs, "acts": acts, "blocks": blocks,
                "features": h, "outputs": out, "energy": energy}

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.forward_full(x)["features"]

    def outputs(self, x: np.ndarray) -> np.ndarray:
        return self.forward_full(x)["outputs"]

    def head_apply(self, features: np.ndarray) -> np.ndarray:
        hw, hb = self.head
        return np.atleast_2d(features) @ hw.T + hb

    # --- backward ---

    def backward(self, cache: dict, g_out: np.ndarray, alpha: float = 0.0) -> list:
        """Parameter gradients given dLoss/dOutputs (already batch-scaled).

        The displacement penalty enters here: each block output picks up an
        extra (2*alpha/B) * r_k on top of whatever flows back from the head.
        """
        batch = len(cache["outputs"])
        grads = [np.zeros_like(p) for p in self.params]
        hw, _ = self.head
        grads[-2] = g_out.T @ cache["features"]
        grads[-1] = g_out.sum(axis=0)
        g = g_out @ hw  # gradient wrt features = last stage output
        for k in range(self.depth - 1, -1, -1):
            w1, _, w2, _ = self._block(k)
            h, s, r = cache["inputs"][k], cache["acts"][k], cache["blocks"][k]
            g_r = g + (2.0 * alpha / batch) * r if alpha else g
            i = 4 * k
            grads[i + 2] = g_r.T @ s
            grads[i + 3] = g_r.sum(axis=0)
            g_a = (g_r @ w2) * (1.0 - s * s)
            grads[i] = g_a.T @ h
            grads[i + 1] = g_a.sum(axis=0)
            g_h = g_a @ w1
            g = g + g_h if self.residual else g_h
        return grads

    def grad_input(self, cache: dict, g_out: np.ndarray) -> np.ndarray:
        """dOutputs-weighted gradient w.r.t. the raw input batch."""
        hw, _ = self.head
        g = g_out @ hw
        for k in range(self.depth - 1, -1, -1):
            w1, _, w2, _ = self._block(k)
            s = cache["acts"][k]
            g_h = ((g @ w2) * (1.0 - s * s)) @ w1
            g = g + g_h if self.residual else g_h
        return g

    # --- persistence ---

    def write_payload(self, f) -> None:
        _binio.write_u8(f, 1 if self.residual else 0)
        _binio.write_u64(f, self.dim)
        _binio.write_u64(f, self.hidden)
        _binio.write_u64(f, self.out_dim)
        _binio.write_u32(f, self.depth)
        for p in self.params:
            _binio.write_array(f, p)

    @classmethod
    def read_payload(cls, f) -> "ResidualNet":
        residual = _binio.read_u8(f) == 1
        dim = _binio.read_u64(f)
        hidden = _binio.read_u64(f)
        out_dim = _binio.read_u64(f)
        depth = _binio.read_u32(f)
        net = cls(dim, out_dim, depth, residual=residual, hidden=hidden)
        net.params = [_binio.read_array(f) for _ in net.params]
        return net


def energy_regularizer(block_outputs: list) -> float:
    """Exact total squared displacement: sum over samples and blocks of
    ||r_k(x_i)||^2 (no batch normalization here; the training objective
    divides by batch size)."""
    return float(sum((r * r).sum() for r in block_outputs))


# --- losses (values are batch means; returned grads carry the 1/B) ---

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = len(logits)
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def squared_error(outputs: np.ndarray, targets: np.ndarray):
    targets = np.atleast_2d(targets)
    diff = outputs - targets
    loss = float((diff * diff).sum() / len(outputs))
    return loss, 2.0 * diff / len(outputs)


class SGD:
    """Momentum SGD with decoupled flags for which tensors get weight decay.

    Decay is folded into the gradient (grad += wd * w) before the momentum
    update, i.e. classic coupled L2 regularization.
    """

    def __init__(self, params: list, weight_flags: list, lr: float,
                 momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.weight_flags = weight_flags
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list) -> None:
        for p, g, v, is_w in zip(self.params, grads, self.velocity, self.weight_flags):
            if self.weight_decay and is_w:
                g = g + self.weight_decay * p
            v *= self.momentum
            v -= self.lr * g
            p += v


def train_network(net: ResidualNet, x: np.ndarray, y: np.ndarray, *,
                  task: str = "classification", epochs: int = 20,
                  batch_size: int = 64, lr: float = 0.1, alpha: float = 0.0,
                  momentum: float = 0.9, weight_decay: float = 5e-4,
                  seed: int = 0, log_path=None) -> list[dict]:
    """Minibatch training loop; returns one log record per epoch.

    Records are also appended as JSON lines to `log_path` when given:
    {"epoch": int, "loss": float, "acc": float|null, "mean_block_norm": float}.
    `loss` includes the alpha-scaled displacement penalty.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(seed)
    opt = SGD(net.params, net.weight_flags, lr=lr, momentum=momentum,
              weight_decay=weight_decay)
    history = []
    log_f = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(epochs):
            order = rng.permutation(n)
            loss_sum = 0.0
            correct = 0
            norm_sum = 0.0
            norm_count = 0
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                cache = net.forward_full(x[idx])
                out = cache["outputs"]
                if task == "classification":
                    loss, g_out = softmax_cross_entropy(out, y[idx])
                    correct += int((out.argmax(axis=1) == y[idx]).sum())
                else:
                    loss, g_out = squared_error(out, y[idx])
                total = loss + alpha * cache["energy"]
                if not np.isfinite(total):
                    raise TrainingError("loss diverged", epoch=epoch)
                grads = net.backward(cache, g_out, alpha=alpha)
                opt.step(grads)
                loss_sum += total * len(idx)
                for r in cache["blocks"]:
                    norm_sum += float(np.linalg.norm(r, axis=1).sum())
                    norm_count += len(idx)
            record = {
                "epoch": epoch,
                "loss": loss_sum / n,
                "acc": correct / n if task == "classification" else None,
                "mean_block_norm": norm_sum / max(norm_count, 1),
            }
            history.append(record)
            if log_f is not None:
                log_f.write(json.dumps(record) + "\n")
    finally:
        if log_f is not None:
            log_f.close()
    return history


def gradient_check(net: ResidualNet, x: np.ndarray, y: np.ndarray, *,
                   task: str = "classification", alpha: float = 0.0,
                   step: float = 1e-5) -> float:
    """Worst absolute disagreement between analytic parameter gradients and
    central finite differences of the full objective (task loss plus the
    alpha-scaled displacement penalty)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))

    def objective():
        cache = net.forward_full(x)
        if task == "classification":
            loss, _ = softmax_cross_entropy(cache["outputs"], y)
        else:
            loss, _ = squared_error(cache["outputs"], y)
        return loss + alpha * cache["energy"]

    cache = net.forward_full(x)
    if task == "classification":
        _, g_out = softmax_cross_entropy(cache["outputs"], y)
    else:
        _, g_out = squared_error(cache["outputs"], y)
    grads = net.backward(cache, g_out, alpha=alpha)

    worst = 0.0
    for p, g in zip(net.params, grads):
        flat = p.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = objective()
            flat[i] = keep - step
            down = objective()
            flat[i] = keep
            worst = max(worst, abs((up - down) / (2.0 * step) - g.ravel()[i]))
    return worst


def predict_labels(net: ResidualNet, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = [net.outputs(x[i:i + batch_size]).argmax(axis=1)
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros(0, dtype=np.int64)


def accuracy(net: ResidualNet, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return 0.0
    return float((predict_labels(net, x) == y).mean())


# --- checkpoint container shared by every trainable model in the package ---

def save_model(path, model, kind: int | None = None) -> None:
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        _binio.write_u8(f, _CKPT_VERSION)
        _binio.write_u8(f, model.checkpoint_kind if kind is None else kind)
        model.write_payload(f)


def load_model(path):
    """Read any checkpoint; returns (model, kind)."""
    with open(path, "rb") as f:
        _binio.check_magic(f, _CKPT_MAGIC, "checkpoint")
        version = _binio.read_u8(f)
        if version != _CKPT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        kind = _binio.read_u8(f)
        if kind in (KIND_CLASSIFIER, KIND_EMBEDDING):
            return ResidualNet.read_payload(f), kind
        if kind in (KIND_SURROGATE_MLP, KIND_SURROGATE_ATTENTION):
            from . import surrogate
            cls = (surrogate.SurrogateMLP if kind == KIND_SURROGATE_MLP
                   else surrogate.SurrogateAttention)
            return cls.read_payload(f), kind
        raise DataFormatError(f"unknown checkpoint kind {kind}")
