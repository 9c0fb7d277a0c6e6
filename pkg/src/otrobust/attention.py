"""Single-block multi-head self-attention as a standalone map, a closed-form
Lipschitz certificate for it on a norm-bounded domain, and a finite-difference
spectral probe used to compare measured slopes against the certificate.

The map is F(X) = [head_1(X) .. head_R(X)] W with
head_r(X) = softmax(X Q_r (X K_r)^T / sqrt(D/R)) X V_r and X an (N, D) token
matrix. The certificate assumes every parameter matrix has Frobenius norm at
most m_theta and inputs satisfy ||X||_F <= m_input.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class AttentionSpec:
    """Dimensions, parameters, and the bounds the certificate is stated for.

    param_bound may be None, in which case the measured maximum Frobenius
    norm of the parameter matrices is used.
    """

    n_tokens: int
    d_model: int
    n_heads: int
    Wq: np.ndarray                # (R, D, D/R)
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray                # (D, D)
    input_bound: float = 1.0
    param_bound: float | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        dh = self.d_model // self.n_heads
        want = (self.n_heads, self.d_model, dh)
        for name in ("Wq", "Wk", "Wv"):
            if getattr(self, name).shape != want:
                raise ShapeError(f"{name} must have shape {want}")
        if self.Wo.shape[0] != self.d_model:
            raise ShapeError("Wo row count must equal d_model")

    def measured_param_bound(self) -> float:
        norms = [np.linalg.norm(w) for mats in (self.Wq, self.Wk, self.Wv)
                 for w in mats]
        norms.append(np.linalg.norm(self.Wo))
        return float(max(norms))

    def effective_param_bound(self) -> float:
        return (self.param_bound if self.param_bound is not None
                else self.measured_param_bound())


def softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(X: np.ndarray, Wq: np.ndarray, Wk: np.ndarray,
                      Wv: np.ndarray, Wo: np.ndarray) -> np.ndarray:
    """Vectorized forward pass on one token matrix."""
    X = np.asarray(X, dtype=np.float64)
    R, D, dh = Wq.shape
    if X.ndim != 2 or X.shape[1] != D:
        raise ShapeError(f"token matrix must be (N, {D})")
    heads = []
    for r in range(R):
        q = X @ Wq[r]
        k = X @ Wk[r]
        a = softmax_rows(q @ k.T / np.sqrt(dh))
        heads.append(a @ (X @ Wv[r]))
    return np.concatenate(heads, axis=1) @ Wo


def spec_forward(spec: AttentionSpec, X: np.ndarray) -> np.ndarray:
    return attention_forward(X, spec.Wq, spec.Wk, spec.Wv, spec.Wo)


def attention_lipschitz_bound(spec_or_n, d_model: int | None = None,
                              n_heads: int | None = None,
                              m_theta: float | None = None,
                              m_input: float | None = None) -> float:
    """Certified Lipschitz constant of the attention map on the input ball.

    Accepts either an AttentionSpec (bounds measured if unset) or the plain
    numbers (n_tokens, d_model, n_heads, m_theta, m_input). The constant is
    sqrt(R) * m_theta^2 * (m_theta^2 m^2 (sqrt(N)+1)/sqrt(D/R) + sqrt(N)):
    the first term tracks how the softmax scores move with the input, the
    second the value pathway.
    """
    if isinstance(spec_or_n, AttentionSpec):
        spec = spec_or_n
        n_tokens, d_model, n_heads = spec.n_tokens, spec.d_model, spec.n_heads
        m_theta = spec.effective_param_bound()
        m_input = spec.input_bound
    else:
        n_tokens = spec_or_n
    if d_model % n_heads != 0:
        raise ShapeError("d_model must be divisible by n_heads")
    dh = d_model / n_heads
    root_n = np.sqrt(n_tokens)
    inner = (m_theta ** 2) * (m_input ** 2) * (root_n + 1.0) / np.sqrt(dh)
    return float(np.sqrt(n_heads) * (m_theta ** 2) * (inner + root_n))


def random_attention_spec(rng, n_tokens: int, d_model: int, n_heads: int,
                          m_theta: float, m_input: float) -> AttentionSpec:
    """Gaussian parameters rescaled so every Frobenius norm is <= m_theta."""
    if d_model % n_heads != 0:
        raise ShapeError("d_model must be divisible by n_heads")
    dh = d_model // n_heads

    def bounded(shape):
        w = rng.standard_normal(shape)
        frob = np.linalg.norm(w)
        if frob == 0.0 or m_theta == 0.0:
            return np.zeros(shape)
        return w * (m_theta * rng.uniform(0.3, 1.0) / frob)

    return AttentionSpec(
        n_tokens=n_tokens, d_model=d_model, n_heads=n_heads,
        Wq=np.stack([bounded((d_model, dh)) for _ in range(n_heads)]),
        Wk=np.stack([bounded((d_model, dh)) for _ in range(n_heads)]),
        Wv=np.stack([bounded((d_model, dh)) for _ in range(n_heads)]),
        Wo=bounded((d_model, d_model)),
        input_bound=m_input, param_bound=m_theta)


def jacobian_spectral_norm(f, x0: np.ndarray, *, iters: int = 30,
                           step: float = 1e-5, seed: int = 0) -> float:
    """Largest singular value of the Jacobian of f at x0, by power iteration
    with central-difference directional derivatives.

    Any intermediate estimate is ||J v|| for a unit v, hence a valid lower
    bound on the true spectral norm even before convergence.
    """
    rng = np.random.default_rng(seed)
    shape = x0.shape
    m = x0.size

    def jvp(v):
        d = (step * v).reshape(shape)
        return ((f(x0 + d) - f(x0 - d)) / (2.0 * step)).ravel()

    def vjp(u):
        g = np.empty(m)
        flat = np.zeros(m)
        for i in range(m):
            flat[i] = step
            d = flat.reshape(shape)
            g[i] = (float((f(x0 + d) * u).sum())
                    - float((f(x0 - d) * u).sum())) / (2.0 * step)
            flat[i] = 0.0
        return g

    v = rng.standard_normal(m)
    v /= np.linalg.norm(v)
    sigma = 0.0
    u_shape = np.asarray(f(x0)).shape
    for _ in range(iters):
        w = jvp(v)
        sigma = float(np.linalg.norm(w))
        if sigma == 0.0:
            return 0.0
        g = vjp((w / sigma).reshape(u_shape))
        norm_g = np.linalg.norm(g)
        if norm_g == 0.0:
            break
        v = g / norm_g
    return sigma


def empirical_attention_lipschitz(spec: AttentionSpec, *, n_starts: int = 2,
                                  iters: int = 20, seed: int = 0) -> float:
    """Max measured Jacobian spectral norm over random points inside the
    certified input ball (a lower bound on the true Lipschitz constant)."""
    rng = np.random.default_rng(seed)

    def f(X):
        return spec_forward(spec, X)

    best = 0.0
    for s in range(n_starts):
        x0 = rng.standard_normal((spec.n_tokens, spec.d_model))
        norm = np.linalg.norm(x0)
        if norm > 0:
            x0 *= rng.uniform(0.2, 0.9) * spec.input_bound / norm
        best = max(best, jacobian_spectral_norm(f, x0, iters=iters,
                                                seed=seed * 997 + s))
    return best


def certify(spec: AttentionSpec, *, n_starts: int = 2, iters: int = 20,
            seed: int = 0) -> dict:
    """Bound vs. measurement for one instance; `passed` is the theorem's
    falsifiable half."""
    bound = attention_lipschitz_bound(spec)
    empirical = empirical_attention_lipschitz(spec, n_starts=n_starts,
                                              iters=iters, seed=seed)
    return {
        "n_tokens": spec.n_tokens,
        "d_model": spec.d_model,
        "n_heads": spec.n_heads,
        "input_bound": spec.input_bound,
        "param_bound_used": spec.effective_param_bound(),
        "param_bound_measured": spec.measured_param_bound(),
        "bound": bound,
        "empirical": empirical,
        "margin": bound - empirical,
        "passed": bool(empirical <= bound),
    }
