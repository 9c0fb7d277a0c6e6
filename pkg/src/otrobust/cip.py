"""Convex interpolation of a discrete map sample, with certified smoothness.

Given neighbour pairs (x_i, z_i) believed to come from the gradient of an
l-strongly-convex, L-smooth potential, this module

1. builds the pairwise compatibility constants c_ij such that the pairs are
   consistent with some such potential iff scalars u_i exist with
   u_i >= u_j + c_ij for all i != j,
2. decides that system by shortest paths (difference constraints), returning
   canonical potential values or a witness cycle whose constant-sum is
   positive,
3. evaluates the interpolant at a query point by minimizing the pointwise
   maximum of K convex quadratics — solved through its concave dual over the
   probability simplex with toward/away Frank-Wolfe steps, and
4. wraps 1-3 plus retrieval in a retry loop that widens the smoothness window
   (L up, l down) until the retrieved pairs become consistent.

For a fixed neighbour window the interpolant z'(x) is L_t-Lipschitz in x,
which is what the defense built on top of this module certifies.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InferenceError, SolverError, WindowError
from .neighbors import Atlas, NeighborQuery, knn_batch, neighbor_window


@dataclass(frozen=True)
class SmoothnessWindow:
    """Curvature interval [l, L] plus the widening schedule used on retry."""

    l: float = 0.0
    L: float = 2.0
    delta1: float = 0.2            # added to L per relaxation
    delta2: float = 0.2            # subtracted from l per relaxation (floored at 0)
    max_relaxations: int = 50

    def __post_init__(self):
        if not (0.0 <= self.l < self.L):
            raise WindowError(f"need 0 <= l < L, got l={self.l}, L={self.L}")
        if self.delta1 < 0 or self.delta2 < 0:
            raise WindowError("relaxation steps must be nonnegative")

    def widened(self) -> "SmoothnessWindow":
        return SmoothnessWindow(max(0.0, self.l - self.delta2), self.L + self.delta1,
                                self.delta1, self.delta2, self.max_relaxations)


def constraint_matrix(xs: np.ndarray, zs: np.ndarray, window: SmoothnessWindow) -> np.ndarray:
    """Pairwise constants c[i, j] of the consistency system u_i >= u_j + c_ij.

    c_ij couples the first-order increment of the latent potential at x_j with
    the curvature window: the inner-product term is the tangent-plane move,
    the bracket tightens it using both smoothness (L) and strong convexity (l).
    """
    l, L = window.l, window.L
    xs = np.asarray(xs, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    dx = xs[:, None, :] - xs[None, :, :]        # dx[i,j] = x_i - x_j
    dz = zs[:, None, :] - zs[None, :, :]
    tangent = np.einsum("jd,ijd->ij", zs, dx)   # <z_j, x_i - x_j>
    scale = 1.0 / (2.0 * (1.0 - l / L))
    bracket = ((dz * dz).sum(axis=2) / L
               + l * (dx * dx).sum(axis=2)
               - 2.0 * (l / L) * (dz * dx).sum(axis=2))
    c = tangent + scale * bracket
    np.fill_diagonal(c, 0.0)
    return c


def constraint_constant(pair_i: tuple, pair_j: tuple, window: SmoothnessWindow) -> float:
    """Single c_ij for pairs (x_i, z_i), (x_j, z_j)."""
    xs = np.stack([np.atleast_1d(np.asarray(p[0], dtype=np.float64))
                   for p in (pair_i, pair_j)])
    zs = np.stack([np.atleast_1d(np.asarray(p[1], dtype=np.float64))
                   for p in (pair_i, pair_j)])
    return float(constraint_matrix(xs, zs, window)[0, 1])


@dataclass
class FeasibilityResult:
    feasible: bool
    u: np.ndarray | None          # canonical potentials (all <= 0), or None
    cycle: list | None            # witness node sequence i1 -> i2 -> ... (-> i1)
    cycle_sum: float | None       # sum of c along the witness cycle (> 0)


def feasibility(c: np.ndarray) -> FeasibilityResult:
    """Decide u_i >= u_j + c_ij by Bellman-Ford over the constraint graph.

    Each constraint is the edge i -> j with weight -c_ij; starting all
    distances at zero plays the role of a virtual source. If relaxation still
    improves after K full passes there is a cycle with positive constant-sum
    and no potentials exist; the cycle is recovered by walking predecessors.
    The returned u is the componentwise-largest nonpositive solution.
    """
    c = np.asarray(c, dtype=np.float64)
    K = len(c)
    if K <= 1:
        return FeasibilityResult(True, np.zeros(K), None, None)
    w = -c
    scale = max(1.0, float(np.abs(c).max()))
    eps = 1e-12 * scale
    d = np.zeros(K)
    pred = np.full(K, -1, dtype=np.int64)
    improved = False
    for _ in range(K + 1):
        improved = False
        for j in range(K):
            cand = d + w[:, j]
            cand[j] = np.inf
            i = int(np.argmin(cand))
            if cand[i] < d[j] - eps:
                d[j] = cand[i]
                pred[j] = i
                improved = True
        if not improved:
            break
    if improved:
        # still relaxing after K passes: walk back K steps to be sure we sit
        # on the offending cycle, then read it off
        v = int(np.flatnonzero(pred >= 0)[-1])
        for _ in range(K):
            v = int(pred[v])
        cycle = [v]
        node = int(pred[v])
        while node != v:
            cycle.append(node)
            node = int(pred[node])
        cycle.reverse()
        csum = float(sum(c[cycle[t], cycle[(t + 1) % len(cycle)]]
                         for t in range(len(cycle))))
        return FeasibilityResult(False, None, cycle, csum)
    worst = float((c - (d[:, None] - d[None, :])).max())
    if worst > 1e-9 * scale:
        raise SolverError("potential reconstruction failed verification",
                          residual=worst)
    return FeasibilityResult(True, d, None, None)


def quadratic_coefficients(xs: np.ndarray, zs: np.ndarray, u: np.ndarray,
                           x_query: np.ndarray, window: SmoothnessWindow):
    """Per-neighbour quadratics q_i(z) = kappa ||z||^2 + <b_i, z> + c_i whose
    pointwise max the interpolation minimizes. Returns (B, cvec, kappa)."""
    l, L = window.l, window.L
    gamma = L - l
    kappa = 1.0 / (2.0 * gamma)
    a = L / (2.0 * gamma)
    w = x_query[None, :] - xs                     # w_i = x' - x_i
    B = -(zs + l * w) / gamma
    cvec = (u + np.einsum("id,id->i", zs, w)
            + a * ((zs * zs).sum(axis=1) / L
                   + l * (w * w).sum(axis=1)
                   + 2.0 * (l / L) * np.einsum("id,id->i", zs, w)))
    return B, cvec, kappa


@dataclass
class CipSolution:
    v: float                       # interpolated potential value at the query
    z_prime: np.ndarray            # interpolated feature
    active_constraints: list       # neighbour indices with positive dual weight
    relaxations_used: int
    window_used: SmoothnessWindow
    gap: float                     # certified primal-dual gap at termination
    iterations: int
    potentials: np.ndarray = field(default=None, repr=False)


def _solve_dual(B: np.ndarray, cvec: np.ndarray, gamma: float, *,
                tol: float, max_iters: int, fail_gap: float):
    """Frank-Wolfe with away steps on phi(lam) = c^T lam - (gamma/2)||B^T lam||^2
    over the simplex; the toward-vertex gap equals the primal-dual gap, so
    termination is certified. Returns (z, v_minus_kappa_part, lam, gap, iters)."""
    K = len(cvec)
    start = int(np.argmax(cvec - 0.5 * gamma * (B * B).sum(axis=1)))
    lam = np.zeros(K)
    lam[start] = 1.0
    z = -gamma * (B.T @ lam)
    g = cvec + B @ z
    gap = float(g.max() - g @ lam)
    iters = 0
    while gap > tol and iters < max_iters:
        iters += 1
        s = int(np.argmax(g))
        gl = float(g @ lam)
        support = np.flatnonzero(lam > 0.0)
        a_idx = int(support[np.argmin(g[support])])
        fw_gap = float(g[s]) - gl
        aw_gap = gl - float(g[a_idx])
        if fw_gap >= aw_gap:
            d = -lam.copy()
            d[s] += 1.0
            t_max, gd, drop = 1.0, fw_gap, None
        else:
            d = lam.copy()
            d[a_idx] -= 1.0
            t_max = lam[a_idx] / (1.0 - lam[a_idx]) if lam[a_idx] < 1.0 else 0.0
            gd, drop = aw_gap, a_idx
        bd = B.T @ d
        denom = gamma * float(bd @ bd)
        t = t_max if denom <= 0.0 else min(gd / denom, t_max)
        if t <= 0.0:
            break  # pinned at a face; gap is whatever it is
        lam += t * d
        if drop is not None and t >= t_max:
            lam[drop] = 0.0
        np.maximum(lam, 0.0, out=lam)
        lam /= lam.sum()
        z = -gamma * (B.T @ lam)
        g = cvec + B @ z
        gap = float(g.max() - g @ lam)
    if gap > fail_gap:
        raise SolverError("interpolation dual failed to converge",
                          residual=gap, iterations=iters)
    return z, float(g.max()), lam, max(gap, 0.0), iters


def solve_qcp(x_query: np.ndarray, xs: np.ndarray, zs: np.ndarray,
              u: np.ndarray, window: SmoothnessWindow, *, tol: float = 1e-13,
              max_iters: int = 20000, fail_gap: float = 1e-8) -> CipSolution:
    """Minimize v over (v, z') subject to each neighbour's quadratic lower
    bound on the latent potential at the query.

    Strong convexity makes z' unique; the answer satisfies
    ||z' - z*|| <= sqrt(2 (L-l) gap) with the reported gap.
    """
    gamma = window.L - window.l
    kappa = 1.0 / (2.0 * gamma)
    B, cvec, _ = quadratic_coefficients(xs, zs, u, x_query, window)
    z, gmax, lam, gap, iters = _solve_dual(B, cvec, gamma, tol=tol,
                                           max_iters=max_iters, fail_gap=fail_gap)
    v = gmax + kappa * float(z @ z)
    active = [int(i) for i in np.flatnonzero(lam > 1e-10)]
    return CipSolution(v=v, z_prime=z, active_constraints=active,
                       relaxations_used=0, window_used=window, gap=gap,
                       iterations=iters, potentials=u)


def interpolate_window(xs: np.ndarray, zs: np.ndarray, x_query: np.ndarray,
                       window: SmoothnessWindow, *, tol: float = 1e-13,
                       max_iters: int = 20000) -> CipSolution:
    """Single-window solve on explicit pairs; raises WindowError if the pairs
    admit no (l, L) potential."""
    xs = np.asarray(xs, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    x_query = np.asarray(x_query, dtype=np.float64)
    res = feasibility(constraint_matrix(xs, zs, window))
    if not res.feasible:
        raise WindowError(
            f"pairs inconsistent with window (l={window.l}, L={window.L}): "
            f"cycle {res.cycle} has constant-sum {res.cycle_sum:.3g}")
    return solve_qcp(x_query, xs, zs, res.u, window, tol=tol, max_iters=max_iters)


def relax_until_feasible(xs: np.ndarray, zs: np.ndarray, x_query: np.ndarray,
                         window: SmoothnessWindow, *, tol: float = 1e-13,
                         max_iters: int = 20000) -> CipSolution:
    """The widening retry loop on an explicit neighbour window.

    Raises InferenceError when the budget runs out — this genuinely happens
    when the window contains pairs whose feature displacement opposes their
    input offset, which no curvature interval can explain.
    """
    xs = np.asarray(xs, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    x_query = np.asarray(x_query, dtype=np.float64)
    win = window
    for attempt in range(window.max_relaxations + 1):
        res = feasibility(constraint_matrix(xs, zs, win))
        if res.feasible:
            sol = solve_qcp(x_query, xs, zs, res.u, win, tol=tol,
                            max_iters=max_iters)
            sol.relaxations_used = attempt
            return sol
        win = win.widened()
    raise InferenceError(
        f"no consistent window after {window.max_relaxations} relaxations "
        f"(reached l={win.l:g}, L={win.L:g})")


def robust_infer(atlas: Atlas, query_x: np.ndarray, q: NeighborQuery,
                 window: SmoothnessWindow, *, tol: float = 1e-13,
                 max_iters: int = 20000) -> CipSolution:
    """Retrieval + consistency + interpolation for one query against an atlas.

    Retrieval happens once; only the curvature window is widened on retry.
    Exact duplicate (x, z) pairs are dropped before building constraints.
    """
    query_x = np.asarray(query_x, dtype=np.float64)
    idx = knn_batch(atlas, query_x[None, :], q)[0]
    xs, zs = neighbor_window(atlas, idx)
    return relax_until_feasible(xs, zs, query_x, window, tol=tol,
                                max_iters=max_iters)


def classify(head, solution: CipSolution) -> int:
    """Label for an interpolated feature under the trained affine head.

    np.argmax resolves ties toward the lower class index.
    """
    logits = head(solution.z_prime[None, :])[0]
    return int(np.argmax(logits))
