"""Attack harness and evaluation metrics for the defenses.

All attacks perturb inside an L2 ball of radius epsilon around the clean
input; every iterate is projected, so the ball constraint holds throughout,
not just at the returned point. The gradient-based kinds (bpda_pgd,
pgd_direct, regression_pgd) differentiate the frozen base net; bpda_pgd and
regression_pgd additionally score candidates through the defense, which is
the standard way to attack a non-differentiable inference rule. The
black-box kinds (cw_evolutionary, random_search) receive only a logits
closure — no gradient access by construction — and pay one unit of query
budget per closure call.
"""

from dataclasses import dataclass
import multiprocessing as mp

import numpy as np

from .defenses import OTADDefense
from .errors import UndefinedValueError
from .network import softmax_cross_entropy

ATTACK_KINDS = ("none", "bpda_pgd", "cw_evolutionary", "random_search",
                "pgd_direct", "regression_pgd")


def project_ball(x: np.ndarray, center: np.ndarray, eps: float,
                 clip: tuple | None = None) -> np.ndarray:
    """Euclidean projection onto the eps-ball around center (then box clip)."""
    d = x - center
    norm = float(np.linalg.norm(d))
    if norm > eps:
        x = center + d * (eps / norm)
    if clip is not None:
        x = np.clip(x, clip[0], clip[1])
    return x


def margin(logits: np.ndarray, label: int) -> float:
    """Correct-class logit minus best rival logit; negative = misclassified."""
    others = np.delete(logits, label)
    return float(logits[label] - others.max())


@dataclass
class AttackConfig:
    kind: str = "none"
    epsilon: float = 2.0
    budget: int = 850             # query budget for black-box kinds
    steps: int = 20               # iterations for gradient kinds
    step_size: float | None = None
    mutation_sigma: float = 0.15  # cw_evolutionary only
    rng_seed: int = 0
    clip: tuple | None = None     # optional box constraint, e.g. (0, 1) pixels

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0 or self.budget < 0:
            raise ValueError("epsilon and budget must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        clip = d.get("clip")
        if clip is not None:
            d["clip"] = (float(clip[0]), float(clip[1]))
        return cls(**d)

    def _step(self) -> float:
        return (self.step_size if self.step_size is not None
                else 2.5 * self.epsilon / max(self.steps, 1))


def bpda_pgd(defense_logits, net, x: np.ndarray, y: int, cfg: AttackConfig,
             seed: int = 0) -> np.ndarray:
    """Forward through the defense, backward through the net: each step
    softmaxes the defense's logits at the current iterate and pulls that
    cross-entropy gradient back through the differentiable base net. Keeps
    the iterate whose defense margin is worst."""
    if cfg.epsilon == 0.0 or cfg.steps == 0:
        return x.copy()
    step = cfg._step()
    x_adv = x.copy()
    best, best_margin = x.copy(), margin(defense_logits(x), y)
    for _ in range(cfg.steps):
        logits = defense_logits(x_adv)[None, :]
        _, g_out = softmax_cross_entropy(logits, np.array([y]))
        cache = net.forward_full(x_adv[None, :])
        g = net.grad_input(cache, g_out)[0]
        norm = float(np.linalg.norm(g))
        if norm > 0.0:
            x_adv = x_adv + step * g / norm
        x_adv = project_ball(x_adv, x, cfg.epsilon, cfg.clip)
        m = margin(defense_logits(x_adv), y)
        if m < best_margin:
            best, best_margin = x_adv.copy(), m
        if best_margin < 0.0:
            break
    return best


def pgd_direct(net, x: np.ndarray, y: int, cfg: AttackConfig,
               seed: int = 0) -> np.ndarray:
    """Plain white-box PGD on the base net; never queries the defense."""
    if cfg.epsilon == 0.0 or cfg.steps == 0:
        return x.copy()
    step = cfg._step()
    x_adv = x.copy()
    for _ in range(cfg.steps):
        cache = net.forward_full(x_adv[None, :])
        _, g_out = softmax_cross_entropy(cache["outputs"], np.array([y]))
        g = net.grad_input(cache, g_out)[0]
        norm = float(np.linalg.norm(g))
        if norm > 0.0:
            x_adv = x_adv + step * g / norm
        x_adv = project_ball(x_adv, x, cfg.epsilon, cfg.clip)
    return x_adv


def cw_evolutionary(defense_logits, x: np.ndarray, y: int, cfg: AttackConfig,
                    seed: int = 0) -> np.ndarray:
    """(1+1) evolution strategy on the margin, black-box.

    Gaussian mutation with success-based step adaptation: the step grows on
    accepted children and shrinks gently on rejections, holding the
    acceptance rate near the classic one-fifth target. Stops early once the
    margin goes negative; every logits call is budgeted.
    """
    rng = np.random.default_rng(seed)
    if cfg.epsilon == 0.0 or cfg.budget == 0:
        return x.copy()
    sigma = cfg.mutation_sigma
    parent = x.copy()
    parent_m = margin(defense_logits(parent), y)
    evals = 1
    while evals < cfg.budget and parent_m >= 0.0:
        child = project_ball(parent + sigma * rng.standard_normal(x.size),
                             x, cfg.epsilon, cfg.clip)
        child_m = margin(defense_logits(child), y)
        evals += 1
        if child_m < parent_m:
            parent, parent_m = child, child_m
            sigma = min(sigma * 1.5, cfg.epsilon)
        else:
            sigma = max(sigma * 0.87, 1e-8)
    return parent


def random_search_attack(defense_logits, x: np.ndarray, y: int,
                         cfg: AttackConfig, seed: int = 0) -> np.ndarray:
    """Square-style black-box search generalized to flat vectors: random
    contiguous coordinate blocks get +-step rewrites, the block size shrinks
    on a fixed schedule, and a proposal is kept only if the defense margin
    drops. Query accounting is strict (one eval per proposal plus one for the
    starting point)."""
    rng = np.random.default_rng(seed)
    if cfg.epsilon == 0.0 or cfg.budget == 0:
        return x.copy()
    d = x.size
    x_adv = x.copy()
    best_m = margin(defense_logits(x_adv), y)
    evals = 1
    frac = 0.5
    shrink_every = max(1, cfg.budget // 5)
    trial = 0
    while evals < cfg.budget and best_m >= 0.0:
        if trial > 0 and trial % shrink_every == 0:
            frac = max(frac / 2.0, 1.0 / d)
        trial += 1
        size = max(1, int(round(frac * d)))
        start = int(rng.integers(0, d - size + 1))
        delta = np.zeros(d)
        # spread the radius over the block so a single accepted rewrite can
        # use the whole budget of movement
        delta[start:start + size] = (rng.choice([-1.0, 1.0], size=size)
                                     * cfg.epsilon / np.sqrt(size))
        cand = project_ball(x_adv + delta, x, cfg.epsilon, cfg.clip)
        m = margin(defense_logits(cand), y)
        evals += 1
        if m < best_m:
            x_adv, best_m = cand, m
    return x_adv


def regression_attack(defense_predict, net, x: np.ndarray, y: np.ndarray,
                      cfg: AttackConfig, seed: int = 0) -> np.ndarray:
    """Gradient ascent on the base net's squared error against the target,
    keeping the iterate where the defense's error is largest."""
    if cfg.epsilon == 0.0 or cfg.steps == 0:
        return x.copy()
    step = cfg._step()
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))

    def defense_err(pt):
        pred = np.atleast_2d(defense_predict(pt))[0]
        return float(((pred - y) ** 2).sum())

    x_adv = x.copy()
    best, best_err = x.copy(), defense_err(x)
    for _ in range(cfg.steps):
        cache = net.forward_full(x_adv[None, :])
        g_out = 2.0 * (cache["outputs"] - y[None, :])
        g = net.grad_input(cache, g_out)[0]
        norm = float(np.linalg.norm(g))
        if norm > 0.0:
            x_adv = x_adv + step * g / norm
        x_adv = project_ball(x_adv, x, cfg.epsilon, cfg.clip)
        err = defense_err(x_adv)
        if err > best_err:
            best, best_err = x_adv.copy(), err
    return best


# --- metrics ---

def relative_error(net_features: np.ndarray, defense_features: np.ndarray) -> np.ndarray:
    """Relative squared disagreement ||R(x) - f(x)||^2 / ||R(x)||^2 between
    the net's feature map and the defense's replacement, per sample."""
    net_features = np.atleast_2d(net_features)
    defense_features = np.atleast_2d(defense_features)
    den = (net_features ** 2).sum(axis=1)
    if np.any(den == 0.0):
        raise UndefinedValueError("relative error undefined for a zero feature")
    num = ((net_features - defense_features) ** 2).sum(axis=1)
    return num / den


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(((a - b) ** 2).sum(axis=1).mean())


def mae(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).mean())


def smape(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.abs(a) + np.abs(b)
    ratio = np.where(denom > 1e-12, 2.0 * np.abs(a - b) / np.maximum(denom, 1e-12), 0.0)
    return float(ratio.mean())


def local_lipschitz_estimate(feature_fn, x: np.ndarray, radius: float,
                             samples: int = 10, seed: int = 0) -> float:
    """Max observed slope ||f(x1)-f(x2)|| / ||x1-x2|| over `samples` random
    pairs drawn inside the radius ball around x — a lower bound on the true
    local constant, reported as an estimate."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    best = 0.0
    for _ in range(samples):
        u1 = rng.standard_normal(d)
        u2 = rng.standard_normal(d)
        x1 = x + radius * rng.uniform() * u1 / np.linalg.norm(u1)
        x2 = x + radius * rng.uniform() * u2 / np.linalg.norm(u2)
        gap = float(np.linalg.norm(x1 - x2))
        if gap < 1e-9:
            continue
        f1, f2 = np.atleast_2d(feature_fn(x1)), np.atleast_2d(feature_fn(x2))
        best = max(best, float(np.linalg.norm(f1 - f2)) / gap)
    return best


# --- evaluation driver ---

def attack_sample(defense, net, x: np.ndarray, y, cfg: AttackConfig,
                  seed: int) -> np.ndarray:
    """Dispatch one sample to the configured attack. Black-box kinds get a
    closure only; gradient kinds also get the frozen net."""
    def closure(pt):
        return defense.logits(pt[None, :])[0]

    if cfg.kind == "none":
        return x.copy()
    if cfg.kind == "bpda_pgd":
        return bpda_pgd(closure, net, x, int(y), cfg, seed)
    if cfg.kind == "pgd_direct":
        return pgd_direct(net, x, int(y), cfg, seed)
    if cfg.kind == "cw_evolutionary":
        return cw_evolutionary(closure, x, int(y), cfg, seed)
    if cfg.kind == "random_search":
        return random_search_attack(closure, x, int(y), cfg, seed)
    if cfg.kind == "regression_pgd":
        return regression_attack(lambda pt: defense.logits(pt[None, :]), net,
                                 x, y, cfg, seed)
    raise ValueError(f"unknown attack kind {cfg.kind!r}")


_WORKER: dict = {}


def _worker_init(payload):
    _WORKER.update(payload)


def _attack_indexed(i: int) -> tuple:
    w = _WORKER
    adv = attack_sample(w["defense"], w["net"], w["x"][i], w["y"][i],
                        w["cfg"], w["seed"] + i)
    return i, adv


def run_attack(defense, net, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               *, seed: int = 0, workers: int = 1) -> np.ndarray:
    """Per-sample attacks, seeded by index and gathered in index order — the
    result is identical for any worker count."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if cfg.kind == "none":
        return x.copy()
    if workers > 1:
        payload = {"defense": defense, "net": net, "x": x, "y": y,
                   "cfg": cfg, "seed": seed}
        with mp.get_context("fork").Pool(workers, _worker_init, (payload,)) as pool:
            indexed = pool.map(_attack_indexed, range(n))
        adv = np.empty_like(x)
        for i, pt in indexed:
            adv[i] = pt
        return adv
    return np.stack([attack_sample(defense, net, x[i], y[i], cfg, seed + i)
                     for i in range(n)])


def evaluate_defense(defense, net, x_test: np.ndarray, y_test: np.ndarray, *,
                     task: str = "classification",
                     attack: AttackConfig | None = None, seed: int = 0,
                     workers: int = 1, dataset_name: str = "dataset",
                     lipschitz_radius: float | None = None,
                     lipschitz_centers: int = 10,
                     lipschitz_samples: int = 5,
                     error_metric: str = "mse",
                     trace: list | None = None) -> dict:
    """Run the defense over a test set, optionally under attack; returns the
    report dict (schema: schemas/report.schema.json)."""
    cfg = attack if attack is not None else AttackConfig(kind="none")
    x_test = np.asarray(x_test, dtype=np.float64)
    n = len(x_test)
    adv = run_attack(defense, net, x_test, y_test, cfg,
                     seed=seed + cfg.rng_seed, workers=workers)

    clean_logits = defense.logits(x_test)
    adv_logits = clean_logits if cfg.kind == "none" else defense.logits(adv)

    feats_net = net.features(x_test)
    if trace is not None and isinstance(defense, OTADDefense):
        feats_def = defense.features(x_test, trace=trace)
    else:
        feats_def = defense.features(x_test)
    re = relative_error(feats_net, feats_def)

    report = {
        "dataset": dataset_name,
        "defense": defense.name,
        "attack": cfg.kind,
        "epsilon": cfg.epsilon if cfg.kind != "none" else 0.0,
        "budget": cfg.budget if cfg.kind in ("cw_evolutionary", "random_search")
                  else cfg.steps,
        "mean_RE": float(re.mean()),
        "per_sample": [],
    }

    if task == "classification":
        clean_pred = clean_logits.argmax(axis=1)
        adv_pred = adv_logits.argmax(axis=1)
        report["standard_acc"] = float((clean_pred == y_test).mean())
        report["robust_acc"] = float((adv_pred == y_test).mean())
        for i in range(n):
            report["per_sample"].append({
                "id": i,
                "clean_correct": bool(clean_pred[i] == y_test[i]),
                "adv_correct": bool(adv_pred[i] == y_test[i]),
                "clean_margin": margin(clean_logits[i], int(y_test[i])),
                "adv_margin": margin(adv_logits[i], int(y_test[i])),
                "re": float(re[i]),
            })
    else:
        y2 = np.atleast_2d(np.asarray(y_test, dtype=np.float64))
        if y2.shape[0] == 1 and n > 1:
            y2 = y2.T
        report["standard_acc"] = None
        report["robust_acc"] = None
        report["regression"] = {
            name: {"clean": fn(clean_logits, y2), "adv": fn(adv_logits, y2)}
            for name, fn in (("mse", mse), ("smape", smape), ("mae", mae))}
        report["regression"]["primary"] = error_metric
        for i in range(n):
            report["per_sample"].append({
                "id": i,
                "clean_err": float(((clean_logits[i] - y2[i]) ** 2).sum()),
                "adv_err": float(((adv_logits[i] - y2[i]) ** 2).sum()),
                "re": float(re[i]),
            })

    if lipschitz_radius is not None:
        estimate = 0.0
        for j in range(min(lipschitz_centers, n)):
            estimate = max(estimate, local_lipschitz_estimate(
                lambda pt: defense.features(pt[None, :]), x_test[j],
                lipschitz_radius, samples=lipschitz_samples, seed=seed + j))
        report["lipschitz_estimate"] = estimate
    else:
        report["lipschitz_estimate"] = None
    return report
