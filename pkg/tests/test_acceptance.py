"""Acceptance gate: one test per release criterion.

Each test prints exactly one pass/fail line under `pytest -v`. Numeric
expectations come from independent oracles (LP feasibility, grid+refinement
minimization, closed forms) or from fixed-seed runs of the full pipeline;
trend criteria assert direction and rank correlation, not headline numbers.
"""

import csv
import time

import numpy as np
import pytest
import yaml
from scipy.stats import spearmanr

import oracles
from otrobust import cli
from otrobust.attention import (attention_lipschitz_bound,
                                empirical_attention_lipschitz,
                                random_attention_spec)
from otrobust.cip import (SmoothnessWindow, constraint_matrix, feasibility,
                          relax_until_feasible, solve_qcp)
from otrobust.datasets import SyntheticSpec, generate_synthetic
from otrobust.defenses import NetDefense, OTADDefense, SurrogateDefense
from otrobust.neighbors import NeighborQuery, build_atlas, knn_batch
from otrobust.network import ResidualNet, gradient_check, train_network
from otrobust.robustness import (AttackConfig, bpda_pgd, evaluate_defense,
                                 local_lipschitz_estimate, margin)
from otrobust.surrogate import (SurrogateAttention, SurrogateBackward,
                                SurrogateMLP, build_surrogate_dataset,
                                train_surrogate)


def test_criterion_01_feasibility_matches_lp_oracle():
    rng = np.random.default_rng(101)
    t0 = time.monotonic()
    outcomes = {True: 0, False: 0}
    for trial in range(200):
        k = int(rng.integers(1, 7))
        d = int(rng.integers(1, 5))
        xs = rng.normal(size=(k, d))
        if trial % 2 == 0:
            # near-monotone maps: mostly consistent with some window
            zs = rng.uniform(0.2, 1.5) * xs + 0.3 * rng.normal(size=(k, d))
        else:
            zs = rng.normal(size=(k, d))
        l = float(rng.choice([0.0, 0.2]))
        win = SmoothnessWindow(l=l, L=l + float(rng.uniform(0.5, 3.0)))
        c = constraint_matrix(xs, zs, win)
        ours = feasibility(c).feasible
        lp_ok, _ = oracles.lp_feasibility(c)
        assert ours == lp_ok, f"instance {trial}: solver {ours}, LP oracle {lp_ok}"
        outcomes[ours] += 1
    assert outcomes[True] > 0 and outcomes[False] > 0  # both branches exercised
    assert time.monotonic() - t0 < 10.0


def test_criterion_02_qcp_matches_grid_oracle_and_closed_forms():
    rng = np.random.default_rng(202)
    done = 0
    while done < 100:
        k = int(rng.integers(2, 6))
        d = int(rng.integers(1, 4))
        xs = rng.normal(size=(k, d))
        zs = rng.uniform(0.2, 1.2) * xs + 0.2 * rng.normal(size=(k, d))
        win = SmoothnessWindow(l=float(rng.choice([0.0, 0.1])),
                               L=float(rng.uniform(1.5, 3.0)))
        res = feasibility(constraint_matrix(xs, zs, win))
        if not res.feasible:
            continue
        done += 1
        xq = rng.normal(size=d)
        sol = solve_qcp(xq, xs, zs, res.u, win)
        oracle = oracles.grid_qcp_value(xq, xs, zs, res.u, win)
        assert sol.v == pytest.approx(oracle, abs=1e-4), f"instance {done}"

    # single neighbour: z' = z_i + l (x' - x_i)
    rng = np.random.default_rng(5)
    xi, zi, xq = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    for l, L in ((0.0, 1.0), (0.3, 2.0)):
        sol = solve_qcp(xq, xi[None], zi[None], np.zeros(1),
                        SmoothnessWindow(l=l, L=L))
        np.testing.assert_allclose(sol.z_prime, zi + l * (xq - xi), atol=1e-6)

    # 1-d identity pairs, query midway
    sol = solve_qcp(np.array([0.5]), np.array([[0.0], [1.0]]),
                    np.array([[0.0], [1.0]]), np.array([0.0, 0.5]),
                    SmoothnessWindow(l=0.0, L=1.0))
    assert sol.z_prime[0] == pytest.approx(0.5, abs=1e-6)
    assert sol.v == pytest.approx(0.125, abs=1e-6)

    # query sitting on a stored pair reproduces that pair's feature
    rng = np.random.default_rng(4)
    xs = rng.normal(size=(5, 2))
    zs = 0.8 * xs
    win = SmoothnessWindow(l=0.0, L=2.0)
    res = feasibility(constraint_matrix(xs, zs, win))
    for i in range(5):
        sol = solve_qcp(xs[i], xs, zs, res.u, win)
        np.testing.assert_allclose(sol.z_prime, zs[i], atol=1e-6)


def test_criterion_03_interpolation_respects_window_lipschitz(digits_model,
                                                              digits_split):
    net, atlas = digits_model
    _, test = digits_split
    q = NeighborQuery(k=6)
    base_window = SmoothnessWindow(l=0.0, L=4.0)
    rng = np.random.default_rng(303)
    pairs = violations = 0
    while pairs < 500:
        x0 = test.x[pairs % len(test.x)] + 0.05 * rng.normal(size=test.dim)
        idx0 = knn_batch(atlas, x0[None], q)[0]
        direction = rng.normal(size=test.dim)
        direction /= np.linalg.norm(direction)
        step = float(rng.uniform(1e-3, 0.2))
        x1 = None
        for _ in range(6):  # shrink until retrieval agrees on both endpoints
            cand = x0 + step * direction
            if np.array_equal(np.sort(knn_batch(atlas, cand[None], q)[0]),
                              np.sort(idx0)):
                x1 = cand
                break
            step *= 0.25
        if x1 is None:
            continue
        xs, zs = atlas.x[idx0], atlas.z[idx0]
        sol0 = relax_until_feasible(xs, zs, x0, base_window)
        sol1 = solve_qcp(x1, xs, zs, sol0.potentials, sol0.window_used)
        lhs = float(np.linalg.norm(sol1.z_prime - sol0.z_prime))
        bound = sol0.window_used.L * float(np.linalg.norm(x1 - x0)) + 1e-6
        if lhs > bound:
            violations += 1
        pairs += 1
    assert violations == 0


def test_criterion_04_window_sweep_trends(digits_model, digits_split):
    t0 = time.monotonic()
    net, atlas = digits_model
    _, test = digits_split
    widths = [4.0, 8.0, 16.0, 32.0, 64.0]

    estimates = []
    for width in widths:
        defense = OTADDefense(net, atlas, k=6,
                              window=SmoothnessWindow(l=0.0, L=width))
        per_center = [
            local_lipschitz_estimate(lambda b: defense.features(b), test.x[i],
                                     radius=0.3, samples=16, seed=i)
            for i in range(20)
        ]
        estimates.append(float(np.mean(per_center)))
    rho = spearmanr(widths, estimates).statistic
    assert rho > 0.8, f"lipschitz estimates {estimates} not rising (rho={rho:.3f})"

    attack = AttackConfig(kind="bpda_pgd", epsilon=0.8, steps=30)
    gaps = {}
    for width in (widths[0], widths[-1]):
        defense = OTADDefense(net, atlas, k=6,
                              window=SmoothnessWindow(l=0.0, L=width))
        rep = evaluate_defense(defense, net, test.x, test.y,
                               task="classification", attack=attack, seed=0,
                               workers=4)
        gaps[width] = rep["standard_acc"] - rep["robust_acc"]
    assert time.monotonic() - t0 < 1800.0
    assert gaps[widths[-1]] > gaps[widths[0]], (
        f"accuracy gap did not widen: width {widths[0]} -> gap "
        f"{gaps[widths[0]]:.3f}, width {widths[-1]} -> gap {gaps[widths[-1]]:.3f}")


def test_criterion_05_synthetic_difficulty_sweep(tmp_path):
    cfg = {
        "seed": 0,
        "dataset": {"source": "synthetic", "dim": 32, "num_classes": 10,
                    "class_std": 0.1, "train_count": 2000, "test_count": 400,
                    "rng_seed": 0},
        "network": {"m": 3, "epochs": 40, "batch_size": 64,
                    "learning_rate": 0.05, "energy_weight": 0.01,
                    "rng_seed": 0},
        "defense": {"kind": "otad", "k": 10, "l": 0.0, "L": 2.0},
        "attacks": [{"kind": "bpda_pgd", "epsilon": 0.5, "steps": 20}],
        "evaluate": {"test_limit": 100},
        "sweep": {"axis": "class_std",
                  "values": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]},
    }
    cfg_path = tmp_path / "sweep.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["sweep", "--config", str(cfg_path),
                     "--out", str(tmp_path)]) == 0
    with open(tmp_path / "sweep.csv") as f:
        rows = list(csv.DictReader(f))
    stds = [float(r["axis_value"]) for r in rows]
    mean_re = [float(r["mean_RE"]) for r in rows]
    robust = [float(r["robust_acc"]) for r in rows]
    standard = [float(r["standard_acc"]) for r in rows]
    assert spearmanr(stds, mean_re).statistic > 0.8
    assert spearmanr(stds, robust).statistic < -0.8
    assert standard[0] >= 0.99


def test_criterion_06_interpolation_beats_frozen_net_under_search(
        digits_model_smooth, digits_split):
    net, atlas = digits_model_smooth
    _, test = digits_split
    attack = AttackConfig(kind="random_search", epsilon=2.0, budget=500)
    frozen = evaluate_defense(NetDefense(net), net, test.x, test.y,
                              task="classification", attack=attack, seed=0,
                              workers=4)
    defended = evaluate_defense(
        OTADDefense(net, atlas, k=3, window=SmoothnessWindow(l=0.0, L=3.0)),
        net, test.x, test.y, task="classification", attack=attack, seed=0,
        workers=4)
    assert defended["robust_acc"] >= frozen["robust_acc"] + 0.10, (
        f"defended {defended['robust_acc']:.3f} vs frozen "
        f"{frozen['robust_acc']:.3f}")


def test_criterion_07_attention_bound_certifies():
    # hand case: 1 token, d_model 4, 1 head, unit bounds
    assert attention_lipschitz_bound(1, 4, 1, 1.0, 1.0) == 2.0

    rng = np.random.default_rng(707)
    passed = 0
    for trial in range(100):
        d_model = int(rng.choice([2, 4, 8]))
        heads = int(rng.choice([h for h in (1, 2, 4) if d_model % h == 0]))
        spec = random_attention_spec(rng, int(rng.integers(1, 4)), d_model,
                                     heads, 1.0, 1.0)
        bound = attention_lipschitz_bound(spec)
        emp = empirical_attention_lipschitz(spec, n_starts=2, iters=15,
                                            seed=trial)
        assert emp <= bound, f"trial {trial}: empirical {emp} > bound {bound}"
        passed += 1
    assert passed == 100


def test_criterion_08_solver_imitation_weight_improves_robustness():
    robust = {0.0: [], 1.0: []}
    for seed in (0, 1, 2):
        spec = SyntheticSpec(dim=32, num_classes=10, class_std=0.3,
                             train_count=1000, test_count=200, rng_seed=seed)
        train, test = generate_synthetic(spec)
        net = ResidualNet(32, 10, depth=3, seed=seed)
        train_network(net, train.x, train.y, task="classification", epochs=40,
                      batch_size=64, lr=0.05, alpha=0.01, seed=seed)
        atlas = build_atlas(net, train.x, train.y)
        otad = OTADDefense(net, atlas, k=10,
                           window=SmoothnessWindow(l=0.0, L=2.0))
        data = build_surrogate_dataset(otad)
        cfg = AttackConfig(kind="bpda_pgd", epsilon=0.5, steps=20)
        for mix in (1.0, 0.0):
            model = SurrogateMLP(32, 10, hidden=(128,), seed=seed)
            train_surrogate(model, data, alpha=mix, epochs=80, batch_size=32,
                            lr=0.005, seed=seed)
            defense = SurrogateDefense(net, atlas, model)
            differentiable = SurrogateBackward(net, atlas, model)
            hits = 0
            for i in range(100):
                point_logits = lambda pt: defense.logits(pt[None, :])[0]
                adv = bpda_pgd(point_logits, differentiable, test.x[i],
                               int(test.y[i]), cfg, seed=seed * 1000 + i)
                hits += margin(point_logits(adv), int(test.y[i])) > 0.0
            robust[mix].append(hits / 100.0)
    assert np.mean(robust[1.0]) >= np.mean(robust[0.0]), robust


def test_criterion_09_gradient_checks():
    rng = np.random.default_rng(909)
    x = rng.normal(size=(4, 5))
    net_c = ResidualNet(5, 3, depth=2, seed=9)
    assert gradient_check(net_c, x, rng.integers(0, 3, size=4),
                          task="classification", alpha=0.3) < 1e-4
    net_r = ResidualNet(5, 2, depth=2, seed=10)
    assert gradient_check(net_r, x, rng.normal(size=(4, 2)),
                          task="regression", alpha=0.1) < 1e-4

    # surrogate parameter gradients, both architectures
    queries = rng.normal(size=(4, 3))
    nx = rng.normal(size=(4, 2, 3))
    nz = rng.normal(size=(4, 2, 3))
    g_probe = rng.normal(size=(4, 3))
    for model in (SurrogateMLP(3, 2, hidden=(8,), seed=11),
                  SurrogateAttention(3, 2, d_model=8, n_heads=2, seed=11)):
        def scalar():
            return float((model.forward(queries, nx, nz) * g_probe).sum())

        cache = model.forward_full(queries, nx, nz)
        grads = model.backward(cache, g_probe)
        worst, step = 0.0, 1e-6
        for p, g in zip(model.params, grads):
            flat_p, flat_g = p.ravel(), np.asarray(g).ravel()
            for idx in range(0, flat_p.size, max(1, flat_p.size // 20)):
                keep = flat_p[idx]
                flat_p[idx] = keep + step
                up = scalar()
                flat_p[idx] = keep - step
                down = scalar()
                flat_p[idx] = keep
                worst = max(worst, abs((up - down) / (2 * step) - flat_g[idx]))
        assert worst < 1e-4, type(model).__name__


def test_criterion_10_fixed_seed_reruns_are_byte_identical(tmp_path):
    cfg = {
        "seed": 7,
        "dataset": {"source": "synthetic", "dim": 6, "num_classes": 3,
                    "class_std": 0.25, "train_count": 90, "test_count": 30,
                    "rng_seed": 5},
        "network": {"m": 2, "epochs": 12, "batch_size": 16,
                    "learning_rate": 0.05, "energy_weight": 0.01,
                    "rng_seed": 1},
        "defense": {"kind": "otad", "k": 5, "l": 0.0, "L": 2.0},
        "attacks": [{"kind": "random_search", "epsilon": 0.4, "budget": 60}],
        "evaluate": {"test_limit": 15, "lipschitz_radius": 0.2,
                     "lipschitz_centers": 3, "lipschitz_samples": 4},
    }
    payloads = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        cfg_path = out / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump(cfg))
        args = ["--config", str(cfg_path), "--out", str(out)]
        assert cli.main(["train", *args]) == 0
        assert cli.main(["evaluate", *args]) == 0
        payloads.append({
            "atlas": (out / "atlas.otat").read_bytes(),
            "checkpoint": (out / "checkpoint.otck").read_bytes(),
            "report": (out / "report_otad_random_search_0.json").read_bytes(),
        })
    assert payloads[0]["atlas"] == payloads[1]["atlas"]
    assert payloads[0]["checkpoint"] == payloads[1]["checkpoint"]
    assert payloads[0]["report"] == payloads[1]["report"]
