"""Config-driven command line for the whole pipeline.

Subcommands:
  train             fit the base net, extract the transport atlas
  evaluate          run a defense over the test set, clean and attacked
  sweep             repeat the pipeline along one axis, aggregate one CSV
  certify-attention closed-form attention Lipschitz bound vs. measurement
  surrogate-train   fit the differentiable solver stand-in

The config file is YAML (one key-value tree); `--seed`, `--out`, `--workers`
override the corresponding config entries. Every subcommand is deterministic
under the global seed, and output files contain no timestamps, so reruns are
byte-identical.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

import argparse
import copy
import csv
import json
import os
import sys

import numpy as np
import yaml

from . import attention, datasets, embedding, surrogate
from .cip import SmoothnessWindow
from .defenses import KNNMeanDefense, NetDefense, OTADDefense, SurrogateDefense
from .errors import (ConfigError, DataFormatError, InferenceError, OtrobustError,
                     ShapeError, SolverError, TrainingError, UndefinedValueError,
                     WindowError)
from .neighbors import build_atlas, load_atlas, save_atlas
from .network import (KIND_CLASSIFIER, KIND_EMBEDDING, ResidualNet, load_model,
                      save_model, train_network)
from .robustness import AttackConfig, evaluate_defense

DEFENSE_KINDS = ("frozen-net", "otad", "otad-surrogate", "knn-mean")

CHECKPOINT_FILE = "checkpoint.otck"
ATLAS_FILE = "atlas.otat"
EMBEDDING_FILE = "embedding.otck"
SURROGATE_FILE = "surrogate.otck"
TRAIN_LOG_FILE = "train_log.jsonl"


def load_config(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            cfg = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    return cfg


def _section(cfg: dict, name: str, required: bool) -> dict:
    sec = cfg.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"config is missing the '{name}' section")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    return sec


def _require_path(path, field: str) -> str:
    if path is None:
        raise ConfigError(f"config field '{field}' is required")
    if not os.path.exists(path):
        raise ConfigError(f"config field '{field}': path does not exist: {path}")
    return path


def build_datasets(cfg: dict, seed: int) -> tuple:
    """(train, test) Dataset pair from the dataset section."""
    sec = _section(cfg, "dataset", required=True)
    source = sec.get("source", "synthetic")
    if source == "synthetic":
        spec = datasets.SyntheticSpec(
            dim=int(sec.get("dim", 32)),
            num_classes=int(sec.get("num_classes", 5)),
            class_std=float(sec.get("class_std", 0.1)),
            train_count=int(sec.get("train_count", 2000)),
            test_count=int(sec.get("test_count", 500)),
            rng_seed=int(sec.get("rng_seed", seed)),
        )
        train, test = datasets.generate_synthetic(spec)
    elif source == "idx":
        train = datasets.load_idx(
            _require_path(sec.get("train_images"), "dataset.train_images"),
            _require_path(sec.get("train_labels"), "dataset.train_labels"),
            name=sec.get("name", "idx"))
        test = datasets.load_idx(
            _require_path(sec.get("test_images"), "dataset.test_images"),
            _require_path(sec.get("test_labels"), "dataset.test_labels"),
            name=sec.get("name", "idx"))
    elif source == "csv":
        full = datasets.load_csv_regression(
            _require_path(sec.get("path"), "dataset.path"),
            delimiter=sec.get("delimiter", ","),
            target_column=sec.get("target_column", "target"),
            name=sec.get("name", "csv"))
        train, test = datasets.split_dataset(
            full, float(sec.get("test_fraction", 0.2)),
            seed=int(sec.get("rng_seed", seed)))
    elif source == "cache":
        train = datasets.read_dataset(
            _require_path(sec.get("train_path"), "dataset.train_path"))
        test = datasets.read_dataset(
            _require_path(sec.get("test_path"), "dataset.test_path"))
    else:
        raise ConfigError(f"unknown dataset source {source!r}")

    if sec.get("subset_train"):
        train = datasets.stratified_subset(train, int(sec["subset_train"]),
                                           seed=int(sec.get("rng_seed", seed)))
    if sec.get("subset_test"):
        test = datasets.stratified_subset(test, int(sec["subset_test"]),
                                          seed=int(sec.get("rng_seed", seed)) + 1)
    return train, test


def _window_from(sec: dict) -> SmoothnessWindow:
    return SmoothnessWindow(
        l=float(sec.get("l", 0.0)),
        L=float(sec.get("L", 2.0)),
        delta1=float(sec.get("delta1", 0.2)),
        delta2=float(sec.get("delta2", 0.2)),
        max_relaxations=int(sec.get("max_relaxations", 50)),
    )


def _train_base_net(cfg: dict, train_ds, seed: int, out_dir):
    sec = _section(cfg, "network", required=True)
    out_dim = train_ds.num_classes if train_ds.task == "classification" \
        else train_ds.y.shape[1]
    net = ResidualNet(
        train_ds.dim, out_dim,
        depth=int(sec.get("m", 4)),
        residual=bool(sec.get("residual_enabled", True)),
        hidden=sec.get("hidden"),
        seed=int(sec.get("rng_seed", seed)),
    )
    log_path = os.path.join(out_dir, TRAIN_LOG_FILE) if out_dir else None
    history = train_network(
        net, train_ds.x, train_ds.y,
        task=train_ds.task,
        epochs=int(sec.get("epochs", 20)),
        batch_size=int(sec.get("batch_size", 64)),
        lr=float(sec.get("learning_rate", 0.1)),
        alpha=float(sec.get("energy_weight", 0.0)),
        momentum=float(sec.get("momentum", 0.9)),
        weight_decay=float(sec.get("weight_decay", 5e-4)),
        seed=int(sec.get("rng_seed", seed)),
        log_path=log_path,
    )
    return net, history


def _train_embedding_net(cfg: dict, train_ds, seed: int):
    sec = _section(cfg, "defense", required=False).get("embedding", {})
    return embedding.train_embedding(
        train_ds.x, train_ds.y,
        embed_dim=sec.get("embed_dim"),
        depth=int(sec.get("depth", 2)),
        epochs=int(sec.get("epochs", 5)),
        batch_size=int(sec.get("batch_size", 64)),
        triplets_per_epoch=sec.get("triplets_per_epoch"),
        learning_rate=float(sec.get("learning_rate", 0.05)),
        margin=float(sec.get("margin", 0.5)),
        seed=int(sec.get("rng_seed", seed)),
    )


def _load_artifacts(out_dir):
    ckpt = os.path.join(out_dir, CHECKPOINT_FILE)
    atlas_path = os.path.join(out_dir, ATLAS_FILE)
    _require_path(ckpt, "checkpoint (run `train` first)")
    _require_path(atlas_path, "atlas (run `train` first)")
    net, kind = load_model(ckpt)
    if kind != KIND_CLASSIFIER:
        raise ConfigError(f"{ckpt} is not a base-net checkpoint")
    return net, load_atlas(atlas_path)


def _embedder(out_dir, defense_sec):
    if defense_sec.get("metric", "euclidean") != "embedded":
        return None
    path = os.path.join(out_dir, EMBEDDING_FILE)
    _require_path(path, "embedding checkpoint (run `train` first)")
    emb_net, kind = load_model(path)
    if kind != KIND_EMBEDDING:
        raise ConfigError(f"{path} is not an embedding checkpoint")
    return emb_net.outputs


def make_defense(cfg: dict, net, atlas, out_dir):
    sec = _section(cfg, "defense", required=False)
    kind = sec.get("kind", "otad")
    if kind not in DEFENSE_KINDS:
        raise ConfigError(f"unknown defense kind {kind!r}")
    embed = _embedder(out_dir, sec)
    k = int(sec.get("K", 10))
    if kind == "frozen-net":
        return NetDefense(net)
    if kind == "knn-mean":
        return KNNMeanDefense(net, atlas, k=k, embed=embed)
    if kind == "otad":
        return OTADDefense(net, atlas, k=k, window=_window_from(sec),
                           embed=embed,
                           on_infeasible=sec.get("on_infeasible", "error"))
    model_path = os.path.join(out_dir, SURROGATE_FILE)
    _require_path(model_path, "surrogate checkpoint (run `surrogate-train` first)")
    model, _ = load_model(model_path)
    return SurrogateDefense(net, atlas, model, embed=embed)


def _write_json(path, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


SUMMARY_COLUMNS = ("dataset", "defense", "attack", "epsilon", "budget",
                   "standard_acc", "robust_acc", "mean_RE", "lipschitz_estimate")


def _write_summary_csv(path, reports: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_COLUMNS)
        for r in reports:
            writer.writerow(["" if r[c] is None else r[c] for c in SUMMARY_COLUMNS])


# --- subcommands ---

def cmd_train(cfg: dict, seed: int, out_dir: str, workers: int) -> int:
    train_ds, _ = build_datasets(cfg, seed)
    net, history = _train_base_net(cfg, train_ds, seed, out_dir)
    atlas = build_atlas(net, train_ds.x, train_ds.y)
    save_model(os.path.join(out_dir, CHECKPOINT_FILE), net)
    save_atlas(os.path.join(out_dir, ATLAS_FILE), atlas)
    defense_sec = _section(cfg, "defense", required=False)
    if defense_sec.get("metric", "euclidean") == "embedded":
        emb = _train_embedding_net(cfg, train_ds, seed)
        save_model(os.path.join(out_dir, EMBEDDING_FILE), emb,
                   kind=KIND_EMBEDDING)
    last = history[-1] if history else {}
    print(f"trained {len(history)} epochs; final loss {last.get('loss', float('nan')):.4f}; "
          f"atlas size {len(atlas)}")
    return 0


def _evaluate_reports(cfg: dict, seed: int, out_dir: str, workers: int) -> list:
    _, test_ds = build_datasets(cfg, seed)
    net, atlas = _load_artifacts(out_dir)
    defense = make_defense(cfg, net, atlas, out_dir)
    esec = _section(cfg, "evaluate", required=False)
    limit = esec.get("test_limit")
    x_test, y_test = test_ds.x, test_ds.y
    if limit is not None:
        x_test, y_test = x_test[:int(limit)], y_test[:int(limit)]
    attack_dicts = cfg.get("attacks") or [{"kind": "none"}]
    if not isinstance(attack_dicts, list):
        raise ConfigError("'attacks' must be a list of attack mappings")
    reports = []
    for i, ad in enumerate(attack_dicts):
        try:
            attack_cfg = AttackConfig.from_dict(ad)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"attacks[{i}]: {exc}") from None
        trace = [] if esec.get("trace") else None
        report = evaluate_defense(
            defense, net, x_test, y_test,
            task=test_ds.task,
            attack=attack_cfg,
            seed=seed,
            workers=workers,
            dataset_name=test_ds.name,
            lipschitz_radius=esec.get("lipschitz_radius"),
            lipschitz_centers=int(esec.get("lipschitz_centers", 10)),
            lipschitz_samples=int(esec.get("lipschitz_samples", 5)),
            error_metric=esec.get("error_metric", "mse"),
            trace=trace,
        )
        reports.append(report)
        name = f"report_{defense.name}_{attack_cfg.kind}_{i}.json"
        _write_json(os.path.join(out_dir, name), report)
        if trace is not None:
            with open(os.path.join(out_dir, f"trace_{i}.jsonl"), "w") as f:
                for qid, rec in enumerate(trace):
                    f.write(json.dumps({"query_id": qid, **rec}, sort_keys=True) + "\n")
    return reports


def cmd_evaluate(cfg: dict, seed: int, out_dir: str, workers: int) -> int:
    reports = _evaluate_reports(cfg, seed, out_dir, workers)
    _write_summary_csv(os.path.join(out_dir, "summary.csv"), reports)
    for r in reports:
        acc = ("standard {0:.3f} robust {1:.3f}".format(r["standard_acc"], r["robust_acc"])
               if r["standard_acc"] is not None else
               "mse clean {0:.4f} adv {1:.4f}".format(r["regression"]["mse"]["clean"],
                                                      r["regression"]["mse"]["adv"]))
        print(f"{r['defense']} vs {r['attack']}: {acc}; mean_RE {r['mean_RE']:.4g}")
    return 0


def cmd_surrogate_train(cfg: dict, seed: int, out_dir: str, workers: int) -> int:
    train_ds, _ = build_datasets(cfg, seed)
    net, atlas = _load_artifacts(out_dir)
    dsec = _section(cfg, "defense", required=False)
    ssec = _section(cfg, "surrogate", required=True)
    defense = OTADDefense(net, atlas, k=int(dsec.get("K", 10)),
                          window=_window_from(dsec),
                          embed=_embedder(out_dir, dsec),
                          on_infeasible=dsec.get("on_infeasible", "error"))
    data = surrogate.build_surrogate_dataset(defense)
    arch = ssec.get("architecture", "single-attention-block")
    mseed = int(ssec.get("rng_seed", seed))
    if arch == "flat-mlp":
        model = surrogate.SurrogateMLP(
            atlas.input_dim, defense.k,
            hidden=tuple(ssec.get("hidden", [128])), seed=mseed)
    elif arch == "single-attention-block":
        model = surrogate.SurrogateAttention(
            atlas.input_dim, defense.k,
            d_model=int(ssec.get("d_model", 64)),
            n_heads=int(ssec.get("n_heads", 4)), seed=mseed)
    else:
        raise ConfigError(f"unknown surrogate architecture {arch!r}")
    history = surrogate.train_surrogate(
        model, data,
        alpha=float(ssec.get("mix_weight", 1.0)),
        epochs=int(ssec.get("epochs", 30)),
        batch_size=int(ssec.get("batch_size", 32)),
        lr=float(ssec.get("learning_rate", 0.01)),
        seed=mseed,
    )
    save_model(os.path.join(out_dir, SURROGATE_FILE), model)
    with open(os.path.join(out_dir, "surrogate_log.jsonl"), "w") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"surrogate ({arch}) trained on {len(data.queries)} samples; "
          f"final loss {history[-1]['loss']:.6f}")
    return 0


def cmd_sweep(cfg: dict, seed: int, out_dir: str, workers: int) -> int:
    """Full pipeline per axis value, one aggregate CSV.

    Axes: L_minus_l rewrites defense.L = defense.l + value; class_std rewrites
    dataset.class_std (synthetic only); alpha_mix rewrites
    surrogate.mix_weight and retrains the surrogate. Each value runs in its
    own subdirectory; the sweep row uses the value's FIRST configured attack.
    """
    sec = _section(cfg, "sweep", required=True)
    axis = sec.get("axis")
    values = sec.get("values")
    if axis not in ("L_minus_l", "class_std", "alpha_mix"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not isinstance(values, list) or not values:
        raise ConfigError("sweep.values must be a nonempty list")

    rows = []
    for value in values:
        sub = copy.deepcopy(cfg)
        if axis == "L_minus_l":
            dsec = sub.setdefault("defense", {})
            dsec["L"] = float(dsec.get("l", 0.0)) + float(value)
        elif axis == "class_std":
            if sub.get("dataset", {}).get("source", "synthetic") != "synthetic":
                raise ConfigError("class_std sweep needs a synthetic dataset")
            sub.setdefault("dataset", {})["class_std"] = float(value)
        else:
            sub.setdefault("surrogate", {})["mix_weight"] = float(value)
        sub_dir = os.path.join(out_dir, f"{axis}_{value:g}")
        os.makedirs(sub_dir, exist_ok=True)
        cmd_train(sub, seed, sub_dir, workers)
        needs_surrogate = (axis == "alpha_mix"
                           or sub.get("defense", {}).get("kind") == "otad-surrogate")
        if needs_surrogate:
            cmd_surrogate_train(sub, seed, sub_dir, workers)
        reports = _evaluate_reports(sub, seed, sub_dir, workers)
        _write_summary_csv(os.path.join(sub_dir, "summary.csv"), reports)
        first = reports[0]
        rows.append([value, first["standard_acc"], first["robust_acc"],
                     first["mean_RE"], first["lipschitz_estimate"]])

    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["axis_value", "standard_acc", "robust_acc",
                         "mean_RE", "lipschitz_estimate"])
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    print(f"sweep over {axis}: {len(rows)} values -> sweep.csv")
    return 0


def cmd_certify_attention(cfg: dict, seed: int, out_dir: str, workers: int) -> int:
    sec = _section(cfg, "attention", required=True)
    n_tokens = int(sec.get("n_tokens", 4))
    d_model = int(sec.get("d_model", 16))
    n_heads = int(sec.get("n_heads", 2))
    m_theta = float(sec.get("param_bound", 1.0))
    m_input = float(sec.get("input_bound", 1.0))
    trials = int(sec.get("trials", 100))
    rng = np.random.default_rng(int(sec.get("rng_seed", seed)))
    results = []
    for t in range(trials):
        spec = attention.random_attention_spec(rng, n_tokens, d_model, n_heads,
                                               m_theta, m_input)
        results.append(attention.certify(
            spec, n_starts=int(sec.get("n_starts", 2)),
            iters=int(sec.get("iters", 20)), seed=seed + t))
    payload = {
        "trials": results,
        "n_passed": sum(r["passed"] for r in results),
        "n_trials": trials,
        "all_passed": all(r["passed"] for r in results),
        "worst_margin": min((r["margin"] for r in results), default=None),
    }
    _write_json(os.path.join(out_dir, "certify.json"), payload)
    print(f"attention certification: {payload['n_passed']}/{trials} within bound")
    return 0 if payload["all_passed"] else 4


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "certify-attention": cmd_certify_attention,
    "surrogate-train": cmd_surrogate_train,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="otrobust",
        description="Robust inference by convex interpolation of learned transport maps")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML config path")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--workers", type=int, default=None,
                        help="parallel attack workers")
    parser.add_argument("--out", default=None, help="output directory override")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out_dir = args.out if args.out is not None else cfg.get("out", ".")
        workers = args.workers if args.workers is not None else int(cfg.get("workers", 1))
        os.makedirs(out_dir, exist_ok=True)
        return COMMANDS[args.command](cfg, seed, out_dir, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (TrainingError, SolverError, InferenceError, WindowError,
            UndefinedValueError, ShapeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except OtrobustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
