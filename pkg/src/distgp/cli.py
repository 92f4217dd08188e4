"""Command-line interface.

Subcommands: train, eval, ood, audit, collapse-check. Every command
reads a JSON run config (validated against a closed schema), writes
delimited outputs plus figures under --out, and exits 0 on success,
2 on config errors, 3 on numerical failures, 4 on file-format errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import jsonschema
import numpy as np

from . import report
from .audits import audit_network
from .data import gen_banana, gen_toy_regression, load_idx_dir
from .errors import ConfigError, IOFormatError, NumericalError
from .layers import collapse_check
from .network import Network, load_network, save_network, validate_network_spec
from .ood import (auc, flag_rate, map_batches, ood_scores, rotation_sweep,
                  threshold_at_fpr)
from .training import (DirichletClassificationModel, RegressionModel,
                       TrainConfig, init_model, train)

_RANGE_2 = {"type": "array", "items": {"type": "number"},
            "minItems": 2, "maxItems": 2}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "model"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["toy_regression", "banana", "idx_dir"]},
                "n_train": {"type": "integer", "minimum": 1},
                "n_test": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "noise_sd": {"type": "number", "exclusiveMinimum": 0},
                "gap": _RANGE_2,
                "domain": _RANGE_2,
                "dir": {"type": "string"},
                "limit_train": {"type": "integer", "minimum": 1},
                "limit_test": {"type": "integer", "minimum": 1},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["network", "likelihood"],
            "properties": {
                "network": {"type": "object"},
                "likelihood": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": ["gaussian", "dirichlet"]},
                        "noise_variance": {"type": "number",
                                           "exclusiveMinimum": 0},
                        "n_classes": {"type": "integer", "minimum": 2},
                        "alpha_eps": {"type": "number"},
                    },
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "batch_size": {"type": ["integer", "null"], "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "clip_norm": {"type": "number", "minimum": 0},
                "log_every": {"type": "integer", "minimum": 1},
                "warmup_points": {"type": "integer", "minimum": 1},
            },
        },
        "predict": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_samples": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
            },
        },
    },
}

DEFAULT_TRAIN = {"steps": 100, "batch_size": None, "learning_rate": 1e-3,
                 "clip_norm": 10.0, "log_every": 1, "warmup_points": 256}
DEFAULT_PREDICT = {"n_samples": 256, "batch_size": 512}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config rejected: {exc.message} "
                          f"(at {'/'.join(map(str, exc.absolute_path)) or 'root'})") from exc
    validate_network_spec(cfg["model"]["network"])
    cfg.setdefault("seed", 0)
    cfg["train"] = {**DEFAULT_TRAIN, **cfg.get("train", {})}
    cfg["predict"] = {**DEFAULT_PREDICT, **cfg.get("predict", {})}
    return cfg


def load_dataset(cfg: dict) -> dict:
    d = cfg["data"]
    kind = d["kind"]
    seed = d.get("seed", cfg["seed"])
    if kind == "toy_regression":
        kw = {k: tuple(d[k]) for k in ("gap", "domain") if k in d}
        if "noise_sd" in d:
            kw["noise_sd"] = d["noise_sd"]
        n_test = d.get("n_test", 0)
        x, y = gen_toy_regression(d.get("n_train", 100), seed, **kw)
        xt, yt = gen_toy_regression(n_test, seed + 1, **kw) if n_test else (None, None)
        return {"task": "regression", "x_train": x, "y_train": y,
                "x_test": xt, "y_test": yt}
    if kind == "banana":
        n_test = d.get("n_test", 0)
        kw = {"noise_sd": d["noise_sd"]} if "noise_sd" in d else {}
        x, y = gen_banana(d.get("n_train", 100), seed, **kw)
        xt, yt = gen_banana(n_test, seed + 1, **kw) if n_test else (None, None)
        return {"task": "classification", "n_classes": 2, "x_train": x,
                "y_train": y, "x_test": xt, "y_test": yt}
    if "dir" not in d:
        raise ConfigError("idx_dir data needs a 'dir' entry")
    arrays = load_idx_dir(d["dir"])
    x, y = arrays["train_images"], arrays["train_labels"]
    xt, yt = arrays["test_images"], arrays["test_labels"]
    if "limit_train" in d:
        x, y = x[: d["limit_train"]], y[: d["limit_train"]]
    if "limit_test" in d:
        xt, yt = xt[: d["limit_test"]], yt[: d["limit_test"]]
    return {"task": "classification", "n_classes": int(y.max()) + 1,
            "x_train": x, "y_train": y, "x_test": xt, "y_test": yt}


def build_model(cfg: dict, network: Network, data: dict):
    lk = cfg["model"]["likelihood"]
    if lk["kind"] == "gaussian":
        if data["task"] != "regression":
            raise ConfigError("gaussian likelihood needs regression data")
        return RegressionModel(network, lk.get("noise_variance", 0.1))
    if data["task"] != "classification":
        raise ConfigError("dirichlet likelihood needs labeled data")
    n_classes = lk.get("n_classes", data.get("n_classes"))
    if n_classes is None:
        raise ConfigError("dirichlet likelihood needs n_classes")
    return DirichletClassificationModel(network, n_classes,
                                        alpha_eps=lk.get("alpha_eps", 0.01))


def _outdir(args) -> str:
    os.makedirs(os.path.join(args.out, "figures"), exist_ok=True)
    return args.out


def _write_csv(path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _load_model_for(args, cfg: dict, data: dict):
    network = load_network(args.model)
    return build_model(cfg, network, data)


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(args)
    data = load_dataset(cfg)
    network = Network(cfg["model"]["network"], seed=cfg["seed"])
    init_model(network, data["x_train"], seed=cfg["seed"],
               warmup_points=cfg["train"]["warmup_points"])
    model = build_model(cfg, network, data)
    tc = TrainConfig(steps=cfg["train"]["steps"],
                     batch_size=cfg["train"]["batch_size"],
                     learning_rate=cfg["train"]["learning_rate"],
                     clip_norm=cfg["train"]["clip_norm"],
                     seed=cfg["seed"], log_every=cfg["train"]["log_every"])
    t0 = time.perf_counter()
    result = train(model, data["x_train"], data["y_train"], tc,
                   metrics_path=os.path.join(out, "metrics.jsonl"))
    wall = time.perf_counter() - t0

    save_network(os.path.join(out, "model.dgpn"), network)
    with open(os.path.join(out, "resolved_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    _write_csv(os.path.join(out, "train_summary.csv"),
               ["steps_run", "final_elbo", "rolled_back", "wallclock_s"],
               [{"steps_run": result.steps_run,
                 "final_elbo": result.final_elbo,
                 "rolled_back": result.rolled_back,
                 "wallclock_s": round(wall, 3)}])
    if result.history:
        report.plot_training_curve(
            result.history, os.path.join(out, "figures", "training_curve.png"))
    if data["task"] == "regression" and data["x_train"].shape[1] == 1:
        lo = float(data["x_train"].min()) - 1.0
        hi = float(data["x_train"].max()) + 1.0
        grid = np.linspace(lo, hi, 200)[:, None]
        pred = model.predict(grid)
        report.plot_regression_band(
            data["x_train"], data["y_train"], grid, pred["mean"], pred["var"],
            pred["vh"], os.path.join(out, "figures", "predictive_band.png"))
    print(f"trained {result.steps_run} steps, final bound "
          f"{result.final_elbo:.4f}, model at {out}/model.dgpn")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(args)
    data = load_dataset(cfg)
    model = _load_model_for(args, cfg, data)
    x = data["x_test"] if data["x_test"] is not None else data["x_train"]
    y = data["y_test"] if data["y_test"] is not None else data["y_train"]
    bs = cfg["predict"]["batch_size"]

    if data["task"] == "regression":
        parts = map_batches(model.predict, np.asarray(x), bs, args.threads)
        mean = np.concatenate([p["mean"] for p in parts])
        var = np.concatenate([p["var"] for p in parts])
        vh = np.concatenate([p["vh"] for p in parts])
        rows = [{"index": i, "target": float(np.ravel(y[i])[0]),
                 "mean": float(mean[i, 0]), "var": float(var[i, 0]),
                 "vh": float(vh[i, 0])} for i in range(len(mean))]
        _write_csv(os.path.join(out, "eval.csv"),
                   ["index", "target", "mean", "var", "vh"], rows)
        rmse = float(np.sqrt(np.mean((mean[:, 0] - np.ravel(y)) ** 2)))
        metrics = {"rmse": rmse, "mean_vh": float(vh.mean()),
                   "noise_variance": model.noise_variance()}
        if x.shape[1] == 1:
            report.plot_regression_band(
                x, y, x, mean, var, vh,
                os.path.join(out, "figures", "predictive_band.png"))
    else:
        scores = ood_scores(model, np.asarray(x), seed=cfg["seed"],
                            n_samples=cfg["predict"]["n_samples"],
                            batch_size=bs, threads=args.threads)
        probs = scores["probs"]
        pred_label = probs.argmax(axis=1)
        labels = np.asarray(y).ravel()
        fields = ["index", "label", "prediction", "correct", "entropy", "vh"]
        fields += [f"p{c}" for c in range(probs.shape[1])]
        rows = []
        for i in range(len(labels)):
            row = {"index": i, "label": int(labels[i]),
                   "prediction": int(pred_label[i]),
                   "correct": int(pred_label[i] == labels[i]),
                   "entropy": float(scores["entropy"][i]),
                   "vh": float(scores["vh"][i])}
            row.update({f"p{c}": float(probs[i, c]) for c in range(probs.shape[1])})
            rows.append(row)
        _write_csv(os.path.join(out, "eval.csv"), fields, rows)
        metrics = {"accuracy": float(np.mean(pred_label == labels)),
                   "mean_entropy": float(scores["entropy"].mean()),
                   "mean_vh": float(scores["vh"].mean())}
    with open(os.path.join(out, "eval_metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    print(" ".join(f"{k}={v:.5g}" for k, v in sorted(metrics.items())))
    return 0


def cmd_ood(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(args)
    data = load_dataset(cfg)
    model = _load_model_for(args, cfg, data)
    x = data["x_test"] if data["x_test"] is not None else data["x_train"]
    fprs = [float(f) for f in args.fpr.split(",")]
    scores = ood_scores(model, np.asarray(x), seed=cfg["seed"],
                        n_samples=cfg["predict"]["n_samples"],
                        batch_size=cfg["predict"]["batch_size"],
                        threads=args.threads)
    vh = scores["vh"]
    thresholds = {f: threshold_at_fpr(vh, f) for f in fprs}
    fields = ["index", "vh"] + [f"flag_fpr_{f}" for f in fprs]
    rows = []
    for i in range(len(vh)):
        row = {"index": i, "vh": float(vh[i])}
        row.update({f"flag_fpr_{f}": int(vh[i] > thresholds[f]) for f in fprs})
        rows.append(row)
    _write_csv(os.path.join(out, "scores.csv"), fields, rows)
    summary = {"thresholds": {str(f): thresholds[f] for f in fprs},
               "flag_rates": {str(f): flag_rate(vh, thresholds[f]) for f in fprs}}

    if np.asarray(x).ndim >= 3:  # image data: rotation sweep
        angles = [float(a) for a in args.angles.split(",")]
        limit = min(len(x), args.rotation_limit)
        sweep = rotation_sweep(model, np.asarray(x)[:limit], angles,
                               seed=cfg["seed"],
                               n_samples=cfg["predict"]["n_samples"],
                               batch_size=cfg["predict"]["batch_size"],
                               threads=args.threads)
        clean = sweep[0]
        rot_rows = []
        for rec in sweep:
            row = {"angle": rec["angle"], "mean_vh": rec["mean_vh"],
                   "auc_vh": auc(clean["vh"], rec["vh"])}
            if "mean_entropy" in rec:
                row["mean_entropy"] = rec["mean_entropy"]
                row["auc_entropy"] = auc(clean["entropy"], rec["entropy"])
            rot_rows.append(row)
        _write_csv(os.path.join(out, "rotation.csv"),
                   list(rot_rows[0].keys()), rot_rows)
        report.plot_rotation_entropy(
            sweep, os.path.join(out, "figures", "rotation_sweep.png"))
        far = max(sweep[1:], key=lambda r: abs(r["angle"])) if len(sweep) > 1 else None
        if far is not None:
            report.plot_score_histograms(
                clean["vh"], far["vh"], thresholds[fprs[0]],
                os.path.join(out, "figures", "score_hist.png"))
        summary["rotation"] = rot_rows
    else:
        report.plot_score_histograms(
            vh, vh, thresholds[fprs[0]],
            os.path.join(out, "figures", "score_hist.png"))
    with open(os.path.join(out, "ood_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(" ".join(f"thr@{f}={thresholds[f]:.5g}" for f in fprs))
    return 0


def cmd_audit(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(args)
    data = load_dataset(cfg)
    model = _load_model_for(args, cfg, data)
    x = np.asarray(data["x_train"])[: args.audit_points]
    results = audit_network(model.network, x,
                            n_pairs_affine=args.pairs_affine,
                            n_pairs_activation=args.pairs_activation,
                            seed=cfg["seed"])
    rows = [r.row() for r in results]
    _write_csv(os.path.join(out, "audit.csv"),
               ["layer", "kind", "bound", "pairs", "violations", "max_ratio"],
               rows)
    report.plot_layer_bounds(
        model.network.lipschitz_report(),
        os.path.join(out, "figures", "layer_bounds.png"))
    total = sum(r.n_violations for r in results)
    pairs = sum(r.n_pairs for r in results)
    print(f"audited {len(results)} layers, {pairs} pairs, {total} violations")
    return 0


def cmd_collapse_check(args) -> int:
    network = load_network(args.model)
    out = _outdir(args)
    rep = collapse_check(network)
    rows = []
    for entry in rep["layers"]:
        rows.append({"affine": entry["affine"], "feeds": entry["feeds"],
                     "fan_out": entry["fan_out"],
                     "consumed_channels": entry["consumed_channels"],
                     "wt_inner": entry["wt_inner"],
                     "statement_lhs": entry["statement_lhs"],
                     "remark_lhs": entry["remark_lhs"]})
    _write_csv(os.path.join(out, "collapse.csv"),
               ["affine", "feeds", "fan_out", "consumed_channels", "wt_inner",
                "statement_lhs", "remark_lhs"], rows)
    with open(os.path.join(out, "collapse.json"), "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True, default=float)
    for form in ("statement", "remark"):
        verdict = rep[form]["verdict"]
        text = {True: "collapse-prone (all bounds hold)",
                False: "not collapse-prone (a bound fails)",
                None: "no affine operators to check"}[verdict]
        print(f"{form} form: {text}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distgp",
        description="Distributional sparse-GP networks: train, evaluate, "
                    "score OOD, and audit Lipschitz bounds.")
    default_threads = int(os.environ.get("DISTGP_THREADS", "1"))
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=default_threads,
                       help="prediction thread count (DISTGP_THREADS)")
        if model:
            p.add_argument("--model", required=True, help="model file")

    p = sub.add_parser("train", help="fit a model and save it")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved model on the test split")
    common(p, model=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ood", help="OOD scores, thresholds, rotation sweep")
    common(p, model=True)
    p.add_argument("--fpr", default="0.01,0.05",
                   help="comma-separated target false-positive rates")
    p.add_argument("--angles", default="0,15,30,45,60,90,120,150,180",
                   help="rotation sweep angles (image data)")
    p.add_argument("--rotation-limit", type=int, default=512,
                   help="max images per rotation angle")
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("audit", help="empirical Lipschitz audits")
    common(p, model=True)
    p.add_argument("--pairs-affine", type=int, default=10000)
    p.add_argument("--pairs-activation", type=int, default=1000)
    p.add_argument("--audit-points", type=int, default=512,
                   help="training points pushed through the network")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("collapse-check", help="small-weight inequality report")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_collapse_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (IOFormatError, OSError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
