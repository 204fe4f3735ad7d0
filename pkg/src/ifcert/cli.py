"""Command-line surface: data ingestion, metric learning, certification,
training and evaluation. Results go to stdout as JSON; logs go to stderr."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .certify import certify_network
from .metric import learn_mahalanobis, load_metric, save_metric
from .model import (Feature, FeatureSchema, ModelError, NeuralNet, load_model,
                    load_schema, save_model, save_schema)
from .solve import CertificationResult, SolveConfig, SolveStatus
from .train import (Activation, LossKind, TrainConfig, init_network, train_fair,
                    train_standard)

__all__ = ["Dataset", "EvalReport", "ingest_csv", "evaluate", "main"]

_MISSING = ("", "?", "na", "n/a", "nan")


class DataError(ValueError):
    """Raised for malformed CSV data or schema mismatches."""


@dataclass
class Dataset:
    """Preprocessed feature matrix with its expanded schema and labels."""

    X: np.ndarray
    y: np.ndarray
    schema: FeatureSchema
    label_name: str
    label_levels: tuple[str, ...] | None = None


def _read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: missing header row")
        header = [h.strip() for h in reader.fieldnames]
        rows = [{k.strip(): (v or "").strip() for k, v in row.items()} for row in reader]
    if not rows:
        raise DataError(f"{path}: no data rows")
    return header, rows


def _is_missing(value: str) -> bool:
    return value.lower() in _MISSING


def _load_raw_schema(schema_path) -> dict:
    with open(schema_path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def ingest_csv(path, schema_path) -> Dataset:
    """Load a CSV per its schema file.

    A raw schema ({"label": ..., "features": [{"name", "type", "sensitive"}]})
    fits the transform from the data: features with missing values are
    dropped, continuous columns min-max normalised, categoricals one-hot
    encoded. An expanded schema (as written next to trained models) applies
    the already-fitted transform instead, so new data lines up column-wise.
    """
    obj = _load_raw_schema(schema_path)
    if "label" in obj and obj.get("features") and "type" in obj["features"][0]:
        return _ingest_fit(path, obj)
    schema = load_schema(schema_path)
    label = obj.get("label", "label")
    levels = tuple(obj["label_levels"]) if obj.get("label_levels") else None
    return _ingest_apply(path, schema, label, levels)


def _parse_label(values: list[str], name: str) -> tuple[np.ndarray, tuple[str, ...] | None]:
    try:
        return np.array([float(v) for v in values]), None
    except ValueError:
        pass
    levels = sorted(set(values))
    if len(levels) != 2:
        raise DataError(f"label column {name!r} must be numeric or binary, got levels {levels}")
    return np.array([float(levels.index(v)) for v in values]), tuple(levels)


def _ingest_fit(path, raw: dict) -> Dataset:
    header, rows = _read_csv(path)
    label_name = raw["label"]
    if label_name not in header:
        raise DataError(f"label column {label_name!r} not in CSV header")
    feats_spec = raw["features"]
    for f in feats_spec:
        if f["name"] not in header:
            raise DataError(f"schema column {f['name']!r} not in CSV header")

    columns: list[np.ndarray] = []
    features: list[Feature] = []
    for f in feats_spec:
        name, kind = f["name"], f["type"]
        sensitive = bool(f.get("sensitive", False))
        values = [row[name] for row in rows]
        if any(_is_missing(v) for v in values):
            print(f"ingest: dropping column {name!r} (missing values)", file=sys.stderr)
            continue
        if kind == "continuous":
            try:
                col = np.array([float(v) for v in values])
            except ValueError:
                bad = next(i for i, v in enumerate(values) if not _is_float(v))
                raise DataError(
                    f"column {name!r}: non-numeric value {values[bad]!r} at row {bad}")
            lo, hi = float(col.min()), float(col.max())
            norm = (col - lo) / (hi - lo) if hi > lo else np.zeros_like(col)
            columns.append(norm)
            features.append(Feature(name=name, kind="continuous", sensitive=sensitive,
                                    lo=lo, hi=hi))
        elif kind == "categorical":
            levels = sorted(set(values))
            if len(levels) < 2:
                print(f"ingest: dropping column {name!r} (single level)", file=sys.stderr)
                continue
            for level in levels:
                columns.append(np.array([1.0 if v == level else 0.0 for v in values]))
                features.append(Feature(name=f"{name}={level}", kind="categorical_member",
                                        sensitive=sensitive, group=name))
        else:
            raise DataError(f"column {name!r}: unknown type {kind!r}")
    if not features:
        raise DataError("no usable feature columns after ingestion")
    y, levels = _parse_label([row[label_name] for row in rows], label_name)
    schema = FeatureSchema(features=tuple(features))
    return Dataset(X=np.column_stack(columns), y=y, schema=schema,
                   label_name=label_name, label_levels=levels)


def _is_float(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def _ingest_apply(path, schema: FeatureSchema, label_name: str,
                  levels: tuple[str, ...] | None) -> Dataset:
    header, rows = _read_csv(path)
    n = schema.dim
    X = np.zeros((len(rows), n))
    groups = schema.groups()
    member_cols = {i for idx in groups.values() for i in idx}
    for j, feat in enumerate(schema.features):
        if feat.kind == "continuous":
            if feat.name not in header:
                raise DataError(f"column {feat.name!r} not in CSV header")
            for r, row in enumerate(rows):
                v = row[feat.name]
                if not _is_float(v):
                    raise DataError(f"column {feat.name!r}: non-numeric {v!r} at row {r}")
                span = feat.hi - feat.lo
                X[r, j] = (float(v) - feat.lo) / span if span > 0 else 0.0
            X[:, j] = np.clip(X[:, j], 0.0, 1.0)
    for gid, idx in groups.items():
        if gid not in header:
            raise DataError(f"categorical column {gid!r} not in CSV header")
        level_of = {schema.features[i].name.split("=", 1)[1]: i for i in idx}
        for r, row in enumerate(rows):
            v = row[gid]
            if v not in level_of:
                raise DataError(f"column {gid!r}: unknown level {v!r} at row {r}")
            X[r, level_of[v]] = 1.0
    if label_name not in header:
        raise DataError(f"label column {label_name!r} not in CSV header")
    raw_labels = [row[label_name] for row in rows]
    if levels is not None:
        for r, v in enumerate(raw_labels):
            if v not in levels:
                raise DataError(f"label: unknown level {v!r} at row {r}")
        y = np.array([float(levels.index(v)) for v in raw_labels])
    else:
        y, levels = _parse_label(raw_labels, label_name)
    _ = member_cols
    return Dataset(X=X, y=y, schema=schema, label_name=label_name, label_levels=levels)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    accuracy: float
    balanced_accuracy: float
    eod: float | None
    delta_certified: dict | None = None

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "eod": self.eod,
            "delta_certified": self.delta_certified,
        }


def _rate(mask_num: np.ndarray, mask_den: np.ndarray) -> float | None:
    den = int(mask_den.sum())
    return float((mask_num & mask_den).sum()) / den if den else None


def evaluate(net: NeuralNet, dataset: Dataset, threshold: float = 0.5) -> EvalReport:
    """Accuracy, balanced accuracy (mean per-class recall) and Equalized Odds
    Difference over the first declared sensitive categorical group."""
    preds = net.apply_batch(dataset.X)[:, 0]
    yhat = preds >= threshold
    y = dataset.y >= 0.5

    accuracy = float((yhat == y).mean())
    recalls = []
    for cls in (False, True):
        den = int((y == cls).sum())
        if den:
            recalls.append(float(((yhat == cls) & (y == cls)).sum()) / den)
    balanced = float(np.mean(recalls)) if recalls else 0.0

    eod = None
    groups = dataset.schema.groups()
    sens_group = None
    for gid, idx in groups.items():
        if any(dataset.schema.features[i].sensitive for i in idx):
            sens_group = idx
            break
    if sens_group is not None:
        member = np.argmax(dataset.X[:, sens_group], axis=1)
        tprs, fprs = [], []
        for g in range(len(sens_group)):
            in_g = member == g
            tpr = _rate(yhat, y & in_g)
            fpr = _rate(yhat, ~y & in_g)
            if tpr is not None:
                tprs.append(tpr)
            if fpr is not None:
                fprs.append(fpr)
        spreads = []
        if len(tprs) >= 2:
            spreads.append(max(tprs) - min(tprs))
        if len(fprs) >= 2:
            spreads.append(max(fprs) - min(fprs))
        if spreads:
            eod = float(max(spreads))
    return EvalReport(accuracy=accuracy, balanced_accuracy=balanced, eod=eod)


# ---------------------------------------------------------------------------
# Subcommands


def _json_out(obj) -> None:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.ndarray):
            return [clean(float(x)) for x in v]
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v

    print(json.dumps(clean(obj)))


def _result_json(result: CertificationResult, schema: FeatureSchema | None,
                 eps: float, tau: float, grid_m: int) -> dict:
    witness = None
    if result.witness is not None:
        x1, x2, delta = result.witness
        witness = {
            "x_prime": x1.tolist(),
            "x_dprime": x2.tolist(),
            "delta_recomputed": delta,
        }
        if schema is not None:
            witness["x_prime_denormalized"] = schema.denormalize(x1).tolist()
            witness["x_dprime_denormalized"] = schema.denormalize(x2).tolist()
    return {
        "delta_lower": result.delta_lower,
        "delta_upper": result.delta_upper,
        "status": result.status.value,
        "witness": witness,
        "nodes": result.nodes_explored,
        "wall_time": result.wall_time,
        "eps": eps,
        "tau": tau,
        "grid_m": grid_m,
    }


def _certify_common(net, metric, schema, args) -> tuple[dict, int]:
    cfg = SolveConfig(gap_tol=args.tau, time_cutoff_secs=args.cutoff,
                      node_limit=args.node_limit, rng_seed=args.seed)
    on_progress = None
    if args.progress:
        t0 = time.monotonic()

        def on_progress(dl, du, nodes):
            rec = {"t": time.monotonic() - t0,
                   "delta_lower": None if not math.isfinite(dl) else dl,
                   "delta_upper": None if not math.isfinite(du) else du,
                   "nodes": nodes}
            print(json.dumps(rec), file=sys.stderr, flush=True)

    result = certify_network(net, metric, args.eps, schema=schema,
                             grid_m=args.grid_m, cfg=cfg, on_progress=on_progress)
    out = _result_json(result, schema, args.eps, args.tau, args.grid_m)
    code = 0 if result.status is SolveStatus.CONVERGED else 2
    return out, code


def cmd_certify(args) -> int:
    net = load_model(args.model)
    metric = load_metric(args.metric)
    schema = load_schema(args.schema) if args.schema else None
    out, code = _certify_common(net, metric, schema, args)
    _json_out(out)
    return code


def cmd_learn_metric(args) -> int:
    ds = ingest_csv(args.data, args.schema)
    metric = learn_mahalanobis(ds.X, ds.schema)
    save_metric(metric, args.out)
    if args.out_schema:
        _write_expanded_schema(ds, args.out_schema)
    _json_out({"metric": str(args.out), "dim": metric.dim,
               "features": [f.name for f in ds.schema.features]})
    return 0


def _write_expanded_schema(ds: Dataset, path) -> None:
    save_schema(ds.schema, path)
    # Append label info so eval can re-apply the transform to fresh CSVs.
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    obj["label"] = ds.label_name
    if ds.label_levels:
        obj["label_levels"] = list(ds.label_levels)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def _split(ds: Dataset, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.X.shape[0])
    n_test = int(round(0.2 * ds.X.shape[0]))
    return perm[n_test:], perm[:n_test]


def cmd_train(args) -> int:
    ds = ingest_csv(args.data, args.schema)
    train_idx, test_idx = _split(ds, args.seed)
    X_tr, y_tr = ds.X[train_idx], ds.y[train_idx]

    dims = [ds.schema.dim] + args.hidden + [1]
    acts = [Activation.RELU] * len(args.hidden) + [Activation.SIGMOID]
    net0 = init_network(dims, acts, seed=args.seed)

    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def on_epoch(rec: dict) -> None:
        line = json.dumps(rec)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()
        print(line, file=sys.stderr)

    cfg = TrainConfig(
        learning_rate=args.lr, l2_reg=args.l2, n_epoch=args.epochs,
        n_batch=args.batch_size, eps=args.eps, loss_kind=LossKind.BCE,
        solve_cfg=SolveConfig(gap_tol=args.tau, time_cutoff_secs=args.solve_cutoff),
        grid_m=args.grid_m, rng_seed=args.seed,
    )
    try:
        if args.mode == "fair":
            if not args.metric:
                raise DataError("fair mode needs --metric (run `ifcert learn-metric` first)")
            metric = load_metric(args.metric)
            net = train_fair(net0, (X_tr, y_tr), metric, cfg, schema=ds.schema,
                             on_epoch=on_epoch)
        else:
            net = train_standard(net0, (X_tr, y_tr), cfg, drop_sensitive=True,
                                 schema=ds.schema, on_epoch=on_epoch)
    finally:
        if log_fh:
            log_fh.close()

    save_model(net, args.out)
    if args.out_schema:
        _write_expanded_schema(ds, args.out_schema)

    test_ds = Dataset(X=ds.X[test_idx], y=ds.y[test_idx], schema=ds.schema,
                      label_name=ds.label_name, label_levels=ds.label_levels)
    train_ds = Dataset(X=X_tr, y=y_tr, schema=ds.schema,
                       label_name=ds.label_name, label_levels=ds.label_levels)
    out = {
        "model": str(args.out),
        "mode": args.mode,
        "train": evaluate(net, train_ds).to_json(),
        "test": evaluate(net, test_ds).to_json(),
    }
    _json_out(out)
    return 0


def cmd_eval(args) -> int:
    net = load_model(args.model)
    ds = ingest_csv(args.data, args.schema)
    report = evaluate(net, ds)
    if args.metric:
        metric = load_metric(args.metric)
        out, _ = _certify_common(net, metric, ds.schema, args)
        report.delta_certified = {k: out[k] for k in
                                  ("delta_lower", "delta_upper", "status", "nodes")}
    _json_out(report.to_json())
    return 0


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eps", type=float, default=0.2, help="similarity threshold")
    p.add_argument("--tau", type=float, default=1e-5, help="solver gap tolerance")
    p.add_argument("--cutoff", type=float, default=180.0, help="time cutoff (seconds)")
    p.add_argument("--grid-m", type=int, default=32, dest="grid_m",
                   help="PWL grid cells for smooth activations")
    p.add_argument("--node-limit", type=int, default=10_000_000, dest="node_limit")
    p.add_argument("--progress", action="store_true",
                   help="stream JSONL bound improvements to stderr")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifcert",
                                     description="Certified individual fairness for "
                                                 "fully-connected networks")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("certify", help="certify a trained model")
    c.add_argument("--model", required=True)
    c.add_argument("--metric", required=True)
    c.add_argument("--schema")
    _add_solver_flags(c)
    c.set_defaults(func=cmd_certify)

    t = sub.add_parser("train", help="train a model (fair or FTU)")
    t.add_argument("--data", required=True)
    t.add_argument("--schema", required=True)
    t.add_argument("--mode", choices=("fair", "ftu"), default="fair")
    t.add_argument("--metric")
    t.add_argument("--out", default="model.json")
    t.add_argument("--out-schema", dest="out_schema")
    t.add_argument("--log")
    t.add_argument("--hidden", type=int, nargs="*", default=[8])
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--l2", type=float, default=1e-4)
    t.add_argument("--eps", type=float, default=0.2)
    t.add_argument("--tau", type=float, default=1e-5)
    t.add_argument("--solve-cutoff", type=float, default=5.0, dest="solve_cutoff")
    t.add_argument("--grid-m", type=int, default=32, dest="grid_m")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("learn-metric", help="learn a Mahalanobis metric from data")
    m.add_argument("--data", required=True)
    m.add_argument("--schema", required=True)
    m.add_argument("--out", default="metric.json")
    m.add_argument("--out-schema", dest="out_schema")
    m.set_defaults(func=cmd_learn_metric)

    e = sub.add_parser("eval", help="evaluate a model on data")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--metric")
    _add_solver_flags(e)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ModelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
