"""Command-line entry point.

Exit codes: 0 on success, 1 on runtime errors (bad data, bad model file,
numeric failure), 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import datasets as ds
from . import metrics, persist
from .codebook import hard_assignments
from .model import TrainingError, distances, score, train
from .rdfc import ConvergenceError, blahut_arimoto

MODEL_NAME = "model.dabk"


class UsageError(Exception):
    pass


# helpers ----------------------------------------------------------------------


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _header(path) -> list[str]:
    with Path(path).open(newline="") as fh:
        try:
            return [h.strip() for h in next(csv.reader(fh))]
        except StopIteration:
            raise ds.DataError(f"{path}: empty file") from None


def _read_inputs(path, model, need_labels=False):
    """Features (normalized like the training data) and targets if present."""
    has_y = "y" in _header(path)
    if need_labels and not has_y:
        raise ds.DataError(f"{path}: needs a 'y' column with labels")
    data = ds.load_csv(path, target="y" if has_y else None)
    if data.width != model.input_dim:
        raise ds.DataError(f"{path}: model expects {model.input_dim} feature columns, "
                           f"file has {data.width}")
    feats = data.features
    if model.normalization is not None:
        feats = model.normalization.apply(feats)
    return feats, data.targets, data.features


def _build_data(run: cfgmod.RunConfig):
    """(train, test or None, ood or None) as described by the config."""
    data_spec, model_cfg = run.data, run.model
    seed = model_cfg.seed if data_spec.seed is None else data_spec.seed
    params = dict(data_spec.params or {})
    try:
        if data_spec.generator == "cubic":
            train_set, test_set = ds.gen_cubic(seed, **params)
            return train_set, test_set, None
        if data_spec.generator == "two-clusters":
            train_set, test_set = ds.gen_two_clusters(seed, **params)
            return train_set, test_set, None
        if data_spec.generator == "blobs":
            return ds.gen_blobs(seed, **params)
    except TypeError as exc:
        raise UsageError(f"data.params: {exc}") from exc
    nc = model_cfg.num_classes if model_cfg.task == "classification" else None
    train_set = ds.load_csv(data_spec.train_csv, data_spec.target, data_spec.normalize, nc)
    test_set = None
    if data_spec.test_csv:
        test_set = ds.load_csv(data_spec.test_csv, data_spec.target, data_spec.normalize, nc,
                               stats=train_set.normalization)
    return train_set, test_set, None


def _resolve_run(args) -> cfgmod.RunConfig:
    if (args.config is None) == (args.preset is None):
        raise UsageError("give exactly one of a config file or --preset")
    raw = cfgmod.preset_raw(args.preset) if args.preset else cfgmod.load_raw(args.config)
    overrides = list(args.set or [])
    for flag, key in (("train_csv", "data.train_csv"), ("test_csv", "data.test_csv"),
                      ("seed", "seed"), ("epochs", "epochs"), ("out", "output_dir")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
    if args.train_csv is not None:
        raw.setdefault("data", {}).pop("generator", None)
    return cfgmod.parse(cfgmod.apply_overrides(raw, overrides))


def _ood_eval(model, in_feats, ood_feats):
    _, u_in = score(model, in_feats)
    _, u_ood = score(model, ood_feats)
    return metrics.ood_report(u_in, u_ood)


def _calibration_eval(model, feats, labels):
    pred, unc = score(model, feats)
    correct = pred == labels.astype(np.int64)
    return {"calibration_auroc": metrics.calibration_auroc(unc, correct),
            "accuracy": float(correct.mean()), "n": int(labels.size),
            "n_errors": int((~correct).sum())}


def _scores_table(path, raw_feats, pred, unc, targets=None):
    extra = {"prediction": pred, "uncertainty": unc}
    ds.write_csv(path, ds.Dataset(raw_feats, targets), extra)


# commands ---------------------------------------------------------------------


def cmd_gen_data(args):
    if args.generator not in ds.GENERATORS:
        raise UsageError(f"unknown generator {args.generator!r}; "
                         f"choose from {', '.join(ds.GENERATORS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = cfgmod.apply_overrides({}, args.param or [])
    try:
        if args.generator == "cubic":
            sets = dict(zip(("train", "test"), ds.gen_cubic(args.seed, **params)))
        elif args.generator == "two-clusters":
            sets = dict(zip(("train", "test"), ds.gen_two_clusters(args.seed, **params)))
        else:
            raw = cfgmod.preset_raw("blobs-ood")["data"]["params"]
            raw.update(params)
            sets = dict(zip(("train", "test", "ood"), ds.gen_blobs(args.seed, **raw)))
    except TypeError as exc:
        raise UsageError(f"bad generator parameter: {exc}") from exc
    for name, data in sets.items():
        ds.write_csv(out / f"{name}.csv", data)
        print(f"wrote {out / f'{name}.csv'} ({len(data)} rows)")
    return 0


def cmd_train(args):
    run = _resolve_run(args)
    train_set, test_set, ood_set = _build_data(run)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def log(rec):
        if not args.quiet:
            acc = "" if rec.accuracy is None else f" acc={rec.accuracy:.4f}"
            print(f"epoch {rec.epoch:5d} total={rec.total:.6g} nll={rec.nll:.6g} "
                  f"mi={rec.mi:.6g} distortion={rec.distortion:.6g} "
                  f"margin={rec.margin:.6g}{acc}", flush=True)

    model, report = train(train_set, run.model, log=log)
    persist.save(model, out / MODEL_NAME)
    (out / "report.csv").write_text(report.to_csv())
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    ds.write_csv(out / "train.csv", ds.Dataset(_raw(train_set), train_set.targets,
                                               train_set.num_classes))

    evaluation = {}
    if test_set is not None:
        pred, unc = score(model, test_set.features)
        _scores_table(out / "test_scores.csv", _raw(test_set), pred, unc, test_set.targets)
        if run.model.task == "classification" and test_set.targets is not None:
            evaluation["accuracy"] = metrics.accuracy(pred, test_set.labels)
            if run.eval.calibration:
                evaluation["calibration"] = _calibration_eval(model, test_set.features,
                                                              test_set.targets)
    if ood_set is not None:
        ds.write_csv(out / "test.csv", ds.Dataset(test_set.features, test_set.targets,
                                                  test_set.num_classes))
        ds.write_csv(out / "ood.csv", ood_set)
        evaluation["ood"] = _ood_eval(model, test_set.features, ood_set.features)
    if run.eval.ood_csv:
        in_feats = test_set.features if test_set is not None else train_set.features
        ood_feats, _, _ = _read_inputs(run.eval.ood_csv, model)
        evaluation["ood"] = _ood_eval(model, in_feats, ood_feats)
    if evaluation:
        _write_json(out / "eval.json", evaluation)
    print(f"trained {run.model.epochs} epochs in {report.wall_clock:.1f}s; "
          f"model written to {out / MODEL_NAME}")
    return 0


def _raw(data: ds.Dataset) -> np.ndarray:
    """Undo the z-scoring so written files hold the original feature values."""
    if data.normalization is None:
        return data.features
    return data.features * data.normalization.std + data.normalization.mean


def cmd_eval_ood(args):
    model = persist.load(args.model)
    in_feats, _, _ = _read_inputs(args.in_csv, model)
    ood_feats, _, _ = _read_inputs(args.ood_csv, model)
    _write_json(args.out, _ood_eval(model, in_feats, ood_feats))
    return 0


def cmd_eval_calibration(args):
    model = persist.load(args.model)
    if model.config.task != "classification":
        raise ds.DataError("calibration needs a classification model")
    feats, labels, _ = _read_inputs(args.csv, model, need_labels=True)
    _write_json(args.out, _calibration_eval(model, feats, labels))
    return 0


def cmd_score(args):
    model = persist.load(args.model)
    feats, _, raw_feats = _read_inputs(args.csv, model)
    pred, unc = score(model, feats)
    target = sys.stdout if args.out in (None, "-") else args.out
    _scores_table(target, raw_feats, pred, unc)
    return 0


def cmd_inspect_codebook(args):
    model = persist.load(args.model)
    feats, labels, _ = _read_inputs(args.csv, model)
    k = model.codebook.k
    assign = hard_assignments(distances(model, feats))
    if model.config.task == "classification":
        if labels is None:
            raise ds.DataError(f"{args.csv}: needs a 'y' column with labels")
        classes = np.asarray(labels, dtype=np.int64)
        n_classes = model.config.num_classes
    else:
        # regression: every point counts under a single pseudo-class
        classes = np.zeros(len(feats), dtype=np.int64)
        n_classes = 1
    counts = np.zeros((n_classes, k), dtype=np.int64)
    np.add.at(counts, (classes, assign), 1)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "counts.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + [f"centroid{j}" for j in range(k)])
        for c in range(n_classes):
            w.writerow([c] + counts[c].tolist())
    per_centroid = counts.sum(axis=0)
    majority = counts.argmax(axis=0)
    live = per_centroid > 0
    summary = {
        "n": int(counts.sum()),
        "k": k,
        "empty_centroids": np.flatnonzero(~live).tolist(),
        "centroid_sizes": per_centroid.tolist(),
        "majority_class": [int(m) if ok else None for m, ok in zip(majority, live)],
        "purity": float(counts.max(axis=0).sum() / counts.sum()),
        "majority_unique": bool(len(set(majority[live].tolist())) == int(live.sum())),
    }
    _write_json(out / "summary.json", summary)
    _write_json(None, summary)
    return 0


def _read_matrix(path, what):
    try:
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ds.DataError(f"cannot read {what} file {path}: {exc.strerror}") from None
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    if not rows or not body:
        raise ds.DataError(f"{path}: {what} file has no data rows")
    width = len(rows[0])
    for i, r in enumerate(body, start=2):
        if len(r) != width:
            raise ds.DataError(f"{path}:{i}: expected {width} fields, got {len(r)}")
    try:
        return np.array([[float(c) for c in r] for r in body])
    except ValueError as exc:
        raise ds.DataError(f"{path}: non-numeric cell ({exc})") from None


def cmd_rd_solve(args):
    if args.preset == "binary-hamming":
        source = np.array([0.5, 0.5])
        dist = np.array([[0.0, 1.0], [1.0, 0.0]])
    elif args.distortion and args.source:
        dist = _read_matrix(args.distortion, "distortion")
        source = _read_matrix(args.source, "source").reshape(-1)
    else:
        raise UsageError("give --preset binary-hamming or both DISTORTION and SOURCE CSV files")
    sol = blahut_arimoto(source, dist, args.alpha, tol=args.tol, max_iters=args.max_iters)
    out = sol.to_dict()
    out["alpha"] = args.alpha
    _write_json(args.out, out)
    return 0


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dab", description="Distance-aware bottleneck: train "
                                "models with codebook-based uncertainty and evaluate them.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV files")
    g.add_argument("generator", help=f"one of: {', '.join(ds.GENERATORS)}")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=".", help="output directory (default: current)")
    g.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="generator keyword argument, value parsed as YAML")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config file or preset")
    t.add_argument("config", nargs="?", help="YAML or JSON run config")
    t.add_argument("--preset", help=f"named preset: {', '.join(cfgmod.preset_names())}")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (dotted keys reach into sections)")
    t.add_argument("--train-csv")
    t.add_argument("--test-csv")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--quiet", action="store_true", help="do not print per-epoch losses")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("eval-ood", help="AUROC/AUPRC of uncertainty for in-dist vs OOD inputs")
    o.add_argument("model")
    o.add_argument("in_csv")
    o.add_argument("ood_csv")
    o.add_argument("--out", help="JSON report path (default: stdout)")
    o.set_defaults(func=cmd_eval_ood)

    c = sub.add_parser("eval-calibration", help="AUROC of uncertainty at flagging mistakes")
    c.add_argument("model")
    c.add_argument("csv", help="labelled CSV with a 'y' column")
    c.add_argument("--out", help="JSON report path (default: stdout)")
    c.set_defaults(func=cmd_eval_calibration)

    s = sub.add_parser("score", help="prediction and uncertainty for every row of a CSV")
    s.add_argument("model")
    s.add_argument("csv")
    s.add_argument("--out", help="CSV output path (default: stdout)")
    s.set_defaults(func=cmd_score)

    i = sub.add_parser("inspect-codebook", help="class-by-centroid counts of hard assignments")
    i.add_argument("model")
    i.add_argument("csv")
    i.add_argument("--out-dir", default=".")
    i.set_defaults(func=cmd_inspect_codebook)

    def rd_args(r):
        r.add_argument("distortion", nargs="?", help="CSV matrix, header row then n rows of m")
        r.add_argument("source", nargs="?", help="CSV with a header and one probability per row")
        r.add_argument("--alpha", type=float, required=True)
        r.add_argument("--preset", choices=["binary-hamming"])
        r.add_argument("--tol", type=float, default=1e-10)
        r.add_argument("--max-iters", type=int, default=100_000)
        r.add_argument("--out", help="JSON output path (default: stdout)")
        r.set_defaults(func=cmd_rd_solve)

    rd_args(sub.add_parser("rd-solve", help="Blahut-Arimoto on a discrete source"))
    rd = sub.add_parser("rd", help="rate-distortion tools")
    rd_args(rd.add_subparsers(dest="rd_command", required=True).add_parser(
        "solve", help="Blahut-Arimoto on a discrete source"))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"dab: error: {exc}", file=sys.stderr)
        return 2
    except (ds.DataError, persist.ModelFormatError, TrainingError, ConvergenceError,
            ValueError, OSError) as exc:
        print(f"dab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
