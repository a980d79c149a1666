"""Command-line driver: ``augment-reduce {train,eval,selftest}``.

Exit codes: 0 success, 1 failed self-test, 2 invalid configuration or
input, 3 training divergence (a ``diagnostic.json`` is written next to the
other outputs).

``trace.csv`` columns: ``iteration, wall_clock_s, minibatch_elbo,
smoothed_elbo``. ``smoothed_elbo`` is the mean of the last 100 minibatch
estimates (fewer during the first 99 iterations).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation, selftest
from .model import DivergenceError, LinearModel
from .vem import METHODS, TrainConfig, Trainer, TrainResult, full_bound

log = logging.getLogger("augment_reduce")

SMOOTH_WINDOW = 100
TRACE_COLUMNS = ("iteration", "wall_clock_s", "minibatch_elbo", "smoothed_elbo")

# run options that are not TrainConfig fields
DEFAULTS = {
    "data": None,
    "test_data": None,
    "format": "auto",
    "synth": None,
    "normalize": "global",
    "pixel_scale": False,
    "out": "run",
    "is_samples": 1000,
    "proposal_mean": 5.0,
    "proposal_std": 5.0,
    "is_seed": 0,
}
# flag name -> TrainConfig field
_CONFIG_FLAGS = {
    "method": "method",
    "B": "batch_size",
    "S": "n_sampled",
    "iters": "iterations",
    "seed": "seed",
    "rho0": "rho0",
    "rho_decay": "rho_decay",
    "rho_period": "rho_period",
    "alpha_scale": "alpha_scale",
    "local_clock": "local_clock",
    "l2": "l2",
}


class UsageError(ValueError):
    pass


def parse_synth(spec: str) -> dict:
    """Parse ``K=1000,N=30000[,Ntest=..,D=..,seed=..,kind=linear,density=..,signal=..]``."""
    out = {}
    casts = {"K": int, "N": int, "Ntest": int, "D": int, "seed": int, "kind": str, "density": float, "signal": float}
    for part in filter(None, spec.split(",")):
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or key not in casts:
            raise UsageError(f"bad --synth entry {part!r}; known keys: {', '.join(casts)}")
        try:
            out[key] = casts[key](value.strip())
        except ValueError:
            raise UsageError(f"bad value for {key} in --synth: {value!r}") from None
    if "K" not in out or "N" not in out:
        raise UsageError("--synth needs at least K=.. and N=..")
    kind = out.setdefault("kind", "categorical")
    if kind not in ("categorical", "linear"):
        raise UsageError(f"--synth kind must be categorical or linear, got {kind!r}")
    return out


def make_synth(spec: dict, seed: int, opts=None):
    """Return ``(train, test_or_None)`` for a parsed synthetic spec.

    Preprocessing runs before the split so both parts share one scaling.
    """
    n_test = spec.get("Ntest", 0)
    data_seed = spec.get("seed", seed)
    total = spec["N"] + n_test
    if spec["kind"] == "linear":
        ds = data_mod.synth_linear(
            spec["K"], spec.get("D", 50), total, seed=data_seed,
            density=spec.get("density", 0.05), signal=spec.get("signal", 3.0),
        )
    else:
        if "D" in spec:
            raise UsageError("the categorical generator has no features; drop D=")
        ds = data_mod.synth_categorical(spec["K"], total, seed=data_seed)
    ds = _prepare(ds, opts or DEFAULTS)
    if n_test:
        return ds.split(n_test)
    return ds, None


def _prepare(ds, opts):
    if ds.is_multilabel or np.any(ds.labels < 0):
        ds = data_mod.first_label_projection(ds)
    if opts["normalize"] != "none" and ds.n_features:
        ds = data_mod.normalize_max(ds, per_feature=opts["normalize"] == "per-feature")
    return ds


def _load_file(path, opts):
    try:
        return data_mod.load(path, fmt=opts["format"], pixel_scale=opts["pixel_scale"])
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None


def _load_test_file(path, opts, class_map):
    """Load test data with labels in the training class ids."""
    test = _load_file(path, opts)
    if class_map is not None or test.is_multilabel or np.any(test.labels < 0):
        if class_map is None:
            class_map = np.arange(test.n_classes)
        test, dropped = data_mod.remap_labels(test, class_map)
        if dropped:
            log.warning("dropped %d test example(s) whose first label is not a training class", dropped)
    if opts["normalize"] != "none" and test.n_features:
        test = data_mod.normalize_max(test, per_feature=opts["normalize"] == "per-feature")
    return test


def _conform(test, n_features, n_classes):
    """Pad the test feature space to the model's; reject anything larger."""
    if test.n_features > n_features:
        raise UsageError(f"test data has {test.n_features} features but the model has {n_features}")
    if test.n_obs and test.labels.max() >= n_classes:
        raise UsageError(f"test label {int(test.labels.max())} out of range for a {n_classes}-class model")
    if test.n_features < n_features:
        X = test.X.copy()
        X.resize((test.n_obs, n_features))
        test = data_mod.Dataset(X, test.labels, n_classes, test.label_lists, test.true_probs, test.class_map)
    return test


def load_datasets(opts, seed):
    """Resolve ``--data``/``--synth``/``--test-data`` into ``(train, test)``."""
    if bool(opts["data"]) == bool(opts["synth"]):
        raise UsageError("give exactly one of --data or --synth")
    if opts["synth"]:
        train, test = make_synth(parse_synth(opts["synth"]), seed, opts)
    else:
        train, test = _prepare(_load_file(opts["data"], opts), opts), None
    if opts["test_data"]:
        if test is not None:
            raise UsageError("--test-data conflicts with Ntest= in --synth")
        test = _load_test_file(opts["test_data"], opts, train.class_map)
    if test is not None:
        test = _conform(test, train.n_features, train.n_classes)
    return train, test


def smoothed(values, window=SMOOTH_WINDOW):
    values = np.asarray(values, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def write_trace(path, trace):
    elbo = [r.minibatch_elbo for r in trace]
    smooth = smoothed(elbo)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r, s in zip(trace, smooth):
            w.writerow([r.iteration, repr(r.wall_clock_s), repr(r.minibatch_elbo), repr(float(s))])


def read_trace(path):
    """Read a trace file back as a dict of numpy columns."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in TRACE_COLUMNS}


def test_metrics(model, test, opts) -> dict:
    if test is None or test.n_obs == 0:
        return {"test_loglik": None, "test_accuracy": None}
    loglik = evaluation.test_loglik(
        model, test,
        n_samples=opts["is_samples"], proposal_mean=opts["proposal_mean"],
        proposal_std=opts["proposal_std"], seed=opts["is_seed"],
    ) if model.kind.model != "softmax" else evaluation.test_loglik_softmax(model, test)
    return {"test_loglik": loglik, "test_accuracy": evaluation.accuracy(model, test)}


def _summary(result: TrainResult, train, test, opts) -> dict:
    cfg = result.config
    elbo = result.elbo_trace()
    smooth = smoothed(elbo)
    out = {
        "method": cfg.method,
        "n_obs": train.n_obs,
        "n_classes": train.n_classes,
        "n_features": train.n_features,
        "iterations": len(result.trace),
        "epoch_length_iterations": result.epoch_length,
        "final_minibatch_elbo": float(elbo[-1]),
        "final_smoothed_elbo": float(smooth[-1]),
        "final_smoothed_elbo_per_datapoint": float(smooth[-1]) / train.n_obs,
        "train_loglik_per_datapoint": evaluation.test_loglik_softmax(result.model, train)
        if result.model.kind.model == "softmax" else None,
        "time_per_epoch_s": result.time_per_epoch_s,
        "elapsed_s": result.elapsed_s,
    }
    if cfg.method in ("softmax_ar", "ove", "exact"):
        out["full_bound_per_datapoint"] = full_bound(result.model, train, result.store, cfg.method) / train.n_obs
    if train.true_probs is not None and train.n_features == 0:
        out["prob_mae"] = evaluation.prob_estimation_error(result.model, train.true_probs)
    out.update(test_metrics(result.model, test, opts))
    out["config"] = cfg.to_dict()
    out["options"] = {k: opts[k] for k in DEFAULTS}
    return out


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_options(args) -> tuple[TrainConfig, dict]:
    """Merge defaults, then ``--config`` JSON, then explicit flags."""
    from_file = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
    cfg_fields = {f.name for f in fields(TrainConfig)}
    known = cfg_fields | set(DEFAULTS) | set(_CONFIG_FLAGS)
    unknown = sorted(set(from_file) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")

    cfg_kwargs, opts = {}, dict(DEFAULTS)
    for key, value in from_file.items():
        if key in DEFAULTS:
            opts[key] = value
        else:
            cfg_kwargs[_CONFIG_FLAGS.get(key, key)] = value
    for flag, field_name in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg_kwargs[field_name] = value
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    try:
        cfg = TrainConfig(**cfg_kwargs)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    if cfg.method not in METHODS:
        raise UsageError(f"unknown method {cfg.method!r}; expected one of {', '.join(METHODS)}")
    if opts["is_samples"] < 1 or opts["proposal_std"] <= 0:
        raise UsageError("--is-samples must be >= 1 and --proposal-std > 0")
    return cfg, opts


def run_train(args) -> int:
    cfg, opts = resolve_options(args)
    train, test = load_datasets(opts, cfg.seed)
    try:
        cfg.validate(train.n_obs, train.n_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    log.info("training %s: N=%d K=%d D=%d, %d iterations", cfg.method, train.n_obs, train.n_classes, train.n_features, cfg.iterations)

    trainer = Trainer(train, cfg)
    try:
        result = trainer.run()
    except DivergenceError as exc:
        _dump_json(out / "diagnostic.json", {"error": str(exc), **(exc.snapshot or {})})
        write_trace(out / "trace.csv", trainer.trace)
        log.error("%s; diagnostics in %s", exc, out / "diagnostic.json")
        return 3

    write_trace(out / "trace.csv", result.trace)
    result.model.save(out / "model.bin")
    if train.class_map is not None:
        data_mod.save_class_map(train, out / "class_map.json")
    summary = _summary(result, train, test, opts)
    _dump_json(out / "summary.json", summary)
    log.info("final smoothed ELBO %.6g; outputs in %s", summary["final_smoothed_elbo"], out)
    return 0


def run_eval(args) -> int:
    opts = dict(DEFAULTS)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    try:
        model = LinearModel.load(args.model)
    except FileNotFoundError:
        raise UsageError(f"no such model file: {args.model}") from None
    if bool(opts["test_data"]) == bool(opts["synth"]):
        raise UsageError("give exactly one of --test-data or --synth")
    if opts["synth"]:
        spec = parse_synth(opts["synth"])
        test, held_out = make_synth(spec, args.seed, opts)
        test = held_out if held_out is not None else test
    else:
        map_path = Path(args.class_map) if args.class_map else Path(args.model).with_name("class_map.json")
        class_map = data_mod.load_class_map(map_path) if map_path.exists() else None
        test = _load_test_file(opts["test_data"], opts, class_map)
    test = _conform(test, model.n_features, model.n_classes)
    metrics = test_metrics(model, test, opts)
    metrics.update({"n_obs": test.n_obs, "model_kind": model.kind.model})
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


test_metrics.__test__ = False


def run_selftest(args) -> int:
    results = selftest.run(quick=args.quick, fault=args.fault)
    width = max(len(r[0]) for r in results)
    for name, ok, detail, secs in results:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {secs:6.2f}s  {detail}")
    return 0 if all(r[1] for r in results) else 1


def _add_data_flags(p):
    p.add_argument("--test-data", dest="test_data", metavar="PATH")
    p.add_argument("--format", choices=("auto", "libsvm", "xmlc"))
    p.add_argument("--synth", metavar="SPEC", help="K=..,N=..[,Ntest=..,D=..,seed=..,kind=categorical|linear]")
    p.add_argument("--normalize", choices=("global", "per-feature", "none"), help="feature scaling (default: global)")
    p.add_argument("--pixel-scale", dest="pixel_scale", action="store_true", default=None, help="divide features by 255")
    p.add_argument("--is-samples", dest="is_samples", type=int, help="importance samples per datapoint (default 1000)")
    p.add_argument("--proposal-mean", dest="proposal_mean", type=float, help="IS proposal mean (default 5)")
    p.add_argument("--proposal-std", dest="proposal_std", type=float, help="IS proposal std (default 5)")
    p.add_argument("--is-seed", dest="is_seed", type=int, help="seed for IS evaluation (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augment-reduce", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model and write trace, summary and weights")
    t.add_argument("--config", metavar="JSON", help="JSON file of options; flags override it")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--data", metavar="PATH")
    _add_data_flags(t)
    t.add_argument("--B", type=int, help="minibatch size (default 500)")
    t.add_argument("--S", type=int, help="sampled classes per datapoint (default 100)")
    t.add_argument("--iters", type=int, help="iterations (default 1000)")
    t.add_argument("--seed", type=int)
    t.add_argument("--rho0", type=float, help="base global step size (default 0.02)")
    t.add_argument("--rho-decay", dest="rho_decay", type=float, help="step decay factor (default 0.9)")
    t.add_argument("--rho-period", dest="rho_period", type=int, help="iterations between decays (default 2000)")
    t.add_argument("--alpha-scale", dest="alpha_scale", type=float, help="local step scale (default 1 softmax, 0.01 otherwise)")
    t.add_argument("--local-clock", dest="local_clock", choices=("visits", "iteration"))
    t.add_argument("--l2", type=float, help="L2 penalty on the weights (default 0)")
    t.add_argument("--out", metavar="DIR", help="output directory (default ./run)")
    t.set_defaults(func=run_train)

    e = sub.add_parser("eval", help="test log-likelihood and accuracy of a saved model")
    e.add_argument("--model", required=True, metavar="PATH")
    _add_data_flags(e)
    e.add_argument("--class-map", dest="class_map", metavar="PATH",
                   help="training class map (default: class_map.json next to the model)")
    e.add_argument("--seed", type=int, default=0, help="data seed for --synth without seed=")
    e.add_argument("--out", metavar="FILE", help="also write the metrics JSON here")
    e.set_defaults(func=run_eval)

    s = sub.add_parser("selftest", help="run the invariant suites")
    s.add_argument("--quick", action="store_true", help="smaller instance counts")
    s.add_argument("--fault", choices=("sign_flip",), help=argparse.SUPPRESS)
    s.set_defaults(func=run_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, data_mod.DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
