"""``trafficbench`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Data goes to files
or stdout; progress goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from dataclasses import asdict, replace
from pathlib import Path

from trafficbench import _atomic, __version__
from trafficbench.attacks import (
    ATTACK_KINDS,
    DeepFoolConfig,
    PgdConfig,
    ZooConfig,
    run_attack,
    train_surrogate,
)
from trafficbench.classifiers import MODEL_KINDS, TrainConfig, load_model, save_model, train_model
from trafficbench.evalbench import (
    ExperimentError,
    ExperimentResult,
    Cell,
    confusion,
    load_plan,
    metrics,
    metrics_csv,
    report_json,
    run_experiment,
)
from trafficbench.flowdata import (
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    select_traffic,
    split,
    to_arff,
)
from trafficbench.preprocess import (
    DEFAULT_BINS,
    apply_scaler,
    fit_scaler,
    rank_features,
    select_top_k,
)

log = logging.getLogger("trafficbench")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


class _HelpFormatter(argparse.HelpFormatter):
    """Show the default of every optional flag unless its help already does."""

    def _get_help_string(self, action):
        text = action.help or ""
        if (action.required or not action.option_strings or action.default is argparse.SUPPRESS
                or "default" in text):
            return text
        return f"{text} (default: %(default)s)".lstrip()


def build_parser():
    fmt = _HelpFormatter
    p = _Parser(prog="trafficbench", formatter_class=fmt,
                description="Adversarial robustness benchmark for encrypted-traffic classifiers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug-level progress on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", formatter_class=fmt, help="write a synthetic flow dataset")
    s.add_argument("--out", required=True, help="output .csv or .arff path")
    s.add_argument("--n-per-class", type=_positive_int, default=200, help="rows per class")
    s.add_argument("--classes", type=_positive_int, default=2, help="number of classes")
    s.add_argument("--informative", type=_positive_int, default=5,
                   help="features whose mean depends on the class")
    s.add_argument("--noise", type=int, default=0, help="pure-noise features")
    s.add_argument("--separation", type=float, default=2.0, help="spacing of class means")
    s.add_argument("--seed", type=_u64, default=0, help="random seed")

    s = sub.add_parser("ingest", formatter_class=fmt,
                       help="split, scale and select features; write train/test CSVs")
    s.add_argument("--data", required=True, help="ARFF or CSV input")
    s.add_argument("--label-column", default=None, help="CSV label column (default: class)")
    s.add_argument("--selector", default="combined", choices=["combined", "vpn", "nonvpn"],
                   help="traffic subset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=_u64, default=0, help="random seed")
    s.add_argument("--k", type=_positive_int, default=5, help="number of features kept")
    s.add_argument("--bins", type=_positive_int, default=DEFAULT_BINS,
                   help="equal-frequency bins for mutual information")
    s.add_argument("--train-fraction", type=float, default=0.8, help="per-class train share")

    s = sub.add_parser("rank-features", formatter_class=fmt,
                       help="rank features by mutual information with the label")
    s.add_argument("--data", required=True, help="ARFF or CSV dataset")
    s.add_argument("--label-column", default=None, help="CSV label column (default: class)")
    s.add_argument("--bins", type=_positive_int, default=DEFAULT_BINS,
                   help="equal-frequency bins for mutual information")
    s.add_argument("--out", default=None, help="ranking CSV path (default: stdout)")

    s = sub.add_parser("train", formatter_class=fmt, help="train one classifier")
    s.add_argument("--data", required=True, help="ARFF or CSV dataset")
    s.add_argument("--model", required=True, choices=MODEL_KINDS, help="classifier family")
    s.add_argument("--out", required=True, help="model file")
    s.add_argument("--seed", type=_u64, default=0, help="random seed")
    s.add_argument("--epochs", type=int, default=20, help="neural training epochs")
    s.add_argument("--batch-size", type=_positive_int, default=64, help="SGD mini-batch size")
    s.add_argument("--lr", type=float, default=0.01, help="SGD learning rate")
    s.add_argument("--knn-k", type=_positive_int, default=5, help="neighbours for knn")
    s.add_argument("--min-leaf", type=_positive_int, default=2, help="minimum rows per c45 leaf")

    s = sub.add_parser("evaluate", formatter_class=fmt, help="score a model on a dataset")
    s.add_argument("--model", required=True, help="model file")
    s.add_argument("--data", required=True, help="ARFF or CSV dataset")
    s.add_argument("--format", choices=["csv", "json"], default="csv", help="report format")
    s.add_argument("--out", default=None, help="report path (default: stdout)")

    s = sub.add_parser("attack", formatter_class=fmt, help="craft adversarial examples")
    s.add_argument("--model", required=True, help="model file")
    s.add_argument("--data", required=True, help="(scaled) dataset to perturb")
    s.add_argument("--attack", required=True, choices=ATTACK_KINDS, help="attack to run")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=_u64, default=0, help="random seed")
    s.add_argument("--epsilon", type=float, default=None,
                   help="L-inf budget (pgd default 0.3; zoo default unconstrained)")
    s.add_argument("--alpha", type=float, default=0.05, help="pgd step size")
    s.add_argument("--iters", type=_positive_int, default=None,
                   help="iterations (default: pgd 40, deepfool 50, zoo 200)")
    s.add_argument("--overshoot", type=float, default=0.02, help="deepfool overshoot")
    s.add_argument("--h", type=float, default=1e-4, help="zoo finite-difference step")
    s.add_argument("--step", type=float, default=0.01, help="zoo coordinate step size")
    s.add_argument("--coords", type=_positive_int, default=1, help="zoo coordinates per iteration")
    s.add_argument("--no-random-start", action="store_true", help="pgd starts at the clean point")
    s.add_argument("--surrogate-data", default=None,
                   help="training data for the surrogate of c45/knn targets (default: --data)")

    s = sub.add_parser("experiment", formatter_class=fmt, help="run a JSON experiment plan")
    s.add_argument("--plan", required=True, help="plan JSON file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=_u64, default=None, help="override the plan's seed (default: plan value)")
    s.add_argument("--format", choices=["csv", "json"], default="csv",
                   help="report echoed to stdout (both are always written)")
    return p


# ---------------------------------------------------------------------------


def cmd_synth(a):
    spec = SyntheticSpec(a.n_per_class, a.classes, a.informative, a.noise, a.separation, a.seed)
    ds = generate_synthetic(spec)
    out = Path(a.out)
    if out.suffix.lower() == ".arff":
        _atomic.write_text(out, to_arff(ds, "synthetic"))
    else:
        save_dataset(ds, out)
    log.info("wrote %d rows x %d features to %s", ds.n_samples, ds.n_features, out)


def cmd_ingest(a):
    data = select_traffic(load_dataset(a.data, a.label_column), a.selector)
    train, test = split(data, SplitSpec(a.train_fraction, a.seed, True))
    scaler = fit_scaler(train)
    train, test = apply_scaler(train, scaler), apply_scaler(test, scaler)
    ranking = rank_features(train, a.bins)
    k = min(a.k, train.n_features)
    train, test = select_top_k(train, ranking, k), select_top_k(test, ranking, k)
    out = Path(a.out)
    save_dataset(train, out / "train.csv")
    save_dataset(test, out / "test.csv")
    _atomic.write_text(out / "ranking.csv", ranking.to_csv())
    meta = {
        "source": str(a.data),
        "selector": a.selector,
        "seed": a.seed,
        "train_fraction": a.train_fraction,
        "n_rows": data.n_samples,
        "dropped_rows": data.dropped_rows,
        "n_train": train.n_samples,
        "n_test": test.n_samples,
        "bins": a.bins,
        "selected_features": list(train.schema.feature_names),
        "scaler": scaler.to_dict(),
    }
    _atomic.write_text(out / "preprocess.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"rows={data.n_samples} dropped={data.dropped_rows} train={train.n_samples} "
          f"test={test.n_samples} features={','.join(train.schema.feature_names)}")


def cmd_rank(a):
    data = load_dataset(a.data, a.label_column)
    text = rank_features(data, a.bins).to_csv()
    if a.out:
        _atomic.write_text(a.out, text)
    else:
        sys.stdout.write(text)


def cmd_train(a):
    data = load_dataset(a.data)
    cfg = TrainConfig(a.batch_size, a.lr, a.epochs, a.seed)
    model = train_model(a.model, data, cfg, a.knn_k, a.min_leaf)
    save_model(model, a.out, data.schema)
    acc = float((model.predict(data.features) == data.labels).mean())
    log.info("trained %s on %d rows; training accuracy %.4f", a.model, data.n_samples, acc)


def _single_result(name, model, data, report, attack="none"):
    res = ExperimentResult(name, data.schema.class_names, complete=True)
    res.cells.append(Cell(model.kind, attack, report))
    return res


def cmd_evaluate(a):
    model, _ = load_model(a.model)
    data = load_dataset(a.data)
    report = metrics(confusion(model, data))
    res = _single_result(Path(a.data).stem, model, data, report)
    text = metrics_csv(res) if a.format == "csv" else report_json(res)
    if a.out:
        _atomic.write_text(a.out, text)
    else:
        sys.stdout.write(text)


def cmd_attack(a):
    model, _ = load_model(a.model)
    data = load_dataset(a.data)
    if a.attack == "pgd":
        eps = 0.3 if a.epsilon is None else a.epsilon
        cfg = PgdConfig(eps, a.alpha if eps == 0 else min(a.alpha, eps), a.iters or 40,
                        not a.no_random_start, a.seed)
    elif a.attack == "deepfool":
        cfg = DeepFoolConfig(a.iters or 50, a.overshoot)
    else:
        cfg = ZooConfig(a.h, a.step, a.iters or 200, a.coords, 0.0, a.seed, a.epsilon)
    surrogate = None
    if a.attack != "zoo" and not model.differentiable:
        sdata = load_dataset(a.surrogate_data) if a.surrogate_data else data
        surrogate = train_surrogate(model, sdata, TrainConfig(seed=a.seed))
        log.info("surrogate agreement with %s: %.4f", model.kind, surrogate.agreement)
    res = run_attack(a.attack, model, data, cfg, surrogate)
    res.metadata["config"] = asdict(cfg)
    res.save(a.out, data)
    log.info("%s: success rate %.4f over %d samples", a.attack, res.success_rate(), res.n_samples)


def cmd_experiment(a):
    plan = load_plan(a.plan)
    if a.seed is not None:
        plan = replace(plan, seed=a.seed)
    result = run_experiment(plan, a.out, base_dir=Path(a.plan).resolve().parent)
    sys.stdout.write(metrics_csv(result) if a.format == "csv" else report_json(result))
    for flag in result.flags:
        print(f"FLAG {flag}", file=sys.stderr)


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "rank-features": cmd_rank,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "experiment": cmd_experiment,
}


def _on_sigterm(signum, frame):
    raise KeyboardInterrupt


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        previous = signal.signal(signal.SIGTERM, _on_sigterm)
    except ValueError:  # not in the main thread
        previous = None
    try:
        COMMANDS[args.command](args)
    except ExperimentError as exc:
        print(f"trafficbench: error in stage '{exc.stage}': {exc.cause}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("trafficbench: aborted; unfinished outputs keep a .partial suffix", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"trafficbench: error in stage '{args.command}': {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if previous is not None:
            signal.signal(signal.SIGTERM, previous)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
