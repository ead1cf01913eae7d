"""``onepass`` command line: data generation, training, inference, evaluation,
benchmarking and oracle checks.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 oracle failure.
Every command is deterministic given its flags and seed; ``ONEPASS_SEED``
supplies the seed when ``--seed`` is absent.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .bench import DEFAULT_METHODS, MIN_ITERS, MIN_WARMUP, run_benchmark
from .data import (
    DataFormatError,
    TrainConfig,
    accuracy_of,
    channel_std,
    gen_synthetic,
    load_csv,
    random_conv_stack,
    save_csv,
    train_fixture_head,
)
from .estimator import predict_one
from .metrics import evaluate, export_histogram
from .network import ModelError, RngStream, load_model, save_model
from .suites import SUITES
from .tensor import NonFiniteError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ORACLE = 0, 1, 2, 3
SEED_ENV = "ONEPASS_SEED"
META_FILE = "meta.json"
METHOD_ALIASES = {"moments": "moments", "det": "deterministic", "mcdrop": "mcdrop"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        values = tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _float_list(text):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")


def _write_text(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _read_meta(directory):
    path = os.path.join(directory, META_FILE)
    try:
        with open(path) as fh:
            meta = json.load(fh)
        return tuple(meta["input_shape"]), int(meta["class_count"]), np.asarray(meta["prior_sigma"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: malformed metadata ({exc})") from None


def _resolve_prior(args, model, model_prior, csv_path, batch):
    """Input prior std: flag, then model JSON, then meta.json beside the CSV, then the CSV itself."""
    if args.prior_sigma is not None:
        return args.prior_sigma
    if model_prior is not None:
        return model_prior
    meta = os.path.join(os.path.dirname(os.path.abspath(csv_path)), META_FILE)
    if os.path.exists(meta):
        return _read_meta(os.path.dirname(meta))[2]
    return channel_std(batch.inputs)


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args):
    if args.classes < 2:
        raise UsageError(f"--classes must be >= 2, got {args.classes}")
    if args.n_per_class < 1:
        raise UsageError("--n-per-class must be positive")
    seed = _seed(args)
    data = gen_synthetic(seed, args.n_per_class, args.classes, args.shape,
                         n_test_per_class=args.n_test_per_class, n_ood=args.n_ood,
                         noise=args.noise)
    os.makedirs(args.out, exist_ok=True)
    for name in ("train", "test", "ood"):
        save_csv(getattr(data, name), os.path.join(args.out, f"{name}.csv"))
    meta = {
        "input_shape": list(args.shape),
        "class_count": args.classes,
        "prior_sigma": data.train.prior_sigma.tolist(),
        "seed": seed,
    }
    with open(os.path.join(args.out, META_FILE), "w") as fh:
        json.dump(meta, fh, indent=2)
    print(f"wrote train ({len(data.train)}), test ({len(data.test)}), ood ({len(data.ood)}) "
          f"samples of shape {tuple(args.shape)} to {args.out}")
    return EXIT_OK


def cmd_train(args):
    shape, class_count, prior = _read_meta(args.data)
    train = load_csv(os.path.join(args.data, "train.csv"), shape, class_count, prior)
    seed = _seed(args)
    conv_keep = args.keep_prob if args.conv_keep_prob is None else args.conv_keep_prob
    stack = random_conv_stack(shape, args.filters, args.kernel_size, conv_keep,
                              input_keep_prob=args.input_keep_prob, rng=RngStream(seed, 1))
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                      keep_prob=args.keep_prob, epochs=args.epochs, seed=seed)
    model, losses = train_fixture_head(stack, train, cfg, rng=RngStream(seed, 2),
                                       class_count=class_count)
    save_model(model, args.out_model, prior_sigma=prior)
    final = losses[-1] if losses else float("nan")
    print(f"final loss {final:.6f}")
    print(f"train accuracy {accuracy_of(model, train):.6f}")
    return EXIT_OK


def _predict_range(model_path, csv_path, shape, prior, method, S, T, seed, start, stop):
    """Predictions for samples [start, stop). Top-level so worker processes can run it."""
    model = load_model(model_path)
    batch = load_csv(csv_path, shape, prior_sigma=prior)
    root = RngStream(seed, 3)
    return [
        predict_one(model, batch.inputs[i], prior, method, S, T, root.substream(i)).to_dict()
        for i in range(start, stop)
    ]


def _run_predictions(args, check_labels=False):
    model, model_prior = load_model(args.model, with_prior=True)
    batch = load_csv(args.input_csv, model.input_shape, model.class_count)
    if check_labels and np.any(batch.labels < 0):
        raise DataFormatError(f"{args.input_csv}: evaluation needs labeled rows")
    prior = _resolve_prior(args, model, model_prior, args.input_csv, batch)
    method = METHOD_ALIASES[args.method]
    seed = _seed(args)
    n = len(batch)
    workers = max(1, min(getattr(args, "parallel", 1), n))
    job = (args.model, args.input_csv, model.input_shape, prior, method, args.S, args.T, seed)
    if workers == 1:
        dicts = _predict_range(*job, 0, n)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ProcessPoolExecutor(workers) as pool:
            parts = pool.map(_predict_range, *zip(*[job + (a, b) for a, b in zip(bounds, bounds[1:])]))
            dicts = [d for part in parts for d in part]
    return model, batch, dicts


def cmd_infer(args):
    _, _, dicts = _run_predictions(args)
    _write_text(args.out, "".join(json.dumps(d) + "\n" for d in dicts))
    return EXIT_OK


class _Row:
    """Prediction stand-in rebuilt from a serialised prediction dict."""

    def __init__(self, d):
        self.probs = np.asarray(d["probs"])
        self.predicted_class = d["predicted"]
        self.confidence = d["confidence"]
        self.entropy = d["entropy"]


def cmd_eval(args):
    if args.parallel < 1:
        raise UsageError("--parallel must be >= 1")
    model, batch, dicts = _run_predictions(args, check_labels=True)
    rows = [_Row(d) for d in dicts]
    report = evaluate(rows, batch.labels, model.class_count)
    _write_text(args.out, report.to_json() + "\n")
    if args.hist_out:
        export_histogram(rows, batch.labels, args.hist_out)
    return EXIT_OK


def cmd_bench(args):
    if args.iters < MIN_ITERS:
        raise UsageError(f"--iters must be >= {MIN_ITERS}, got {args.iters}")
    if args.warmup < MIN_WARMUP:
        raise UsageError(f"--warmup must be >= {MIN_WARMUP}, got {args.warmup}")
    methods = tuple(m.strip() for m in args.method_set.split(",") if m.strip())
    for m in methods:
        if m not in ("ours", "deterministic") and not (
            m.startswith("mcdrop-") and m[7:].isdigit() and int(m[7:]) > 0
        ):
            raise UsageError(f"unknown benchmark method {m!r}")
    model, model_prior = load_model(args.model, with_prior=True)
    seed = _seed(args)
    if args.input_csv:
        batch = load_csv(args.input_csv, model.input_shape, model.class_count)
        x = batch.inputs[0]
        prior = _resolve_prior(args, model, model_prior, args.input_csv, batch)
    else:
        x = RngStream(seed, 5).gen.standard_normal(model.input_shape)
        prior = args.prior_sigma if args.prior_sigma is not None else (
            model_prior if model_prior is not None else 0.0
        )
    report = run_benchmark(model, x, prior, methods, iters=args.iters, warmup=args.warmup,
                           n_samples=args.S, seed=seed, rounds=args.rounds)
    _write_text(args.out, json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_oracle_check(args):
    seed = _seed(args)
    names = list(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        kwargs = {"seed": seed}
        if name == "enum":
            kwargs["perturb"] = args.perturb
        if name == "mc":
            kwargs["T"] = args.mc_T
        result = SUITES[name](**kwargs)
        if args.verbose:
            for row in result.details:
                print("  " + " ".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
        print(result.line())
        ok &= result.passed
    return EXIT_OK if ok else EXIT_ORACLE


# -- parser ------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="onepass", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seed_flag(p):
        p.add_argument("--seed", type=int, default=None,
                       help=f"random seed (falls back to ${SEED_ENV}, then 0)")

    def predict_flags(p):
        p.add_argument("--model", required=True)
        p.add_argument("--method", choices=sorted(METHOD_ALIASES), default="moments")
        p.add_argument("--T", type=int, default=30, help="MC dropout passes")
        p.add_argument("--S", type=int, default=100, help="logit samples for moments")
        p.add_argument("--prior-sigma", type=_float_list, default=None,
                       help="input std, one value or one per channel")
        p.add_argument("--out", default="-")
        seed_flag(p)

    p = sub.add_parser("gen-data", help="write synthetic train/test/ood CSV files")
    seed_flag(p)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--n-per-class", type=int, default=200)
    p.add_argument("--n-test-per-class", type=int, default=None)
    p.add_argument("--n-ood", type=int, default=None)
    p.add_argument("--shape", type=_int_list, default=(16, 16, 2), help="H,W,C")
    p.add_argument("--noise", type=float, default=0.7)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the dense head over a random conv stack")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out-model", required=True)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--keep-prob", type=float, default=0.5)
    p.add_argument("--conv-keep-prob", type=float, default=0.8)
    p.add_argument("--input-keep-prob", type=float, default=1.0)
    p.add_argument("--filters", type=_int_list, default=(16, 16, 16, 16))
    p.add_argument("--kernel-size", type=int, default=3)
    seed_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="per-sample predictions as JSON lines")
    predict_flags(p)
    p.add_argument("--input-csv", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics report and entropy histogram")
    predict_flags(p)
    p.add_argument("--data", dest="input_csv", required=True, help="labeled CSV file")
    p.add_argument("--hist-out", default=None)
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency of each inference method")
    p.add_argument("--model", required=True)
    p.add_argument("--method-set", default=",".join(DEFAULT_METHODS))
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--S", type=int, default=100)
    p.add_argument("--input-csv", default=None, help="benchmark the first sample of this file")
    p.add_argument("--prior-sigma", type=_float_list, default=None)
    p.add_argument("--out", default="-")
    seed_flag(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle-check", help="closed forms against brute-force oracles")
    p.add_argument("--suite", choices=["enum", "quadrature", "mc", "all"], default="all")
    p.add_argument("--perturb", type=float, default=0.0,
                   help="shift one weight on the closed-form side of the enum suite")
    p.add_argument("--mc-T", type=int, default=200_000)
    p.add_argument("--verbose", action="store_true", help="print every case")
    seed_flag(p)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and on bad flags
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"onepass: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ModelError, ShapeError, NonFiniteError, OSError, ValueError) as exc:
        print(f"onepass: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
