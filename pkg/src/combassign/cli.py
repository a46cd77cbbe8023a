"""Command-line entry point: ``combassign {generate,train,verify}``.

Exits 0 on success. A failed verification exits 1; usage or configuration errors exit 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from .core import ContractError
from .data import DataFormatError, GmmSpec, apply_imbalance, gmm_generate, load_csv, save_csv
from .encoder import save_checkpoint
from .trainer import METHODS, TrainConfig, Trainer
from .verify import SUITES, run_suites

log = logging.getLogger("combassign")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
RUN_KEYS = ("data", "out_dir")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(_format_value(float(v) if isinstance(v, np.floating) else v) for v in value)
    return str(value)


def write_manifest(path, items) -> None:
    """Flat ``key=value`` lines in the given order."""
    with open(path, "w") as f:
        for key, value in items:
            f.write(f"{key}={_format_value(value)}\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line and "=" in line:
                key, value = line.split("=", 1)
                out[key] = value
    return out


def manifest_path(data_path: str) -> str:
    return data_path + ".manifest"


# -- generate ---------------------------------------------------------------


def cmd_generate(args) -> int:
    spec = GmmSpec.desk(k=args.k, d=args.dim, sep=args.sep, stddev=args.stddev, seed=args.seed)
    dataset = gmm_generate(spec, args.n)
    if args.imbalance == "none":
        prior = np.full(args.k, 1.0 / args.k)
    else:
        dataset, p = apply_imbalance(dataset, int(args.imbalance), seed=args.seed, exact=args.exact_quota)
        prior = p.probs
    try:
        save_csv(args.out, dataset)
        write_manifest(
            manifest_path(args.out),
            [
                ("command", "generate"),
                ("k", args.k),
                ("dim", args.dim),
                ("n", args.n),
                ("sep", float(args.sep)),
                ("stddev", float(args.stddev)),
                ("seed", args.seed),
                ("imbalance", args.imbalance),
                ("exact_quota", args.exact_quota),
                ("rows", len(dataset)),
                ("class_counts", np.bincount(dataset.labels, minlength=args.k).tolist()),
                ("prior", [float(x) for x in prior]),
            ],
        )
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {len(dataset)} rows to {args.out}")
    return EXIT_OK


# -- train ------------------------------------------------------------------


def _parse_prior(text: str, data_path: str | None):
    if text == "uniform":
        return "uniform"
    if text == "manifest":
        if data_path is None or not os.path.exists(manifest_path(data_path)):
            raise UsageError("--prior manifest needs a dataset with a .manifest sidecar")
        text = read_manifest(manifest_path(data_path)).get("prior", "")
        if not text:
            raise UsageError("dataset manifest has no prior entry")
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"prior must be 'uniform', 'manifest' or comma-separated numbers, got {text!r}") from None


def resolve_train_config(args) -> tuple[dict, str, str]:
    """Layer the JSON config file over built-in defaults, then explicit flags over both."""
    settings: dict = {}
    if args.config:
        try:
            with open(args.config) as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(TRAIN_KEYS) - set(RUN_KEYS))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        settings.update(loaded)
    for key in TRAIN_KEYS + RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    data = settings.pop("data", None)
    out_dir = settings.pop("out_dir", None) or "run"
    if data is None:
        raise UsageError("no dataset given (--data or 'data' in the config file)")
    if not os.path.exists(data):
        raise UsageError(f"dataset {data} does not exist")
    prior = settings.get("prior")
    if isinstance(prior, str):
        settings["prior"] = _parse_prior(prior, data)
    elif isinstance(prior, list):
        settings["prior"] = tuple(float(x) for x in prior)
    return settings, data, out_dir


def cmd_train(args) -> int:
    settings, data_path, out_dir = resolve_train_config(args)
    try:
        dataset = load_csv(data_path)
    except DataFormatError as exc:
        raise UsageError(str(exc)) from None
    if "k" not in settings:
        settings["k"] = dataset.k if dataset.labels is not None else 10
    try:
        config = TrainConfig(**settings)
        config.make_prior()
    except TypeError as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out_dir}: {exc}") from None

    start = time.perf_counter()
    trainer = Trainer(config, dataset.features.shape[1])
    result = trainer.train_epochs(dataset)
    elapsed = time.perf_counter() - start

    with open(os.path.join(out_dir, "epochs.jsonl"), "w") as f:
        for report in result.reports:
            f.write(json.dumps(report.as_record(), sort_keys=False) + "\n")
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(f"method: {config.method}\n")
        f.write(result.summary())
    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), trainer.encoder, trainer.model)
    items = [("command", "train"), ("data", data_path), ("out_dir", out_dir)]
    items += [(key, value) for key, value in config.as_dict().items()]
    write_manifest(os.path.join(out_dir, "manifest.txt"), items)
    print(result.summary(), end="")
    log.info("trained %d epochs in %.1f s", config.epochs, elapsed)
    return EXIT_OK


# -- verify -----------------------------------------------------------------


def _describe(result) -> str:
    line = f"{result.name}: {'PASS' if result.passed else 'FAIL'} ({result.checks} checks, {len(result.failures)} failures)"
    if result.name == "d-matrices":
        s = result.stats
        line += f" D1 hard={s['d1_hard']:.2f} soft={s['d1_soft']:.2f}, D2 hard={abs(s['d2_hard']):.2f} soft={s['d2_soft']:.2f}"
    return line


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    options = {"seed": args.seed}
    if args.n_max is not None:
        options["n_max"] = args.n_max
    results = run_suites(names, **options)
    for r in results:
        print(_describe(r))
        for msg in r.failures:
            print(f"  - {msg}")
    ok = all(r.passed for r in results)
    if args.report:
        report = {"passed": ok, "suites": [r.as_dict() for r in results]}
        try:
            with open(args.report, "w") as f:
                json.dump(report, f, indent=2, default=float)
                f.write("\n")
        except OSError as exc:
            raise UsageError(f"cannot write report {args.report}: {exc}") from None
    return EXIT_OK if ok else EXIT_FAILED


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="combassign", description="Online clustering with prior-regularized hard assignment.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic Gaussian-mixture dataset as CSV")
    g.add_argument("--k", type=_positive_int, default=10, help="number of components")
    g.add_argument("--dim", type=_positive_int, default=16, help="feature dimension")
    g.add_argument("--n", type=_positive_int, default=10000, help="points drawn before any imbalance")
    g.add_argument("--sep", type=float, default=6.0, help="distance of each mean from the origin")
    g.add_argument("--stddev", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--imbalance", choices=("1", "2", "3", "none"), default="none")
    g.add_argument("--exact-quota", action="store_true", help="keep round(p * class size) points instead of coin flips")
    g.add_argument("--out", required=True, help="CSV path; the manifest goes to <out>.manifest")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an encoder and centroids on a CSV dataset")
    t.add_argument("--config", help="JSON file of training settings; flags take precedence")
    t.add_argument("--data", help="CSV dataset")
    t.add_argument("--out-dir", dest="out_dir", help="output directory (default: run)")
    t.add_argument("--method", choices=sorted(METHODS))
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    t.add_argument("--k", type=int, help="number of clusters (default: classes in the data, else 10)")
    t.add_argument("--nz", type=_positive_int, help="encoder output dimension")
    t.add_argument("--sigma", type=float, help="isotropic variance of the cost kernel")
    t.add_argument("--lr", type=float)
    t.add_argument("--prior", help="'uniform', 'manifest' (read from the dataset sidecar) or comma-separated weights")
    t.add_argument("--seed", type=int)
    t.add_argument("--encoder", choices=("identity", "linear", "mlp"))
    t.add_argument("--hidden", type=_positive_int)
    t.add_argument("--warm-start", dest="warm_start", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument(
        "--keep-counts", dest="keep_counts_across_batches", action=argparse.BooleanOptionalAction, default=None
    )
    t.add_argument("--estimate-covars", dest="estimate_covars", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--best-by", dest="best_by", choices=("nmi", "last"))
    t.add_argument("--prior-alignment", dest="prior_alignment", choices=("rank", "labels", "none"))
    t.add_argument("--sk-eps", dest="sk_eps", type=float)
    t.add_argument("--sk-niters", dest="sk_niters", type=_positive_int)
    t.add_argument("--w-ent", dest="w_ent", type=float)
    t.add_argument("--w-point-ent", dest="w_point_ent", type=float)
    t.add_argument("--w-reg", dest="w_reg", type=float)
    t.add_argument("--w-point-var", dest="w_point_var", type=float)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run the built-in oracle and property suites")
    v.add_argument("--suite", choices=("all",) + tuple(SUITES), default="all")
    v.add_argument("--n-max", dest="n_max", type=_positive_int, help="largest N in the lemma1 sweep (default 30)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", help="write a JSON report here")
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError) as exc:
        print(f"combassign {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
