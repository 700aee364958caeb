"""Command-line interface.

Subcommands: train, sweep, eval, landscape, stats. Every subcommand takes a
config file plus repeatable `--set key=value` overrides; `--threads` is
accepted everywhere and recorded, with execution kept single-threaded for
reproducibility (values above 1 change nothing at this scale).

Exit codes: 0 success, 2 configuration, 3 data format, 4 numeric/graph,
5 file I/O, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import ad, attacks, train as train_mod
from .config import ConfigError, load_config
from .data import DataFormatError
from .train import TrainError

log = logging.getLogger("atlab")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5
EXIT_OTHER = 1


def _add_common(p):
    p.add_argument("config", help="path to a key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default 1; kept sequential)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="atlab",
        description="Adversarial-training optimization lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training configuration")
    _add_common(p)

    p = sub.add_parser("sweep", help="train once per value of one parameter")
    _add_common(p)
    p.add_argument("--param", required=True,
                   choices=sorted(train_mod.SWEEPABLE),
                   help="which parameter to sweep")
    p.add_argument("--values", required=True,
                   help="comma-separated list of values")

    p = sub.add_parser("eval", help="natural + robust accuracy of a checkpoint")
    _add_common(p)
    p.add_argument("--weights", required=True, help="checkpoint file")

    p = sub.add_parser("landscape",
                       help="loss surface grid around one test example")
    _add_common(p)
    p.add_argument("--weights", required=True, help="checkpoint file")
    p.add_argument("--index", type=int, default=0, help="test example index")
    p.add_argument("--grid-n", type=int, default=21)
    p.add_argument("--extent", type=float, default=8.0 / 255.0)

    p = sub.add_parser("stats",
                       help="gradient statistics of a checkpoint on the probe set")
    _add_common(p)
    p.add_argument("--weights", required=True, help="checkpoint file")
    p.add_argument("--rho-n", type=int, default=0,
                   help="also estimate boundary distance on this many test examples")
    return parser


def _load(args):
    overrides = list(args.overrides)
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    cfg = load_config(args.config, overrides)
    train_mod.prepare_dataset_dir(cfg)
    return cfg


def _model_with_weights(cfg, weights_path):
    from . import models
    params = train_mod.load_checkpoint(weights_path)
    model = models.build_model(cfg.model, seed=cfg.seed)
    expected = model.params.layout
    if params.layout != expected:
        raise DataFormatError(
            f"{weights_path}: checkpoint layout does not match model "
            f"{cfg.model.kind} {cfg.model.layers}")
    model.params = params
    return model


def cmd_train(args):
    cfg = _load(args)
    result = train_mod.train(cfg)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args):
    cfg = _load(args)
    from .config import _SCHEMA  # value parsing follows the schema types
    key = train_mod.SWEEPABLE[args.param]
    parser_kind = _SCHEMA[key][1]
    values = []
    for chunk in args.values.split(","):
        chunk = chunk.strip()
        if chunk == "":
            continue
        if parser_kind is float:
            values.append(float(chunk))
        elif parser_kind is int:
            values.append(int(chunk))
        else:
            values.append(chunk)
    results = train_mod.sweep(cfg, args.param, values)
    print(json.dumps({str(v): r.summary for v, r in results.items()},
                     indent=2, sort_keys=True))
    return 0


def cmd_eval(args):
    cfg = _load(args)
    model = _model_with_weights(cfg, args.weights)
    _, _, test_ds = train_mod.load_splits(cfg)
    nat, rob = train_mod.evaluate(model, model.params, test_ds)
    print(json.dumps({"natural_acc": nat, "robust_acc": rob}, indent=2,
                     sort_keys=True))
    return 0


def cmd_landscape(args):
    cfg = _load(args)
    model = _model_with_weights(cfg, args.weights)
    _, _, test_ds = train_mod.load_splits(cfg)
    if not 0 <= args.index < len(test_ds):
        raise ConfigError(f"--index {args.index} outside test set of "
                          f"{len(test_ds)} examples")
    x = test_ds.x[args.index]
    y = int(test_ds.y[args.index])
    x_adv = attacks.pgd_eval_attack(model, model.params, x[None],
                                    np.array([y]))[0]
    adv_dir = x_adv - x
    if not np.any(adv_dir):
        # attack did not move: fall back to the loss gradient direction
        adv_dir = ad.input_grads(model.graph, model.params, x[None],
                                 np.array([y]))[0]
    ls = attacks.loss_landscape(model, model.params, x, y, adv_dir,
                                grid_n=args.grid_n, extent=args.extent,
                                rng=np.random.default_rng(cfg.seed))
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = os.path.join(cfg.out_dir, f"landscape_{args.index}.csv")
    attacks.write_landscape_csv(out, ls)
    print(out)
    return 0


def cmd_stats(args):
    cfg = _load(args)
    model = _model_with_weights(cfg, args.weights)
    train_ds, _, test_ds = train_mod.load_splits(cfg)
    from .data import Dataset
    probe_n = min(cfg.probe_n, len(train_ds))
    probe = Dataset(train_ds.x[:probe_n], train_ds.y[:probe_n])
    mu, sigma2, r, werr, g0, g1 = train_mod.probe_stats(
        model, model.params, probe, cfg, epoch=0)
    report = {"mu": mu, "sigma2": sigma2, "pearson_r": r,
              "weight_err_pct": werr, "gamma0": g0, "gamma1": g1}
    if args.rho_n > 0:
        n = min(args.rho_n, len(test_ds))
        rho = attacks.rho_metric(model, model.params, test_ds.x[:n],
                                 test_ds.y[:n])
        report["rho"] = rho.rho
        report["rho_converged_frac"] = rho.converged_frac
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "landscape": cmd_landscape,
    "stats": cmd_stats,
}


def _classify(exc):
    if isinstance(exc, TrainError):
        return _classify(exc.__cause__) if exc.__cause__ is not None else EXIT_OTHER
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataFormatError):
        return EXIT_DATA
    if isinstance(exc, (ad.GraphError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return EXIT_OTHER


def main(argv=None):
    logging.basicConfig(level=os.environ.get("ATLAB_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single funnel to exit codes
        code = _classify(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
