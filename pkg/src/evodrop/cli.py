"""Command-line entry point.

Verbs: verify, train-shallow, train-deep, compare, gen-data.  Run
``evodrop <verb> --help`` for the flags of each verb.

Config files
------------
``--config FILE`` reads an INI file.  Keys are flag names without the
leading dashes (``eval-every = 500``).  Values in ``[common]`` apply to
every verb; values in a section named after the verb (``[train-shallow]``,
``[compare-deep]``) apply to that verb only and win over ``[common]``.
Flags given on the command line win over both.  Boolean flags take
``true``/``false``.  Example::

    [common]
    seed = 3
    out = runs/a

    [train-shallow]
    mode = d-dropout
    steps = 20000
    grid = true
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np

from .datasets import gen_synthetic, read_idx, read_sparse_text, write_sparse_text
from .experiments import compare_deep, compare_shallow
from .linear import DROPOUT_MODES, STEP_SIZE_GRID, DropoutConfig, StepSizeSchedule, train_shallow
from .mlp import LR_GRID, EpochSchedule, build_net, save_checkpoint, train_deep
from .trace import Stopwatch, write_summary
from .verify import FAULTS, Verifier, write_report

log = logging.getLogger("evodrop")

MODE_ALIASES = {
    "s-dropout": "standard",
    "d-dropout": "data-dependent",
    "e-dropout": "evolutional",
    "u-dropout": "uniform",
}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class ConfigError(ValueError):
    pass


def _mode(value):
    return MODE_ALIASES.get(value, value)


def _trials(value):
    """``--k``: an integer count, or a fraction of the dimension when it contains a dot."""
    return float(value) if "." in value else int(value)


def _floats(value):
    return tuple(float(v) for v in value.split(",") if v.strip())


def _ints(value):
    return tuple(int(v) for v in value.split(",") if v.strip())


def _bool(value):
    if isinstance(value, bool):
        return value
    low = str(value).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


# -- argument groups -------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, help="random seed (required, here or in the config file)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    p.add_argument("--config", type=Path, help="INI config file; flags override it")
    p.add_argument("-v", "--verbose", action="store_true")


def _shallow_data(p):
    g = p.add_argument_group("data (sparse text files, or a synthetic set when --data is absent)")
    g.add_argument("--data", type=Path, help="training file in sparse text format")
    g.add_argument("--test", type=Path, help="optional test file in sparse text format")
    g.add_argument("--n-features", type=int, help="declared dimension (default: max index seen)")
    g.add_argument("--synthetic-d", type=int, default=100)
    g.add_argument("--synthetic-n", type=int, default=10000)
    g.add_argument("--moment-range", type=_floats, default=(1e-2, 1e2),
                   help="log-uniform second moment range lo,hi (default 0.01,100)")
    g.add_argument("--label-noise", type=float, default=0.1)
    g.add_argument("--data-seed", type=int, help="seed of the synthetic set (default: --seed)")


def _shallow_train(p, with_mode=True):
    g = p.add_argument_group("training")
    if with_mode:
        g.add_argument("--mode", type=_mode, default="data-dependent",
                       choices=DROPOUT_MODES, help="none, s-dropout, d-dropout or uniform")
    g.add_argument("--delta", type=float, default=0.5, help="standard dropout drop rate")
    g.add_argument("--k", type=_trials, default=0.5, help="multinomial trials (int) or fraction of d")
    g.add_argument("--lr", type=float, default=0.01, help="constant step size")
    g.add_argument("--decay-at", type=_ints, default=(), help="steps where the step size is decayed")
    g.add_argument("--decay-factor", type=_floats, default=(), help="factor per decay step")
    g.add_argument("--grid", type=_bool, nargs="?", const=True, default=False,
                   help="try every step size in %s and keep the best" % (STEP_SIZE_GRID,))
    g.add_argument("--steps", type=int, default=10000)
    g.add_argument("--eval-every", type=int, default=1000)
    g.add_argument("--report", choices=("average", "last"), default="average")
    g.add_argument("--n-seeds", type=int, default=1, help="run seeds seed..seed+n-1")
    g.add_argument("--timing", type=_bool, nargs="?", const=True, default=False,
                   help="fill elapsed_ms in traces (breaks byte reproducibility)")


def _deep_data(p):
    g = p.add_argument_group("data (IDX files)")
    g.add_argument("--mnist-dir", type=Path, help="directory holding the four standard IDX files")
    g.add_argument("--train-images", type=Path)
    g.add_argument("--train-labels", type=Path)
    g.add_argument("--test-images", type=Path)
    g.add_argument("--test-labels", type=Path)
    g.add_argument("--subset", type=int, help="use only the first N training examples")


def _deep_train(p, with_mode=True):
    g = p.add_argument_group("training")
    if with_mode:
        g.add_argument("--mode", type=_mode, default="evolutional",
                       choices=("none", "standard", "uniform", "evolutional"),
                       help="none, s-dropout, uniform or e-dropout")
    g.add_argument("--hidden", type=_ints, default=(150,), help="hidden widths, comma separated")
    g.add_argument("--delta", type=float, default=0.5)
    g.add_argument("--k", type=_trials, default=0.5)
    g.add_argument("--lr", type=float, default=0.1)
    g.add_argument("--lr-drop-epoch", type=int, help="multiply the learning rate by 0.1 from this epoch")
    g.add_argument("--grid", type=_bool, nargs="?", const=True, default=False,
                   help="try every learning rate in %s and keep the best" % (LR_GRID,))
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=128)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--init-std", type=float, default=0.01)
    g.add_argument("--eval-every", type=int, default=1)
    g.add_argument("--n-seeds", type=int, default=1)
    g.add_argument("--timing", type=_bool, nargs="?", const=True, default=False)


def build_parser():
    parser = argparse.ArgumentParser(prog="evodrop", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the closed-form-versus-oracle checks")
    _common(p)
    p.add_argument("--trials", type=int, default=200_000, help="Monte Carlo draws per check")
    p.add_argument("--inject-fault", choices=FAULTS, help="test hook: corrupt a closed form")
    p.set_defaults(func=cmd_verify, section="verify")

    p = sub.add_parser("train-shallow", help="SGD logistic regression with input dropout")
    _common(p)
    _shallow_data(p)
    _shallow_train(p)
    p.add_argument("--compare", type=_bool, nargs="?", const=True, default=False,
                   help="run s-dropout and d-dropout side by side instead of --mode")
    p.set_defaults(func=cmd_train_shallow, section="train-shallow")

    p = sub.add_parser("train-deep", help="dense ReLU net with hidden-layer dropout")
    _common(p)
    _deep_data(p)
    _deep_train(p)
    p.add_argument("--compare", type=_bool, nargs="?", const=True, default=False,
                   help="run s-dropout and e-dropout side by side instead of --mode")
    p.set_defaults(func=cmd_train_deep, section="train-deep")

    p = sub.add_parser("compare", help="side-by-side comparison of dropout laws")
    csub = p.add_subparsers(dest="task", required=True)
    q = csub.add_parser("shallow", help="s-dropout vs d-dropout")
    _common(q)
    _shallow_data(q)
    _shallow_train(q, with_mode=False)
    q.set_defaults(func=cmd_compare_shallow, section="compare-shallow")
    q = csub.add_parser("deep", help="s-dropout vs e-dropout")
    _common(q)
    _deep_data(q)
    _deep_train(q, with_mode=False)
    q.set_defaults(func=cmd_compare_deep, section="compare-deep")

    p = sub.add_parser("gen-data", help="write a synthetic set in sparse text format")
    _common(p)
    p.add_argument("--d", type=int, default=100)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--moment-range", type=_floats, default=(1e-2, 1e2))
    p.add_argument("--moments", type=_floats, help="explicit second moments, comma separated")
    p.add_argument("--label-noise", type=float, default=0.1)
    p.add_argument("--file", default="synthetic.txt", help="file name inside --out")
    p.set_defaults(func=cmd_gen_data, section="gen-data")
    return parser


def _subparser_for(parser, args):
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = action.choices[args.command]
    if args.command == "compare":
        inner = next(a for a in sp._actions if isinstance(a, argparse._SubParsersAction))
        sp = inner.choices[args.task]
    return sp


def parse_args(argv=None):
    """Parse flags, folding in ``--config`` values that no flag overrides."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            parser.error(f"cannot read config file {args.config}")
        values = {}
        for section in ("common", args.section):
            if cp.has_section(section):
                values.update(cp.items(section))
        sp = _subparser_for(parser, args)
        by_dest = {a.option_strings[0].lstrip("-"): a for a in sp._actions
                   if a.option_strings and a.option_strings[0].startswith("--")}
        defaults = {}
        for key, raw in values.items():
            action = by_dest.get(key)
            if action is None:
                parser.error(f"{args.config}: unknown key {key!r}")
            try:
                value = action.type(raw) if action.type is not None else raw
            except (ValueError, ConfigError) as exc:
                parser.error(f"{args.config}: bad value for {key}: {exc}")
            if action.choices is not None and value not in action.choices:
                parser.error(f"{args.config}: {key} must be one of {list(action.choices)}")
            defaults[action.dest] = value
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.seed is None:
        parser.error("--seed is required (no wall-clock seeding)")
    return args


# -- data resolution ---------------------------------------------------------

def _shallow_sets(args):
    if args.data is not None:
        train = read_sparse_text(args.data, n_features=args.n_features)
        test = None
        if args.test is not None:
            test = read_sparse_text(args.test, n_features=train.d)
        return train, test
    seed = args.seed if args.data_seed is None else args.data_seed
    lo, hi = args.moment_range
    return gen_synthetic(args.synthetic_d, args.synthetic_n, ("log-uniform", lo, hi),
                         args.label_noise, seed), None


def _idx_paths(args, split):
    images, labels = getattr(args, f"{split}_images"), getattr(args, f"{split}_labels")
    if images is None and args.mnist_dir is not None:
        images, labels = (args.mnist_dir / f for f in MNIST_FILES[split])
    return images, labels


def _deep_sets(args):
    images, labels = _idx_paths(args, "train")
    if images is None or labels is None:
        raise ConfigError("training data needs --mnist-dir or --train-images and --train-labels")
    train = read_idx(images, labels)
    if args.subset is not None:
        train = train.subset(np.arange(min(args.subset, len(train))))
    images, labels = _idx_paths(args, "test")
    test = read_idx(images, labels) if images is not None and Path(images).exists() else None
    return train, test


def _seeds(args):
    return tuple(range(args.seed, args.seed + args.n_seeds))


# -- verbs -------------------------------------------------------------------

def cmd_verify(args):
    results = Verifier(seed=args.seed, trials=args.trials, fault=args.inject_fault).run()
    lines = write_report(results, args.out / "report.txt", args.out / "report.json")
    for line in lines:
        print(line)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
    return 1 if failed else 0


def _shallow_schedule(args, eta):
    if args.decay_at:
        return StepSizeSchedule(eta, "piecewise", args.decay_at, args.decay_factor)
    return StepSizeSchedule(eta)


def cmd_train_shallow(args):
    if args.compare:
        return cmd_compare_shallow(args)
    clock = Stopwatch()
    train, test = _shallow_sets(args)
    config = DropoutConfig(args.mode, delta=args.delta, k=args.k)
    grid = STEP_SIZE_GRID if args.grid else (args.lr,)
    finals = {}
    runs = {}
    for eta in grid:
        runs[eta] = [train_shallow(train, config, _shallow_schedule(args, eta), args.steps, args.eval_every,
                                   rng=seed, test=test, report=args.report, timing=args.timing)
                     for seed in _seeds(args)]
        finals[eta] = float(np.median([r.trace.rows[-1].train_loss for r in runs[eta]]))
    best = min(grid, key=lambda eta: (finals[eta], -eta))
    for seed, result in zip(_seeds(args), runs[best]):
        name = "trace.csv" if args.n_seeds == 1 else f"trace-seed{seed}.csv"
        result.trace.to_csv(args.out / name, timing=args.timing)
    last = runs[best][0].trace.rows[-1]
    dist = runs[best][0].distribution
    write_summary(args.out / "summary.json", {
        "command": "train-shallow", "dataset": train.name, "d": train.d, "n": len(train),
        "mode": args.mode, "delta": args.delta, "k": None if dist is None else dist.k,
        "steps": args.steps, "eval_every": args.eval_every, "seeds": list(_seeds(args)),
        "lr": best, "grid_final_train_loss": {repr(e): v for e, v in finals.items()},
        "final_train_loss": last.train_loss, "final_train_err": last.train_err,
        "final_test_err": last.test_err, "wall_time_s": clock.elapsed_ms() / 1000.0,
    })
    print(f"lr={best} final train loss {last.train_loss:.6g} err {last.train_err:.4g}")
    return 0


def _write_comparison(args, comp, command, dataset):
    for method, by_lr in comp.runs.items():
        best = comp.best_lr[method]
        for seed, trace in by_lr[best].items():
            suffix = "" if args.n_seeds == 1 else f"-seed{seed}"
            trace.to_csv(args.out / f"trace-{method}{suffix}.csv", timing=args.timing)
    summary = comp.summary()
    summary.update(command=command, dataset=dataset, seeds=list(comp.seeds),
                   grid_final={m: {repr(lr): [getattr(t.rows[-1], comp.column) for t in runs.values()]
                                   for lr, runs in by_lr.items()} for m, by_lr in comp.runs.items()})
    write_summary(args.out / "summary.json", summary)
    print(f"{comp.proposed} vs {comp.baseline}: median steps ratio {summary['median_steps_ratio']:.4g} "
          f"(best lr {comp.best_lr})")
    return summary


def cmd_compare_shallow(args):
    clock = Stopwatch()
    train, test = _shallow_sets(args)
    grid = STEP_SIZE_GRID if args.grid else (args.lr,)
    comp = compare_shallow(train, args.steps, args.eval_every, _seeds(args), args.delta, grid, test)
    summary = _write_comparison(args, comp, "compare-shallow", train.name)
    write_summary(args.out / "summary.json", dict(summary, wall_time_s=clock.elapsed_ms() / 1000.0))
    return 0


def cmd_train_deep(args):
    if args.compare:
        return cmd_compare_deep(args)
    clock = Stopwatch()
    train, test = _deep_sets(args)
    n_classes = int(train.y.max()) + 1 if test is None else int(max(train.y.max(), test.y.max())) + 1
    sizes = (train.d,) + tuple(args.hidden) + (n_classes,)
    mode = None if args.mode == "none" else args.mode
    grid = LR_GRID if args.grid else (args.lr,)
    results = {}
    for lr in grid:
        results[lr] = []
        for seed in _seeds(args):
            net = build_net(sizes, mode, args.delta, args.k, init_std=args.init_std, rng=[seed, 0])
            _, trace = train_deep(net, train, args.epochs, args.batch_size,
                                  EpochSchedule(lr, args.lr_drop_epoch), args.momentum,
                                  rng=[seed, 1], test=test, eval_every=args.eval_every, timing=args.timing)
            results[lr].append((seed, net, trace))
    finals = {lr: float(np.median([t.rows[-1].train_err for _, _, t in runs])) for lr, runs in results.items()}
    best = min(grid, key=lambda lr: (finals[lr], -lr))
    for seed, net, trace in results[best]:
        suffix = "" if args.n_seeds == 1 else f"-seed{seed}"
        trace.to_csv(args.out / f"trace{suffix}.csv", timing=args.timing)
        save_checkpoint(net, args.out / f"checkpoint{suffix}.bin")
    last = results[best][0][2].rows[-1]
    write_summary(args.out / "summary.json", {
        "command": "train-deep", "sizes": list(sizes), "mode": args.mode, "delta": args.delta,
        "k": args.k, "epochs": args.epochs, "batch_size": args.batch_size, "momentum": args.momentum,
        "init_std": args.init_std, "n_train": len(train), "seeds": list(_seeds(args)), "lr": best,
        "grid_final_train_err": {repr(lr): v for lr, v in finals.items()},
        "final_train_err": last.train_err, "final_test_err": last.test_err,
        "wall_time_s": clock.elapsed_ms() / 1000.0,
    })
    print(f"lr={best} final train err {last.train_err:.4g} test err {last.test_err}")
    return 0


def cmd_compare_deep(args):
    clock = Stopwatch()
    train, test = _deep_sets(args)
    sizes = (train.d,) + tuple(args.hidden) + (int(train.y.max()) + 1,)
    grid = LR_GRID if args.grid else (args.lr,)
    comp = compare_deep(train, test, args.epochs, _seeds(args), sizes, args.delta, args.k, grid,
                        args.batch_size, args.momentum, args.init_std)
    summary = _write_comparison(args, comp, "compare-deep", str(args.mnist_dir or args.train_images))
    write_summary(args.out / "summary.json", dict(summary, wall_time_s=clock.elapsed_ms() / 1000.0))
    return 0


def cmd_gen_data(args):
    profile = args.moments if args.moments is not None else ("log-uniform", *args.moment_range)
    data = gen_synthetic(args.d, args.n, profile, args.label_noise, args.seed)
    path = args.out / args.file
    write_sparse_text(data, path)
    write_summary(args.out / "gen-data.json", {"file": path.name, "d": args.d, "n": args.n, "seed": args.seed,
                                               "moments": data.info["moments"],
                                               "w_true": data.info["w_true"]})
    print(f"wrote {path}")
    return 0


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"evodrop {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
