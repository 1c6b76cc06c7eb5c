"""Command-line interface: ``mcl-forge {gen,train,eval,probe,curves}``.

Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.
"""

import argparse
import os
import sys

import numpy as np

from . import data
from .engine import TrainConfig, train, write_metrics_log
from .errors import ConfigError, MCLError
from .metrics import evaluate, export_curves, knn_probe, parse_subsets, probe_csv, reports_csv, subset_key
from .network import VARIANTS, build_ensemble, load_checkpoint, save_checkpoint

PRESETS = {"complementary": data.complementary_preset, "fast-modality": data.fast_modality_preset}


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _on_off(text):
    t = str(text).strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def read_config_file(path):
    """Flat ``key=value`` lines; ``#`` starts a comment. Keys use flag names without dashes."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _add_train_flags(p):
    p.add_argument("--variant", choices=VARIANTS, default="dmcl")
    p.add_argument("--t", dest="temperature", type=float, default=2.0, help="distillation temperature T")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="distillation weight in [0, 1]")
    p.add_argument("--beta", type=float, default=0.75, help="CMCL uniform-loss weight")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--student-temperature", dest="student_temperature_on", type=_on_off, default=True)
    p.add_argument("--t-squared", dest="t_squared", type=_on_off, default=False)
    p.add_argument("--normalization", choices=("assigned", "batch"), default="assigned")
    p.add_argument("--eval-every", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="mcl-forge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic multimodal dataset")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--m", type=int, default=3)
    g.add_argument("--c", type=int, default=6)
    g.add_argument("--dims", type=_int_list, default=None, help="one width per modality (default 16 each)")
    g.add_argument("--n-per-class", type=int, default=125)
    g.add_argument("--separability", default="1.0",
                   help="single value, or M rows of C values: '1,0.25;0.25,1'")
    g.add_argument("--noise-sigma", type=float, default=1.0)
    g.add_argument("--radius", type=float, default=3.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)

    t = sub.add_parser("train", help="train an ensemble")
    t.add_argument("--config", help="key=value file supplying defaults")
    t.add_argument("--dataset")
    t.add_argument("--hidden", type=_int_list, default=[64])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--subsets", default=None, help="';'-separated modality subsets, e.g. '0;1;2;0,1,2'")
    t.add_argument("--out-dir", default="run")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--subsets", default=None)
    e.add_argument("-o", "--output", default=None, help="report path stem (writes .txt and .csv)")

    pr = sub.add_parser("probe", help="kNN accuracy on random untrained features")
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--k", type=_int_list, default=[1, 5, 10, 50])
    pr.add_argument("--hidden", type=_int_list, default=[64])
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("-o", "--output", default=None)

    cu = sub.add_parser("curves", help="export loss / winner-fraction curves from a metrics log")
    cu.add_argument("--log", required=True)
    cu.add_argument("-o", "--output", required=True)
    cu.add_argument("--smooth", type=int, default=0, help="trailing-mean window (0 = off)")
    return parser


def _separability(text, M, C):
    rows = [r for r in text.split(";") if r.strip()]
    try:
        values = [[float(v) for v in r.split(",")] for r in rows]
    except ValueError:
        raise UsageError(f"bad --separability {text!r}")
    if len(values) == 1 and len(values[0]) == 1:
        return np.full((M, C), values[0][0])
    arr = np.array(values) if all(len(r) == len(values[0]) for r in values) else None
    if arr is None or arr.shape != (M, C):
        raise UsageError(f"--separability must be one value or {M} rows of {C} values")
    return arr


def cmd_gen(args):
    if args.preset:
        ds = PRESETS[args.preset](M=args.m, C=args.c, seed=args.seed, n_per_class=args.n_per_class,
                                  noise_sigma=args.noise_sigma, radius=args.radius,
                                  **({"dim": args.dims[0]} if args.dims else {}))
    else:
        dims = args.dims or [16] * args.m
        if len(dims) == 1:
            dims = dims * args.m
        profile = data.SeparabilityProfile(_separability(args.separability, args.m, args.c),
                                           noise_sigma=args.noise_sigma, radius=args.radius)
        ds = data.generate(args.m, args.c, dims, args.n_per_class, profile, args.seed)
    data.save(ds, args.output)
    print(f"M={ds.M} C={ds.C} N={ds.N} dims={','.join(map(str, ds.dims))} seed={args.seed} -> {args.output}")
    return 0


def _subsets(text):
    return parse_subsets(text) if text else None


def _write_reports(stem, reports):
    with open(stem + ".txt", "w") as fh:
        fh.write(reports[-1].to_text())
    with open(stem + ".csv", "w") as fh:
        fh.write(reports_csv(reports))


def cmd_train(args):
    if not args.dataset:
        raise UsageError("train requires --dataset (flag or config file)")
    config = TrainConfig(
        variant=args.variant,
        temperature=args.temperature,
        lam=args.lam,
        beta=args.beta,
        lr=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        steps=args.steps,
        seed=args.seed,
        student_temperature_on=args.student_temperature_on,
        t_squared=args.t_squared,
        eval_every=args.eval_every,
        normalization=args.normalization,
    )
    try:
        config.validate()
    except ConfigError as exc:
        raise UsageError(str(exc))
    ds = data.load(args.dataset)
    ensemble = build_ensemble(ds.dims, ds.C, tuple(args.hidden), args.variant, args.seed)
    result = train(ensemble, ds, config, _subsets(args.subsets))
    os.makedirs(args.out_dir, exist_ok=True)
    save_checkpoint(ensemble, os.path.join(args.out_dir, "checkpoint.mclf"))
    write_metrics_log(os.path.join(args.out_dir, "metrics.csv"), result.outcomes, config)
    _write_reports(os.path.join(args.out_dir, "report"), result.reports)
    print(result.reports[-1].summary())
    wf = result.reports[-1].winner_fraction
    print("winner fraction " + " ".join(f"m{m}={w:.3f}" for m, w in enumerate(wf)))
    return 0


def cmd_eval(args):
    ds = data.load(args.dataset)
    ensemble = load_checkpoint(args.checkpoint)
    subsets = _subsets(args.subsets)
    report = evaluate(ensemble, ds, subsets)
    print(report.summary())
    shown = subsets if subsets is not None else list(report.subset_accuracies)
    for s in shown:
        key = tuple(sorted(set(s)))
        print(f"subset {subset_key(key)}: {report.subset_accuracies[key]:.4f}")
    if args.output:
        _write_reports(args.output, [report])
    return 0


def cmd_probe(args):
    ds = data.load(args.dataset)
    ensemble = build_ensemble(ds.dims, ds.C, tuple(args.hidden), "independent", args.seed)
    try:
        table = knn_probe(ensemble, ds, args.k)
    except ConfigError as exc:
        raise UsageError(str(exc))
    text = probe_csv(table, args.k)
    sys.stdout.write(text)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    return 0


def cmd_curves(args):
    rows = export_curves(args.log, args.output, args.smooth or None)
    print(f"wrote {len(rows)} rows -> {args.output}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe, "curves": cmd_curves}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and argv[0] == "train" and "--config" in argv[1:]:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv[1:])
        try:
            defaults = read_config_file(known.config)
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 1
        except UsageError as exc:
            print(f"usage error: {exc}", file=sys.stderr)
            return 2
        train_parser = parser._subparsers._group_actions[0].choices["train"]
        by_dest = {a.dest: a for a in train_parser._actions}
        converted = {}
        for key, value in defaults.items():
            action = by_dest.get(key)
            if action is None:
                print(f"usage error: unknown config key {key!r}", file=sys.stderr)
                return 2
            try:
                converted[key] = action.type(value) if action.type else value
            except (argparse.ArgumentTypeError, ValueError) as exc:
                print(f"usage error: config key {key}: {exc}", file=sys.stderr)
                return 2
            if action.choices is not None and converted[key] not in action.choices:
                print(f"usage error: config key {key}: {value!r} not in {list(action.choices)}", file=sys.stderr)
                return 2
        train_parser.set_defaults(**converted)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, MCLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
