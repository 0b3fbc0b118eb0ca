"""``arft`` command line: analyze, gen-synth, run, evaluate, ablate, sweep.

Settings come from an optional JSON config (``--config``); any flag given
on the command line overrides the matching config key.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

from . import __version__
from . import data as D
from . import experiment as X
from .errors import ArftError, ConfigError

# flag -> (section, key, type); dest is derived from the flag name
OVERRIDES = [
    ("--d-token", "model", "d_token", int),
    ("--n-heads", "model", "n_heads", int),
    ("--n-layers", "model", "n_layers", int),
    ("--ffn-hidden-factor", "model", "ffn_hidden_factor", float),
    ("--dropout", "model", "dropout_rate", float),
    ("--gamma", "loss", "gamma", float),
    ("--alpha", "loss", "alpha", float),
    ("--lambda-max", "loss", "lambda_max", float),
    ("--lambda-steepness", "loss", "lambda_steepness", float),
    ("--sigma-policy", "loss", "sigma_policy", str),
    ("--sigma", "loss", "sigma", float),
    ("--mmd-repr", "loss", "mmd_repr", str),
    ("--epochs", "train", "epochs", int),
    ("--batch-source", "train", "batch_source", int),
    ("--batch-target", "train", "batch_target", int),
    ("--lr0", "train", "lr0", float),
    ("--lr-decay", "train", "lr_decay_per_epoch", float),
    ("--momentum", "train", "momentum", float),
    ("--weight-decay", "train", "weight_decay", float),
    ("--label-column", "data", "label_column", str),
    ("--variant", "experiment", "variant", str),
    ("--threshold", "experiment", "threshold", float),
    ("--workers", "experiment", "workers", int),
]


def _dest(flag):
    return flag.lstrip("-").replace("-", "_")


def _seed_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def _add_experiment_args(p, single_group=True):
    p.add_argument("--config", help="JSON config or a previous manifest.json")
    if single_group:
        p.add_argument("--source", action="append", default=[], help="labeled source CSV (repeat for multi-source)")
        p.add_argument("--target", help="unlabeled target CSV")
        p.add_argument("--truth", help="target truth CSV; triggers the evaluate step after prediction")
        p.add_argument("--name", help="group name used in tables")
    p.add_argument("--seeds", type=_seed_list, help="e.g. 0,1,2,3,4")
    p.add_argument("--no-dropout", action="store_true", help="train with dropout disabled")
    p.add_argument("--no-checkpoints", action="store_true")
    for flag, _, _, typ in OVERRIDES:
        p.add_argument(flag, type=typ, dest=_dest(flag))
    p.add_argument("--out", required=True, help="output directory")


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def config_from_args(args):
    """Resolve defaults < config file < flags into one validated config."""
    override = {}
    for flag, section, key, _ in OVERRIDES:
        val = getattr(args, _dest(flag), None)
        if val is not None:
            override.setdefault(section, {})[key] = val
    if getattr(args, "seeds", None):
        override.setdefault("experiment", {})["seeds"] = args.seeds
    if getattr(args, "no_dropout", False):
        override.setdefault("train", {})["dropout_enabled"] = False
    if getattr(args, "no_checkpoints", False):
        override.setdefault("experiment", {})["save_checkpoints"] = False
    if getattr(args, "source", None) or getattr(args, "target", None):
        if not args.source or not args.target:
            raise ConfigError("--source and --target must be given together")
        group = {"sources": args.source, "target": args.target}
        if args.truth:
            group["truth"] = args.truth
        if args.name:
            group["name"] = args.name
        override["groups"] = [group]
    base = _load_json(args.config) if args.config else None
    return X.resolve_config(base, override)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_analyze(args):
    ds = D.load_csv(args.dataset, label_column=args.label_column)
    report = D.correlation_report(ds, rho_abs_min=args.rho_min, alpha=args.alpha)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "correlations.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(args.out, "correlations.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    print(report.summary_line())
    return 0


def cmd_gen_synth(args):
    cfg = D.SynthConfig(n_source=args.n_source, n_target=args.n_target, p=args.p,
                        positive_rate=args.positive_rate, shift_strength=args.shift_strength,
                        seed=args.seed, separation=args.separation)
    source, target = D.synth_generate(cfg)
    os.makedirs(args.out, exist_ok=True)
    D.write_csv(source, os.path.join(args.out, "source.csv"))
    D.write_csv(target, os.path.join(args.out, "target.csv"), include_labels=False)
    X.write_truth(os.path.join(args.out, "target_truth.csv"), target.labels)
    meta = {"config": asdict(cfg), "source_positives": source.positives, "target_positives": target.positives,
            "version": __version__}
    with open(os.path.join(args.out, "synth.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {source.n} source rows ({source.positives} prone) and {target.n} target rows to {args.out}")
    return 0


def _print_manifests(manifests):
    evaluated = [m for m in manifests if m.reports]
    for m in manifests:
        print(f"{m.group} [{m.variant}] seeds={m.seeds} fingerprint={X.fingerprint(m.config)}")
    if evaluated:
        for variant in dict.fromkeys(m.variant for m in evaluated):
            ms = [m for m in evaluated if m.variant == variant]
            print(X.results_table(ms, title=f"variant {variant} (mean over seeds)"))


def cmd_run(args):
    cfg = config_from_args(args)
    manifests = X.run(cfg, args.out)
    _print_manifests(manifests)
    return 0


def cmd_evaluate(args):
    """Join existing predictions with truth; usable on any finished run directory."""
    man_path = os.path.join(args.run_dir, "manifest.json")
    man = _load_json(man_path)
    seeds = man["seeds"]
    reports = X.evaluate_group(args.run_dir, args.truth, man["group"], man["variant"], seeds,
                               man.get("config_fingerprint", ""))
    manifest = X.RunManifest(man["config"], man["group"], man["variant"], seeds,
                             version=man.get("version", __version__), cells=man.get("cells", []),
                             reports=reports)
    manifest.write(args.run_dir)
    print(X.results_table([manifest], title=f"{man['group']} [{man['variant']}]"))
    return 0


def cmd_ablate(args):
    cfg = config_from_args(args)
    _, text = X.ablate(cfg, args.out)
    print(text)
    return 0


def cmd_sweep(args):
    cfg = config_from_args(args)
    _, text = X.sweep(cfg, args.axis, args.out)
    print(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="arft", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"arft {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="Spearman correlation report for one dataset")
    p.add_argument("dataset")
    p.add_argument("--label-column", default=D.DEFAULT_LABEL_COLUMN)
    p.add_argument("--rho-min", type=float, default=0.3)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gen-synth", help="write a synthetic source/target pair")
    defaults = D.SynthConfig()
    p.add_argument("--n-source", type=int, default=defaults.n_source)
    p.add_argument("--n-target", type=int, default=defaults.n_target)
    p.add_argument("--p", type=int, default=defaults.p)
    p.add_argument("--positive-rate", type=float, default=defaults.positive_rate)
    p.add_argument("--shift-strength", type=float, default=defaults.shift_strength)
    p.add_argument("--separation", type=float, default=defaults.separation)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("run", help="train and predict for each group, variant and seed")
    _add_experiment_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="join a run directory's predictions with target truth")
    p.add_argument("run_dir", help="directory holding manifest.json and predictions_seed*.csv")
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="baseline, +focal, +attention and full model on shared seeds")
    _add_experiment_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over attention heads or focal gamma")
    p.add_argument("axis", choices=sorted(X.SWEEP_AXES))
    _add_experiment_args(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArftError as exc:
        print(f"arft {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"arft {args.command}: io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
