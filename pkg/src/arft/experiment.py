"""Experiment orchestration behind the ``arft`` command line.

A run is described by one JSON-compatible config document (see
``DEFAULT_CONFIG``); every hyperparameter appears explicitly in the
resolved snapshot written to each manifest, so a manifest can be fed back
to ``run --config`` to reproduce its metrics.

Target truth is never touched by training or prediction: ``run_cell``
writes predictions, and ``evaluate_group`` joins them with a truth file.
"""

import copy
import csv
import hashlib
import io
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import data as D
from . import model as M
from . import train as T
from .errors import ConfigError, ParseError, SchemaError, StageError
from .evaluation import EvalReport, format_group_table
from .losses import FocalConfig, LossSchedule, MMDConfig

VARIANTS = ("arft", "baseline", "baseline+focal", "baseline+attent")
VARIANT_LABELS = {
    "baseline": "Baseline",
    "baseline+focal": "Baseline+Focal",
    "baseline+attent": "Baseline+attent",
    "arft": "Baseline+attent+Focal",
}
SWEEP_AXES = {
    "heads": [1, 2, 4, 8, 16, 32],
    "gamma": [1.0, 2.0, 3.0, 4.0, 5.0],
}
IMPV_FORMULA = "Impv. = (b - a) / a * 100%, a = Baseline Bal, b = variant Bal (same group, same seeds)"

DEFAULT_CONFIG = {
    "model": {
        "d_token": 32,
        "n_heads": 8,
        "n_layers": 3,
        "ffn_hidden_factor": 4.0 / 3.0,
        "dropout_rate": 0.1,
        "ln_eps": 1e-5,
    },
    "loss": {
        "gamma": 2.0,
        "alpha": 1.0,
        "lambda_max": 1.0,
        "lambda_steepness": 10.0,
        "sigma_policy": "median",
        "sigma": 1.0,
        "mmd_repr": "cls",
    },
    "train": {
        "epochs": 100,
        "batch_source": 64,
        "batch_target": 64,
        "lr0": 1e-3,
        "lr_decay_per_epoch": 0.98,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "dropout_enabled": True,
    },
    "data": {
        "label_column": D.DEFAULT_LABEL_COLUMN,
        "norm_eps": 1e-8,
        "schema": None,
    },
    "experiment": {
        "variant": "arft",
        "seeds": [0, 1, 2, 3, 4],
        "threshold": 0.5,
        "workers": 1,
        "save_checkpoints": True,
    },
    "groups": [],
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(*overrides):
    """Defaults deep-merged with each override in turn (later wins).

    A manifest document is accepted too; its ``config`` snapshot is used.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for ov in overrides:
        if not ov:
            continue
        if "manifest_version" in ov and "config" in ov:
            ov = ov["config"]
        unknown = set(ov) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for section, values in ov.items():
            if isinstance(DEFAULT_CONFIG[section], dict):
                bad = set(values) - set(DEFAULT_CONFIG[section])
                if bad:
                    raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
        cfg = _merge(cfg, ov)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    exp = cfg["experiment"]
    if exp["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {exp['variant']!r}")
    if not exp["seeds"]:
        raise ConfigError("seeds must be non-empty")
    for g in cfg["groups"]:
        if not g.get("sources"):
            raise ConfigError(f"group {g.get('name')!r} has no sources")
        if "target" not in g:
            raise ConfigError(f"group {g.get('name')!r} has no target")
        if os.path.abspath(g["target"]) in {os.path.abspath(s) for s in g["sources"]}:
            raise ConfigError(f"group {g.get('name')!r}: target is also a source")
    d = cfg["model"]["d_token"]
    if d % cfg["model"]["n_heads"]:
        raise ConfigError(f"n_heads={cfg['model']['n_heads']} does not divide d_token={d}")
    # construct the frozen configs once to surface range errors early
    _loss_configs(cfg, cfg["experiment"]["variant"])
    _train_config(cfg, exp["seeds"][0])


def fingerprint(cfg):
    blob = {k: v for k, v in cfg.items() if k not in ("groups",)}
    blob = {**blob, "experiment": {k: v for k, v in cfg["experiment"].items() if k not in ("seeds", "workers")}}
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:12]


def group_name(group):
    if group.get("name"):
        return group["name"]
    src = "".join(D._stem(s)[:1].upper() for s in group["sources"])
    return f"{src}=>{D._stem(group['target'])[:1].upper()}"


def _model_config(cfg, p, variant):
    m = cfg["model"]
    return M.ModelConfig(p=p, d_token=m["d_token"], n_heads=m["n_heads"], n_layers=m["n_layers"],
                         ffn_hidden_factor=m["ffn_hidden_factor"], dropout_rate=m["dropout_rate"],
                         ln_eps=m["ln_eps"], attention=variant in ("arft", "baseline+attent"))


def _loss_configs(cfg, variant):
    lc = cfg["loss"]
    gamma = lc["gamma"] if variant in ("arft", "baseline+focal") else 0.0
    focal = FocalConfig(gamma=gamma, alpha=lc["alpha"])
    mmd = MMDConfig(sigma_policy=lc["sigma_policy"], sigma=lc["sigma"], repr_choice=lc["mmd_repr"])
    sched = LossSchedule(lambda_max=lc["lambda_max"], steepness=lc["lambda_steepness"])
    return focal, mmd, sched


def _train_config(cfg, seed):
    return T.TrainConfig(seed=seed, **cfg["train"])


# ---------------------------------------------------------------------------
# IO helpers
# ---------------------------------------------------------------------------

def write_predictions(path, probs, labels):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "prob_prone", "pred"])
    for i, (p, y) in enumerate(zip(probs, labels)):
        w.writerow([i, repr(float(p)), int(y)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def read_labels(path, column):
    """Read ``row`` and ``column`` from a CSV; returns labels ordered by row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or column not in reader.fieldnames:
            raise SchemaError(f"{path}: column {column!r} missing")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                idx = int(rec["row"]) if "row" in rec else lineno - 2
                val = int(float(rec[column]))
            except (TypeError, ValueError):
                raise ParseError(f"{path}: row {lineno}: cannot parse {rec}") from None
            if val not in (0, 1):
                raise ParseError(f"{path}: row {lineno}: {column} must be 0/1, got {val}")
            rows.append((idx, val))
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise SchemaError(f"{path}: row indices are not 0..N-1")
    return np.array([r[1] for r in rows], dtype=np.int64)


def write_truth(path, labels):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "label"])
        for i, y in enumerate(labels):
            w.writerow([i, int(y)])


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# one (group, variant, seed) cell
# ---------------------------------------------------------------------------

def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def prepare_group(cfg, group):
    """Load, concatenate and jointly normalize; returns (source, target) without ROS."""
    dc = cfg["data"]
    sources = [_stage("load", D.load_csv, path, label_column=dc["label_column"]) for path in group["sources"]]
    source = _stage("concat", D.concat_projects, sources)
    target = _stage("load", D.load_csv, group["target"], label_column=None,
                    metric_columns=source.metric_names)
    if dc["schema"]:
        _stage("schema", D.validate_schema, source, dc["schema"])
    src_n, tgt_n, _ = _stage("normalize", D.global_normalize, source, target, dc["norm_eps"])
    return src_n, tgt_n


def run_cell(cfg, group, variant, seed, out_dir):
    """Train one seed of one variant and write predictions (never reads truth)."""
    source, target = prepare_group(cfg, group)
    balanced = _stage("oversample", D.random_oversample, source, np.random.default_rng((seed, 1)))
    mcfg = _model_config(cfg, source.p, variant)
    focal, mmd, sched = _loss_configs(cfg, variant)
    params, log = _stage("fit", T.fit, balanced, target, mcfg, _train_config(cfg, seed), focal, mmd, sched)
    logits = _stage("predict", T.logits_dataset, params, mcfg, target)
    probs = M.class_probabilities(logits)[:, 1]
    labels = (probs > cfg["experiment"]["threshold"]).astype(np.int64)
    os.makedirs(out_dir, exist_ok=True)
    write_predictions(os.path.join(out_dir, f"predictions_seed{seed}.csv"), probs, labels)
    _write_text(os.path.join(out_dir, f"training_log_seed{seed}.csv"), log.to_csv())
    if cfg["experiment"].get("save_checkpoints", True):
        M.save_checkpoint(os.path.join(out_dir, f"model_seed{seed}.npz"), params, mcfg)
    return {"seed": seed, "n_target": int(target.n), "predicted_positive": int(labels.sum())}


def _run_cell_star(args):
    return run_cell(*args)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    config: dict
    group: str
    variant: str
    seeds: list
    version: str = __version__
    cells: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    @property
    def aggregate(self):
        if not self.reports:
            return None
        agg = {}
        for key in ("pd", "pf", "bal"):
            vals = [getattr(r, key) for r in self.reports]
            agg[f"{key}_mean"] = sum(vals) / len(vals)
            agg[f"{key}_std"] = statistics.pstdev(vals) if len(vals) > 1 else 0.0
        return agg

    def to_dict(self):
        return {
            "manifest_version": 1,
            "tool": "arft",
            "version": self.version,
            "group": self.group,
            "variant": self.variant,
            "seeds": list(self.seeds),
            "config_fingerprint": fingerprint(self.config),
            "config": self.config,
            "cells": self.cells,
            "reports": [r.as_row() for r in self.reports],
            "aggregate": self.aggregate,
        }

    def write(self, out_dir):
        _write_text(os.path.join(out_dir, "manifest.json"), json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def metrics_csv(reports, group, variant):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "variant", "seed", "tp", "fn", "fp", "tn", "pd", "pf", "bal"])
    for r in reports:
        c = r.confusion
        w.writerow([group, variant, r.seed, c.tp, c.fn, c.fp, c.tn, repr(r.pd), repr(r.pf), repr(r.bal)])
    return buf.getvalue()


def evaluate_predictions(pred_path, truth_path, **meta):
    pred = read_labels(pred_path, "pred")
    truth = read_labels(truth_path, "label")
    return EvalReport.from_predictions(pred, truth, **meta)


def evaluate_group(out_dir, truth_path, group, variant, seeds, fp=""):
    """Join every seed's predictions in ``out_dir`` with the truth file."""
    reports = []
    for seed in seeds:
        path = os.path.join(out_dir, f"predictions_seed{seed}.csv")
        reports.append(_stage("evaluate", evaluate_predictions, path, truth_path,
                              experiment_id=group, config_fingerprint=fp, seed=seed))
    _write_text(os.path.join(out_dir, "metrics.csv"), metrics_csv(reports, group, variant))
    return reports


def _group_dir(out_dir, group, variant):
    safe = group_name(group).replace("=>", "_to_").replace("/", "_")
    return os.path.join(out_dir, safe, variant)


def run_grid(cfg, cells):
    """Execute ``[(cfg, group, variant, seed, dir), ...]`` sequentially or in a process pool."""
    workers = int(cfg["experiment"].get("workers", 1))
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell_star, cells))
    return [run_cell(*c) for c in cells]


def run(cfg, out_dir, variants=None):
    """Run every configured group for each variant; returns a list of RunManifests.

    Groups carrying a ``truth`` path are evaluated after all predictions
    are written.
    """
    if not cfg["groups"]:
        raise ConfigError("no experiment groups configured (give --source/--target or a config)")
    variants = variants or [cfg["experiment"]["variant"]]
    seeds = list(cfg["experiment"]["seeds"])
    cells = [(cfg, g, v, s, _group_dir(out_dir, g, v)) for g in cfg["groups"] for v in variants for s in seeds]
    results = run_grid(cfg, cells)
    manifests = []
    i = 0
    for g in cfg["groups"]:
        for v in variants:
            gdir = _group_dir(out_dir, g, v)
            snapshot = copy.deepcopy(cfg)
            snapshot["groups"] = [g]
            snapshot["experiment"]["variant"] = v
            man = RunManifest(snapshot, group_name(g), v, seeds, cells=results[i:i + len(seeds)])
            i += len(seeds)
            if g.get("truth"):
                man.reports = evaluate_group(gdir, g["truth"], group_name(g), v, seeds, fingerprint(snapshot))
            man.write(gdir)
            manifests.append(man)
    return manifests


def results_table(manifests, metrics=("pd", "pf", "bal"), title=None):
    groups = list(dict.fromkeys(m.group for m in manifests))
    rows = {}
    for key in metrics:
        vals = []
        for g in groups:
            m = next(m for m in manifests if m.group == g)
            agg = m.aggregate
            vals.append(agg[f"{key}_mean"] if agg else None)
        rows[key.upper() if key != "bal" else "Bal"] = vals
    return format_group_table(groups, rows, title=title)


def improvement(a, b):
    """(b - a) / a, the relative change of ``b`` over the reference ``a``."""
    if a == 0:
        return float("inf") if b > 0 else 0.0
    return (b - a) / a


def ablate(cfg, out_dir):
    """Run the four ablation variants with shared seeds and report Impv. over Baseline."""
    for g in cfg["groups"]:
        if not g.get("truth"):
            raise ConfigError(f"ablation needs a truth file for group {group_name(g)!r}")
    order = ["baseline", "baseline+focal", "baseline+attent", "arft"]
    manifests = run(cfg, out_dir, variants=order)
    groups = list(dict.fromkeys(m.group for m in manifests))
    bal = {(m.group, m.variant): m.aggregate["bal_mean"] for m in manifests}
    rows = {}
    for v in order:
        rows[VARIANT_LABELS[v]] = [bal[(g, v)] for g in groups]
        if v != "baseline":
            imps = [improvement(bal[(g, "baseline")], bal[(g, v)]) for g in groups]
            avg = improvement(sum(bal[(g, "baseline")] for g in groups) / len(groups),
                              sum(bal[(g, v)] for g in groups) / len(groups))
            rows[f"Impv. ({VARIANT_LABELS[v]})"] = [f"{100 * x:.3f}%" for x in imps] + [f"{100 * avg:.3f}%"]
    table = _ablation_table(groups, rows)
    text = IMPV_FORMULA + "\n" + table
    _write_text(os.path.join(out_dir, "ablation.txt"), text)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "variant", "bal_mean", "impv_vs_baseline"])
    for g in groups:
        for v in order:
            w.writerow([g, v, repr(bal[(g, v)]), repr(improvement(bal[(g, "baseline")], bal[(g, v)]))])
    _write_text(os.path.join(out_dir, "ablation.csv"), buf.getvalue())
    return manifests, text


def _ablation_table(groups, rows):
    # Impv. rows already carry their own Avg. cell, Bal rows get a computed mean
    fixed = {}
    for label, vals in rows.items():
        if label.startswith("Impv."):
            fixed[label] = vals
        else:
            fixed[label] = [f"{v:.3f}" for v in vals] + [f"{sum(vals) / len(vals):.3f}"]
    header = ["Group"] + groups + ["Avg."]
    body = [[k] + v for k, v in fixed.items()]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "-" * len(fmt(header))] + [fmt(r) for r in body]) + "\n"


def sweep_values(cfg, axis):
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    values = SWEEP_AXES[axis]
    if axis == "heads":
        d = cfg["model"]["d_token"]
        bad = [h for h in values if d % h]
        if bad:
            raise ConfigError(f"heads {bad} do not divide d_token={d}")
    return values


def sweep(cfg, axis, out_dir):
    """One run per axis value; returns (rows, text_table) with rows = |axis| x |groups|."""
    values = sweep_values(cfg, axis)
    for g in cfg["groups"]:
        if not g.get("truth"):
            raise ConfigError(f"sweep needs a truth file for group {group_name(g)!r}")
    rows = []
    for val in values:
        ov = {"model": {"n_heads": val}} if axis == "heads" else {"loss": {"gamma": val}}
        cell_cfg = resolve_config(cfg, ov)
        mans = run(cell_cfg, os.path.join(out_dir, f"{axis}={val:g}"))
        for m in mans:
            agg = m.aggregate
            rows.append({"axis": axis, "value": val, "group": m.group,
                         "bal_mean": agg["bal_mean"], "bal_std": agg["bal_std"]})
    groups = list(dict.fromkeys(r["group"] for r in rows))
    table_rows = {f"{axis}={v:g}": [next(r["bal_mean"] for r in rows if r["value"] == v and r["group"] == g)
                                    for g in groups] for v in values}
    text = format_group_table(groups, table_rows, title=f"Bal by {axis}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "group", "bal_mean", "bal_std"])
    for r in rows:
        w.writerow([r["axis"], f"{r['value']:g}", r["group"], repr(r["bal_mean"]), repr(r["bal_std"])])
    os.makedirs(out_dir, exist_ok=True)
    _write_text(os.path.join(out_dir, f"sweep_{axis}.csv"), buf.getvalue())
    _write_text(os.path.join(out_dir, f"sweep_{axis}.txt"), text)
    return rows, text
