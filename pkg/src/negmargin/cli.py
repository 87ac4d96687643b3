"""Command-line interface.

Every command that writes results takes ``--out DIR`` and echoes the
effective configuration to ``DIR/config.txt``. Exit codes:

    0  success
    1  other library error
    2  invalid configuration or arguments
    3  I/O error (missing or unwritable file)
    4  malformed input file
    5  numerical failure (non-finite loss or gradient)
    6  proposition check disagreement
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    CONFUSION_FIELDS,
    HISTOGRAM_FIELDS,
    VARIANCE_FIELDS,
    AnalysisReport,
    angular_histogram,
    check_proposition,
    confusion_profile,
    export_embeddings,
    histogram_rows,
    instance_from_reports,
    random_instance,
    variance_report,
)
from .config import SEED_ENV, RunConfig, load_config, parse_config, parse_grid, prepare_splits, sweep_bundle
from .data import digit_images, write_idx
from .errors import ConfigError, ContractError, FormatError, NegMarginError, NumericError
from .model import load_checkpoint, save_checkpoint
from .numerics import make_rng
from .pipeline import SWEEP_FIELDS, finetune_eval, pretrain, sweep_margin, write_rows, write_training_log

log = logging.getLogger("negmargin")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC, EXIT_DISAGREE = range(7)

PROPOSITION_FIELDS = ["m1", "m2", "p_same", "threshold", "r", "t", "predicted",
                      "phi_novel_m1", "phi_novel_m2", "direct"]
PS_FIELDS = ["margin", "seed", "novel_class", "P_s", "accuracy"]


# --- shared helpers ------------------------------------------------------

def _overrides(args) -> dict:
    keys = ("data", "seed", "margin", "similarity", "temperature", "label_smoothing", "epochs",
            "episodes", "way", "base_way", "query", "workers", "n_bins")
    out = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if getattr(args, "shot", None) is not None:
        out["shots"] = (args.shot,)
    if getattr(args, "shots", None):
        out["shots"] = tuple(int(v) for v in args.shots.split(","))
    if getattr(args, "margins", None):
        try:
            out["margins"] = parse_grid(args.margins)
        except ValueError as exc:
            raise ConfigError(f"--margins: {exc}") from None
    return out


def _config(args, stored_text: str | None = None) -> RunConfig:
    """Config file if given, else the text stored in a checkpoint, else defaults."""
    if args.config is not None:
        return load_config(args.config, _overrides(args))
    if stored_text is not None:
        return parse_config(stored_text, "<checkpoint>", _overrides(args))
    return load_config(None, _overrides(args))


def _splits(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("no dataset manifest: pass --data or set data= in the config")
    return prepare_splits(cfg.data, cfg)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(args):
    net, meta = load_checkpoint(args.checkpoint)
    return net, meta, _config(args, meta.get("config"))


def _margin_tag(m: float) -> str:
    return f"{m:+.4g}".replace("+", "p").replace("-", "n").replace(".", "_")


# --- commands ------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _config(args)
    splits = _splits(cfg)
    out = _outdir(args.out)
    net, history = pretrain(splits.base_train, cfg.pretrain(splits.base_train.dim), splits.base_holdout)
    save_checkpoint(net, out / "checkpoint.ckpt", {"margin": cfg.margin, "seed": cfg.seed, "config": cfg.to_text()})
    write_training_log(out / "train_log.csv", history)
    cfg.write(out / "config.txt")
    print(f"pretrained margin={cfg.margin:g} seed={cfg.seed}: final loss {history[-1].loss:.4f}, "
          f"base holdout acc {history[-1].base_val_acc:.4f}" if history else "pretrained (0 epochs)")
    return EXIT_OK


def cmd_finetune_eval(args) -> int:
    net, meta, cfg = _checkpoint(args)
    splits = _splits(cfg)
    ds = splits.by_name(args.split)
    way = cfg.base_way if args.split == "base" else cfg.way
    out = _outdir(args.out)
    rows = []
    for shot in cfg.shots:
        res = finetune_eval(net, ds, way, shot, cfg.query, cfg.episodes, cfg.finetune())
        rows.append({"margin": float(meta.get("margin", cfg.margin)), "split": args.split, "shot": shot,
                     "mean_acc": res.mean, "ci95": res.ci95, "n_episodes": res.n_episodes, "seed": cfg.seed})
        print(f"{args.split} {way}-way {shot}-shot: {100 * res.mean:.2f} +- {100 * res.ci95:.2f} "
              f"({res.n_episodes} episodes)")
    write_rows(out / "eval.csv", SWEEP_FIELDS, rows)
    cfg.write(out / "config.txt")
    return EXIT_OK


def _sweep_seeds(args, cfg: RunConfig) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    return [cfg.seed]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    seeds = _sweep_seeds(args, cfg)
    out = _outdir(args.out)
    logs = _outdir(out / "train_logs")
    sweeps, variance, confusion, ps_rows, failures = [], [], [], [], []
    for seed in seeds:
        scfg = replace(cfg, seed=seed)
        splits = _splits(scfg)
        result = sweep_margin(scfg.margins, sweep_bundle(scfg, splits))
        sweeps.append(result)
        shot = min(scfg.shots)
        for run in result.runs:
            if run.error is not None:
                failures.append({"margin": run.margin, "seed": seed, "error": run.error})
                continue
            write_training_log(logs / f"m{_margin_tag(run.margin)}_s{seed}.csv", run.history)
            for split in ("base", "novel"):
                variance.append({**run.reports[split].row(), "seed": seed})
            for row in run.confusion.rows():
                confusion.append({"margin": run.margin, "seed": seed, **row})
            acc = run.evals[("novel", shot)].per_class
            for j, name in enumerate(run.confusion.novel_names):
                ps_rows.append({"margin": run.margin, "seed": seed, "novel_class": name,
                                "P_s": float(run.confusion.per_class[j]), "accuracy": acc.get(name, math.nan)})
    write_rows(out / "sweep.csv", SWEEP_FIELDS, [row for sw in sweeps for row in sw.rows()])
    write_rows(out / "variance.csv", VARIANCE_FIELDS + ["seed"], variance)
    write_rows(out / "confusion.csv", ["margin", "seed"] + CONFUSION_FIELDS, confusion)
    write_rows(out / "p_same.csv", PS_FIELDS, ps_rows)
    if failures:
        write_rows(out / "failures.csv", ["margin", "seed", "error"], failures)
    cfg.write(out / "config.txt")
    if variance:
        from . import plotting

        for shot in cfg.shots:
            plotting.plot_accuracy_vs_margin(sweeps, out / f"accuracy_vs_margin_{shot}shot.png", shot)
        plotting.plot_discriminability(sweeps, out / "discriminability.png")
        plotting.plot_ps_accuracy([(r["margin"], r["P_s"], r["accuracy"]) for r in ps_rows],
                                  out / "ps_accuracy.png")
    for sw in sweeps:
        for row in sw.rows():
            print(f"seed {row['seed']} m={row['margin']:+.3g} {row['split']:5s} {row['shot']}-shot "
                  f"{100 * row['mean_acc']:.2f} +- {100 * row['ci95']:.2f}")
    for f in failures:
        print(f"seed {f['seed']} m={f['margin']:+.3g} FAILED: {f['error']}", file=sys.stderr)
    n_runs = sum(len(sw.runs) for sw in sweeps)
    if failures and len(failures) == n_runs:
        return EXIT_NUMERIC if all("NumericError" in f["error"] for f in failures) else EXIT_OTHER
    return EXIT_OK


def cmd_analyze(args) -> int:
    net, meta, cfg = _checkpoint(args)
    splits = _splits(cfg)
    out = _outdir(args.out)
    margin = float(meta.get("margin", cfg.margin))
    reports = []
    for split in ("base", "novel"):
        ds = splits.by_name(split)
        z = net.features(ds.features)
        reports.append(variance_report(z, ds.labels, margin, split).row())
        if z.shape[1] == 2:
            counts, starts = angular_histogram(z, ds.labels, cfg.n_bins, ds.n_classes)
            write_rows(out / f"histogram_{split}.csv", HISTOGRAM_FIELDS, histogram_rows(counts, starts, ds.class_names))
            from . import plotting

            plotting.plot_angular_histogram(counts, starts, ds.class_names, out / f"histogram_{split}.png",
                                            f"{split} classes, m={margin:g}")
    write_rows(out / "variance.csv", VARIANCE_FIELDS, reports)
    profile = confusion_profile(net, splits.novel, cfg.temperature)
    write_rows(out / "confusion.csv", CONFUSION_FIELDS, profile.rows())
    write_rows(out / "p_same.csv", ["novel_class", "P_s"],
               [{"novel_class": n, "P_s": float(p)} for n, p in zip(profile.novel_names, profile.per_class)])
    from . import plotting

    plotting.plot_confusion(profile, out / "confusion.png")
    cfg.write(out / "config.txt")
    for r in reports:
        print(f"{r['split']:5s} D_inter={r['D_inter']:.5g} D_intra={r['D_intra']:.5g} phi={r['phi']:.5g}")
    print(f"P^s={profile.p_same:.4f}")
    return EXIT_OK


def _read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _sweep_instances(sweep_dir):
    """Adjacent-margin proposition instances from a sweep output directory."""
    sweep_dir = Path(sweep_dir)
    reports, ps = {}, {}
    for row in _read_csv(sweep_dir / "variance.csv"):
        key = (int(row["seed"]), float(row["margin"]), row["split"])
        reports[key] = AnalysisReport(None, float(row["D_inter"]), float(row["D_intra"]), float(row["phi"]),
                                      row["split"], float(row["margin"]))
    for row in _read_csv(sweep_dir / "p_same.csv"):
        ps.setdefault((int(row["seed"]), float(row["margin"])), []).append(float(row["P_s"]))
    for seed in sorted({k[0] for k in reports}):
        margins = sorted({k[1] for k in reports if k[0] == seed})
        for m1, m2 in zip(margins, margins[1:]):
            inst = instance_from_reports(reports[(seed, m1, "base")], reports[(seed, m2, "base")],
                                         reports[(seed, m1, "novel")], reports[(seed, m2, "novel")])
            measured = reports[(seed, m2, "novel")].phi < reports[(seed, m1, "novel")].phi
            yield seed, inst, float(np.mean(ps[(seed, m1)])), measured


def cmd_check_proposition(args) -> int:
    rows, disagree, applicable, predicted = [], 0, 0, 0
    if args.from_sweep:
        for seed, inst, p, measured in _sweep_instances(args.from_sweep):
            v = check_proposition(inst, p)
            applicable += v.applicable
            predicted += v.applicable and v.predicted
            disagree += not v.agrees
            status = "n/a: " + v.reason if not v.applicable else (
                f"P^s={p:.4f} threshold={v.threshold:.4f} predicted={v.predicted} direct={v.direct}")
            print(f"seed {seed} m {inst.m1:+.3g} -> {inst.m2:+.3g}: {status}; measured novel phi drop={measured}")
            rows.append(_verdict_row(inst, p, v))
        total = len(rows)
    else:
        if args.random_instances < 1:
            raise ConfigError("--random-instances must be >= 1")
        seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, "0"))
        rng = make_rng(seed, "proposition")
        while len(rows) < args.random_instances:
            inst, p = random_instance(rng)
            if math.isnan(p):
                continue
            v = check_proposition(inst, p)
            applicable += v.applicable
            predicted += v.applicable and v.predicted
            disagree += not v.agrees
            rows.append(_verdict_row(inst, p, v))
        total = len(rows)
    if args.out:
        out = _outdir(args.out)
        write_rows(out / "proposition.csv", PROPOSITION_FIELDS, rows)
    agree = total - disagree
    print(f"instances={total} applicable={applicable} predicted={predicted} "
          f"agreement={agree}/{total} ({100.0 * agree / max(total, 1):.2f}%)")
    return EXIT_OK if disagree == 0 else EXIT_DISAGREE


def _verdict_row(inst, p, v) -> dict:
    return {"m1": inst.m1, "m2": inst.m2, "p_same": p, "threshold": v.threshold, "r": v.r, "t": v.t,
            "predicted": int(bool(v.predicted)), "phi_novel_m1": v.phi_novel_m1,
            "phi_novel_m2": v.phi_novel_m2, "direct": int(bool(v.direct))}


def cmd_export_embeddings(args) -> int:
    net, _, cfg = _checkpoint(args)
    ds = _splits(cfg).by_name(args.split)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(net, ds, args.out)
    print(f"wrote {len(ds)} {args.split} embeddings to {args.out}")
    return EXIT_OK


def cmd_prepare_digits(args) -> int:
    images, labels = digit_images(args.source)
    out = _outdir(args.out)
    write_idx(images, labels, out / "images-idx3-ubyte", out / "labels-idx1-ubyte")
    novel = ",".join(str(d) for d in range(10 - args.n_novel, 10))
    (out / "manifest.txt").write_text(
        "# handwritten digits; the last digits are held out as novel classes\n"
        "format=idx\nimages=images-idx3-ubyte\nlabels=labels-idx1-ubyte\n"
        f"novel_classes={novel}\n", encoding="utf-8")
    print(f"wrote {len(labels)} images ({images.shape[1]}x{images.shape[2]}) and manifest to {out}")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

def _add_run_options(p, data=True):
    p.add_argument("--config", help="key=value run configuration file")
    if data:
        p.add_argument("--data", help="dataset manifest (overrides data= in the config)")
    p.add_argument("--seed", type=int, help=f"run seed (default from config, then ${SEED_ENV}, then 0)")


def _add_eval_options(p):
    p.add_argument("--way", type=int)
    p.add_argument("--base-way", dest="base_way", type=int)
    p.add_argument("--query", type=int)
    p.add_argument("--episodes", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="negmargin", description="Margin-softmax pretraining and few-shot evaluation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train backbone and classifier on the base classes")
    _add_run_options(p)
    p.add_argument("--margin", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune-eval", help="few-shot episodes on a frozen checkpoint")
    _add_run_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("novel", "base", "val"), default="novel")
    p.add_argument("--shot", type=int)
    _add_eval_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune_eval)

    p = sub.add_parser("sweep-margin", aliases=["sweep"], help="pretrain and evaluate over a margin grid")
    _add_run_options(p)
    p.add_argument("--margins", help="start:step:end (inclusive) or comma list")
    p.add_argument("--seeds", help="comma list of seeds; one full sweep per seed")
    p.add_argument("--shots", help="comma list of shots")
    p.add_argument("--epochs", type=int)
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    p.add_argument("--workers", type=int)
    _add_eval_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="variance, confusion and angular histograms of a checkpoint")
    _add_run_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-bins", dest="n_bins", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("check-proposition", help="verify the margin/discriminability proposition")
    p.add_argument("--random-instances", dest="random_instances", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--from-sweep", dest="from_sweep", help="sweep output directory to check instead")
    p.add_argument("--out")
    p.set_defaults(func=cmd_check_proposition)

    p = sub.add_parser("export-embeddings", help="write backbone features of one split as CSV")
    _add_run_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("novel", "base", "val", "base_train"), default="novel")
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("prepare-digits", help="write a bundled digit dataset as IDX files plus a manifest")
    p.add_argument("--source", choices=("mlxtend", "digits"), default="mlxtend")
    p.add_argument("--n-novel", dest="n_novel", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_digits)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NegMarginError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except OSError as exc:
        where = f": {exc.filename}" if exc.filename else ""
        print(f"I/O error: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
