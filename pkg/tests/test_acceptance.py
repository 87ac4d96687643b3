"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The three MNIST criteria share one experiment (margin grid plus a
label-smoothed run, several seeds) driven by ``configs/mnist_7_3.cfg``.
Run ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""

import filecmp
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import max_fd_error, random_net
from negmargin.analysis import check_proposition, random_instance, variance_report
from negmargin.cli import main
from negmargin.config import load_config, prepare_splits, sweep_bundle
from negmargin.data import digit_images, write_idx
from negmargin.losses import LossSpec, margin_loss
from negmargin.numerics import make_rng
from negmargin.pipeline import EvalResult, run_margin, sweep_margin
from oracles import brute_variance, plain_ce

ROOT = Path(__file__).resolve().parents[1]
MNIST_CONFIG = ROOT / "configs" / "mnist_7_3.cfg"
# Seeds 0-4 were used while choosing configs/mnist_7_3.cfg; these are fresh.
MNIST_SEEDS = (10, 11, 12, 13, 14)
SMOOTHING = 0.05


@pytest.fixture
def report(request):
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def emit(n, ok, detail, elapsed=None):
        took = f" [{elapsed:.1f}s]" if elapsed is not None else ""
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}{took}"
        lines.append(line)
        print(line)
        return ok

    return emit


ACCEPTANCE_KEY = pytest.StashKey[list]()


# --- 1. gradient exactness --------------------------------------------------

def test_c1_gradient_exactness(report):
    t0 = time.perf_counter()
    rng = make_rng(2024, "acceptance", 1)
    worst, n_nets = 0.0, 0
    for similarity in ("cosine", "inner_product"):
        beta = 10.0 if similarity == "cosine" else 1.0
        for i in range(20):
            net = random_net(rng, similarity)
            x = rng.normal(size=(int(rng.integers(1, 5)), net.config.input_dim))
            y = rng.integers(0, net.n_classes, size=len(x))
            # alternate the plain and label-smoothed loss over a margin range
            spec = LossSpec(float(rng.uniform(-0.5, 0.5)), beta, similarity, 0.1 if i % 2 else 0.0)
            worst = max(worst, max_fd_error(net, x, y, spec))
            n_nets += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 30
    assert report(1, ok, f"{n_nets} networks, max relative error {worst:.2e} (<= 1e-6)", elapsed)


# --- 2. zero-margin reduction ---------------------------------------------

def test_c2_zero_margin_is_cross_entropy(report):
    t0 = time.perf_counter()
    rng = make_rng(2024, "acceptance", 2)
    worst = 0.0
    for i in range(1000):
        n, c = int(rng.integers(1, 16)), int(rng.integers(1, 12))
        similarity = "cosine" if i % 2 else "inner_product"
        scores = rng.uniform(-1, 1, size=(n, c)) if similarity == "cosine" else rng.normal(scale=5, size=(n, c))
        beta = float(rng.uniform(0.5, 30))
        labels = rng.integers(0, c, size=n)
        loss, _ = margin_loss(scores, labels, LossSpec(0.0, beta, similarity))
        worst = max(worst, abs(loss - plain_ce(scores, labels, beta)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5
    assert report(2, ok, f"1000 batches, max |L(0) - CE| = {worst:.1e} (<= 1e-12)", elapsed)


# --- 3. monotonicity in the margin ------------------------------------------

def test_c3_loss_monotone_in_margin(report):
    t0 = time.perf_counter()
    rng = make_rng(2024, "acceptance", 3)
    worst, checked = -math.inf, 0
    for _ in range(100):
        n, c = int(rng.integers(1, 16)), int(rng.integers(1, 12))
        scores = rng.uniform(-1, 1, size=(n, c))
        labels = rng.integers(0, c, size=n)
        m1, m2 = np.sort(rng.uniform(-1, 1, size=2))
        for similarity, beta in (("cosine", float(rng.uniform(1, 30))), ("inner_product", 1.0)):
            lo, _ = margin_loss(scores, labels, LossSpec(m1, beta, similarity))
            hi, _ = margin_loss(scores, labels, LossSpec(m2, beta, similarity))
            worst = max(worst, lo - hi)
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5
    assert report(3, ok, f"{checked} margin pairs, max L(m1) - L(m2) = {worst:.1e} (<= 1e-12)", elapsed)


# --- 4. proposition oracle ------------------------------------------------

def test_c4_proposition(report):
    t0 = time.perf_counter()
    rng = make_rng(2024, "acceptance", 4)
    held, total = 0, 0
    while total < 1000:
        inst, p = random_instance(rng)
        if math.isnan(p):
            continue
        v = check_proposition(inst, p)
        assert v.applicable and p < v.threshold
        # direct evaluation, independent of the verdict object
        def phi(i):
            intra = p * inst.base_intra[i] + (1 - p) * inst.base_inter[i]
            return inst.novel_inter[i] / intra
        held += phi(1) < phi(0)
        total += 1
    elapsed = time.perf_counter() - t0
    ok = held == total and elapsed < 5
    assert report(4, ok, f"{held}/{total} admissible instances satisfy phi_n(m2) < phi_n(m1)", elapsed)


# --- 7. confidence interval ---------------------------------------------------

def test_c7_ci95(report):
    t0 = time.perf_counter()
    got = EvalResult.from_accuracies([0.8, 0.9, 1.0]).ci95
    oracle = 1.96 * math.sqrt(((0.8 - 0.9) ** 2 + 0 + (1.0 - 0.9) ** 2) / 2) / math.sqrt(3)
    elapsed = time.perf_counter() - t0
    ok = abs(got - oracle) <= 1e-5 and abs(got - 0.11316) <= 1e-5 and elapsed < 1
    assert report(7, ok, f"ci95([0.8, 0.9, 1.0]) = {got:.6f}, oracle {oracle:.6f}", elapsed)


# --- 8. variance report oracle ------------------------------------------

def test_c8_variance_oracle(report):
    t0 = time.perf_counter()
    rng = make_rng(2024, "acceptance", 8)
    worst = 0.0
    for _ in range(100):
        C, D = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        labels = np.concatenate([np.arange(C), rng.integers(0, C, size=int(rng.integers(0, 30)))])
        feats = rng.normal(size=(len(labels), D))
        rep = variance_report(feats, labels)
        inter, intra = brute_variance(feats, labels)
        worst = max(worst, abs(rep.d_inter - inter), abs(rep.d_intra - intra))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    assert report(8, ok, f"100 datasets, max deviation {worst:.1e} (<= 1e-12)", elapsed)


# --- 5, 6, 9. MNIST 7/3 experiment ----------------------------------------

@pytest.fixture(scope="module")
def mnist_experiment(tmp_path_factory):
    pytest.importorskip("mlxtend", reason="the MNIST sample ships with mlxtend")
    data = tmp_path_factory.mktemp("mnist")
    images, labels = digit_images("mlxtend")
    write_idx(images, labels, data / "images", data / "labels")
    (data / "manifest.txt").write_text("format=idx\nimages=images\nlabels=labels\nnovel_classes=7,8,9\n")
    base_cfg = replace(load_config(MNIST_CONFIG, {"data": str(data / "manifest.txt")}), shots=(1,))
    t0 = time.perf_counter()
    sweeps, smoothed = [], []
    for seed in MNIST_SEEDS:
        cfg = replace(base_cfg, seed=seed)
        bundle = sweep_bundle(cfg, prepare_splits(cfg.data, cfg))
        sweeps.append(sweep_margin(cfg.margins, bundle))
        ls_loss = replace(bundle.pretrain.loss, label_smoothing=SMOOTHING)
        smoothed.append(run_margin(0.0, replace(bundle, pretrain=replace(bundle.pretrain, loss=ls_loss))))
    elapsed = time.perf_counter() - t0
    for sw in sweeps:
        assert all(r.error is None for r in sw.runs), [r.error for r in sw.runs]
    assert all(r.error is None for r in smoothed)
    margins = np.array(sweeps[0].margins)

    def avg(get):
        return np.mean([[get(r) for r in sw.runs] for sw in sweeps], axis=0)

    return {
        "margins": margins,
        "elapsed": elapsed,
        "n_runs": len(MNIST_SEEDS) * (len(margins) + 1),
        "phi_base": avg(lambda r: r.reports["base"].phi),
        "phi_novel": avg(lambda r: r.reports["novel"].phi),
        "novel": avg(lambda r: r.evals[("novel", 1)].mean),
        "base": avg(lambda r: r.evals[("base", 1)].mean),
        "ls_novel": float(np.mean([r.evals[("novel", 1)].mean for r in smoothed])),
        "ls_base": float(np.mean([r.evals[("base", 1)].mean for r in smoothed])),
        "per_seed_phi": [(spearmanr(margins, [r.reports["base"].phi for r in sw.runs])[0],
                          spearmanr(margins, [r.reports["novel"].phi for r in sw.runs])[0]) for sw in sweeps],
    }


def _fmt(values):
    return "[" + " ".join(f"{v:.3f}" for v in values) + "]"


def test_c5_discriminability_trend(report, mnist_experiment):
    ex = mnist_experiment
    rho_b = spearmanr(ex["margins"], ex["phi_base"])[0]
    rho_n = spearmanr(ex["margins"], ex["phi_novel"])[0]
    ok = rho_b > 0 and rho_n < 0 and ex["elapsed"] < 900
    per_seed = " ".join(f"({b:+.2f},{n:+.2f})" for b, n in ex["per_seed_phi"])
    assert report(5, ok, f"{len(MNIST_SEEDS)} seeds: rho(m, phi_base) = {rho_b:+.3f} (> 0), "
                         f"rho(m, phi_novel) = {rho_n:+.3f} (< 0); per seed {per_seed}", ex["elapsed"])


def test_c6_accuracy_shape(report, mnist_experiment):
    ex = mnist_experiment
    m = ex["margins"]
    neg = m < 0
    best = int(np.flatnonzero(neg)[np.argmax(ex["novel"][neg])])
    gap = ex["novel"][best] - ex["novel"][np.flatnonzero(m == 0.3)[0]]
    rho_base = spearmanr(m, ex["base"])[0]
    ok = gap >= 0.02 and rho_base > 0 and ex["elapsed"] < 900
    assert report(6, ok, f"novel 1-shot {_fmt(ex['novel'])}: best negative m={m[best]:+g} beats m=+0.3 by "
                         f"{100 * gap:.2f} points (>= 2); base {_fmt(ex['base'])} rho = {rho_base:+.3f} (> 0)",
                  ex["elapsed"])


def test_c9_label_smoothing_contrast(report, mnist_experiment):
    ex = mnist_experiment
    m = list(ex["margins"])
    base0, novel_neg = ex["base"][m.index(0.0)], ex["novel"][m.index(-0.3)]
    ok = ex["ls_base"] >= base0 and ex["ls_novel"] <= novel_neg and ex["elapsed"] < 900
    assert report(9, ok, f"eps={SMOOTHING}: base {ex['ls_base']:.4f} vs unsmoothed {base0:.4f} (>=), "
                         f"novel {ex['ls_novel']:.4f} vs m=-0.3 {novel_neg:.4f} (<=)", ex["elapsed"])


# --- 10. determinism ----------------------------------------------------------

def _csv_tree(root):
    return sorted(str(p.relative_to(root)) for p in Path(root).rglob("*") if p.suffix in (".csv", ".txt"))


def test_c10_determinism(report, tmp_path):
    (tmp_path / "manifest.txt").write_text(
        "format=synthetic\nn_classes=7\nper_class=24\ndim=8\ncluster_std=0.4\nconfusability=0.4\nn_novel=3\nseed=9\n")
    (tmp_path / "run.cfg").write_text(
        "data=manifest.txt\nhidden_dims=16\nepochs=2\nbatch_size=16\nway=3\nbase_way=3\nquery=3\n"
        "episodes=5\nshots=1\nholdout_fraction=0.25\nfinetune_steps=20\nmargins=-0.2,0,0.2\n")
    cfg = str(tmp_path / "run.cfg")
    t0 = time.perf_counter()
    identical, compared = True, 0
    for rep in ("a", "b"):
        out = tmp_path / rep
        ckpt = str(out / "pretrain" / "checkpoint.ckpt")
        commands = [
            ["pretrain", "--config", cfg, "--margin", "-0.2", "--out", str(out / "pretrain")],
            ["finetune-eval", "--checkpoint", ckpt, "--out", str(out / "eval")],
            ["finetune-eval", "--checkpoint", ckpt, "--split", "base", "--out", str(out / "eval_base")],
            ["analyze", "--checkpoint", ckpt, "--out", str(out / "analyze")],
            ["export-embeddings", "--checkpoint", ckpt, "--out", str(out / "emb" / "novel.csv")],
            ["sweep", "--config", cfg, "--seeds", "1,2", "--out", str(out / "sweep")],
            ["check-proposition", "--from-sweep", str(out / "sweep"), "--out", str(out / "prop_sweep")],
            ["check-proposition", "--random-instances", "200", "--seed", "7", "--out", str(out / "prop")],
        ]
        for argv in commands:
            assert main(argv) in (0, 6), argv
    names = _csv_tree(tmp_path / "a")
    assert names == _csv_tree(tmp_path / "b")
    for name in names:
        compared += 1
        identical &= filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
    assert (tmp_path / "a" / "pretrain" / "checkpoint.ckpt").read_bytes() == \
        (tmp_path / "b" / "pretrain" / "checkpoint.ckpt").read_bytes()
    elapsed = time.perf_counter() - t0
    assert report(10, identical and compared >= 15, f"{compared} CSV/config files from 8 commands byte-identical "
                                                    "across two runs", elapsed)
