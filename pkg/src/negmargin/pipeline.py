"""Two-stage few-shot pipeline: pretrain on base classes, then evaluate on
episodes by training a fresh classifier on frozen features."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import AnalysisReport, ConfusionProfile, confusion_profile, variance_report
from .data import LabeledDataset, check_disjoint, minibatches, n_batches, sample_episode
from .errors import ContractError, NegMarginError, NumericError
from .losses import LossSpec, margin_loss
from .model import BackboneConfig, Network, glorot_uniform, head_backward, head_forward
from .numerics import make_rng
from .optim import Adam, OptimConfig

log = logging.getLogger(__name__)

SWEEP_FIELDS = ["margin", "split", "shot", "mean_acc", "ci95", "n_episodes", "seed"]
TRAIN_LOG_FIELDS = ["epoch", "loss", "base_val_acc"]


@dataclass(frozen=True)
class PretrainConfig:
    loss: LossSpec
    backbone: BackboneConfig
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    lr0: float = 3e-3
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")

    def optim(self, n_records: int) -> OptimConfig:
        steps = self.epochs * n_batches(n_records, self.batch_size)
        return OptimConfig(total_steps=steps, lr0=self.lr0, weight_decay=self.weight_decay,
                           decoupled=self.decoupled_weight_decay)


@dataclass(frozen=True)
class FinetuneConfig:
    loss: LossSpec
    steps: int = 100
    lr0: float = 0.05
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"fine-tune steps must be >= 1, got {self.steps}")

    def optim(self) -> OptimConfig:
        return OptimConfig(total_steps=self.steps, lr0=self.lr0, weight_decay=self.weight_decay)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    base_val_acc: float


@dataclass
class EvalResult:
    accuracies: list[float]
    mean: float
    ci95: float
    # Query accuracy pooled over episodes, keyed by dataset class name.
    per_class: dict[str, float] = field(default_factory=dict)

    @property
    def n_episodes(self) -> int:
        return len(self.accuracies)

    @classmethod
    def from_accuracies(cls, accuracies) -> "EvalResult":
        acc = [float(a) for a in accuracies]
        if not acc:
            raise ContractError("no episode accuracies")
        return cls(acc, float(np.mean(acc)), ci95(acc))


def ci95(accuracies) -> float:
    """1.96 * sample std / sqrt(n); defined as 0 for fewer than two values."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        return 0.0
    return float(1.96 * np.std(acc, ddof=1) / math.sqrt(acc.size))


def accuracy(net: Network, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(net.predict(ds.features) == ds.labels))


def pretrain(ds_base: LabeledDataset, cfg: PretrainConfig,
             ds_val: LabeledDataset | None = None) -> tuple[Network, list[EpochLog]]:
    """Train backbone and classifier jointly on the base classes.

    ``ds_val`` (held-out base records, same class ids) supplies the
    per-epoch ``base_val_acc``; without it the column is NaN.
    """
    if len(ds_base) == 0:
        raise ContractError("empty base dataset")
    if ds_base.n_classes < 2:
        raise ContractError("pretraining needs at least two classes")
    if cfg.backbone.input_dim != ds_base.dim:
        raise ContractError(f"backbone input_dim {cfg.backbone.input_dim} != data dim {ds_base.dim}")
    net = Network.initialized(cfg.backbone, ds_base.n_classes, make_rng(cfg.seed, "init"),
                              cfg.loss.similarity, ds_base.class_names)
    opt = Adam(cfg.optim(len(ds_base)))
    batch_rng = make_rng(cfg.seed, "batches")
    history = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in minibatches(len(ds_base), cfg.batch_size, batch_rng):
            try:
                with np.errstate(all="ignore"):
                    _, scores = net.forward(ds_base.features[idx])
                loss, grad = margin_loss(scores, ds_base.labels[idx], cfg.loss)
                if not math.isfinite(loss):
                    raise NumericError("non-finite loss")
                net.backward(grad)
                opt.step(net.params, net.grads)
            except NumericError as exc:
                raise NumericError(f"diverged in epoch {epoch}: {exc}") from None
            net.invalidate()
            total += loss * len(idx)
        val_acc = accuracy(net, ds_val) if ds_val is not None else float("nan")
        history.append(EpochLog(epoch, total / len(ds_base), val_acc))
        log.debug("epoch %d loss %.5f val %.4f", epoch, history[-1].loss, val_acc)
    return net, history


def train_classifier(features: np.ndarray, labels: np.ndarray, n_classes: int,
                     cfg: FinetuneConfig, rng: np.random.Generator) -> np.ndarray:
    """Fit a fresh ``D x n_classes`` classifier on fixed features (full batch)."""
    W = glorot_uniform(rng, features.shape[1], n_classes)
    params = {"classifier": W}
    grads = {"classifier": np.zeros_like(W)}
    opt = Adam(cfg.optim())
    for _ in range(cfg.steps):
        scores, cache = head_forward(features, W, cfg.loss.similarity)
        _, g = margin_loss(scores, labels, cfg.loss)
        grads["classifier"] += head_backward(g, cache)[1]
        opt.step(params, grads)
    return W


def run_episode(features: np.ndarray, ds: LabeledDataset, way: int, shot: int, query: int,
                cfg: FinetuneConfig, rng: np.random.Generator):
    """One episode; returns ``(episode, per-query correctness)``."""
    ep = sample_episode(ds, way, shot, query, rng)
    W = train_classifier(features[ep.support_idx], ep.support_y, way, cfg, rng)
    scores, _ = head_forward(features[ep.query_idx], W, cfg.loss.similarity)
    # np.argmax breaks ties toward the lowest class index.
    return ep, np.argmax(scores, axis=1) == ep.query_y


def finetune_eval(net: Network, ds: LabeledDataset, way: int, shot: int, query: int,
                  n_episodes: int, cfg: FinetuneConfig) -> EvalResult:
    """Mean query accuracy over ``n_episodes`` episodes with a frozen backbone.

    Datasets tagged ``novel`` or ``val`` must not share classes with the
    classes the network was pretrained on.
    """
    if n_episodes < 1 or query < 1:
        raise ContractError(f"need n_episodes >= 1 and query >= 1, got {n_episodes}, {query}")
    if ds.split_tag in ("novel", "val"):
        check_disjoint(net.class_names, novel=ds.class_names)
    if cfg.loss.similarity != net.similarity:
        raise ContractError(f"fine-tune similarity {cfg.loss.similarity!r} != pretrain {net.similarity!r}")
    features = net.features(ds.features)
    accs = []
    hits = np.zeros(ds.n_classes)
    seen = np.zeros(ds.n_classes)
    for e in range(n_episodes):
        rng = make_rng(cfg.seed, "episode", shot, e)
        ep, correct = run_episode(features, ds, way, shot, query, cfg, rng)
        accs.append(float(np.mean(correct)) if len(correct) else 0.0)
        true_class = ds.labels[ep.query_idx]
        np.add.at(hits, true_class, correct)
        np.add.at(seen, true_class, 1)
    res = EvalResult.from_accuracies(accs)
    res.per_class = {ds.class_names[c]: float(hits[c] / seen[c]) for c in range(ds.n_classes) if seen[c]}
    return res


# --- margin sweeps -----------------------------------------------------

@dataclass(frozen=True)
class SweepBundle:
    """Everything a margin sweep needs besides the margin grid."""

    pretrain: PretrainConfig
    finetune: FinetuneConfig
    base_train: LabeledDataset
    base_holdout: LabeledDataset
    novel: LabeledDataset
    novel_way: int = 5
    base_way: int = 5
    shots: tuple[int, ...] = (1, 5)
    query: int = 16
    n_episodes: int = 600
    workers: int = 1


@dataclass
class MarginRun:
    margin: float
    evals: dict[tuple[str, int], EvalResult] = field(default_factory=dict)
    reports: dict[str, AnalysisReport] = field(default_factory=dict)
    confusion: ConfusionProfile | None = None
    history: list[EpochLog] = field(default_factory=list)
    error: str | None = None


@dataclass
class SweepResult:
    margins: list[float]
    runs: list[MarginRun]
    seed: int

    def rows(self) -> list[dict]:
        out = []
        for run in self.runs:
            if run.error is not None:
                continue
            for (split, shot), res in sorted(run.evals.items(), key=lambda kv: (kv[0][0] != "novel", kv[0][1])):
                out.append({"margin": run.margin, "split": split, "shot": shot, "mean_acc": res.mean,
                            "ci95": res.ci95, "n_episodes": res.n_episodes, "seed": self.seed})
        return out

    def write_csv(self, path) -> None:
        write_rows(path, SWEEP_FIELDS, self.rows())

    def mean_acc(self, split: str, shot: int) -> np.ndarray:
        return np.array([r.evals[(split, shot)].mean if r.error is None else np.nan for r in self.runs])


def check_open_set(bundle: SweepBundle) -> None:
    check_disjoint(bundle.base_train.class_names, novel=bundle.novel.class_names)
    if bundle.base_holdout.class_names != bundle.base_train.class_names:
        raise ContractError("base holdout must carry the same classes as base training data")


def run_margin(margin: float, bundle: SweepBundle) -> MarginRun:
    run = MarginRun(float(margin))
    try:
        cfg = replace(bundle.pretrain, loss=bundle.pretrain.loss.with_margin(margin))
        net, run.history = pretrain(bundle.base_train, cfg, bundle.base_holdout)
        for shot in bundle.shots:
            run.evals[("novel", shot)] = finetune_eval(net, bundle.novel, bundle.novel_way, shot,
                                                       bundle.query, bundle.n_episodes, bundle.finetune)
            run.evals[("base", shot)] = finetune_eval(net, bundle.base_holdout, bundle.base_way, shot,
                                                      bundle.query, bundle.n_episodes, bundle.finetune)
        run.reports["base"] = variance_report(net.features(bundle.base_holdout.features),
                                              bundle.base_holdout.labels, margin, "base")
        run.reports["novel"] = variance_report(net.features(bundle.novel.features),
                                               bundle.novel.labels, margin, "novel")
        run.confusion = confusion_profile(net, bundle.novel, cfg.loss.temperature)
    except NegMarginError as exc:
        log.warning("margin %g failed: %s", margin, exc)
        run.error = f"{type(exc).__name__}: {exc}"
    return run


def sweep_margin(margins, bundle: SweepBundle) -> SweepResult:
    """Pretrain + evaluate + analyse once per margin (ascending order).

    A failing margin is recorded in its ``MarginRun.error`` and the sweep
    moves on. With ``workers > 1`` margins run in separate processes; each
    run is seeded only by the config, so results do not depend on
    scheduling.
    """
    grid = sorted(float(m) for m in margins)
    if len(grid) < 1:
        raise ContractError("empty margin grid")
    check_open_set(bundle)
    if bundle.workers > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=bundle.workers) as pool:
            runs = list(pool.map(run_margin, grid, [bundle] * len(grid)))
    else:
        runs = [run_margin(m, bundle) for m in grid]
    return SweepResult(grid, runs, bundle.pretrain.seed)


def write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_training_log(path, history: list[EpochLog]) -> None:
    write_rows(path, TRAIN_LOG_FIELDS,
               [{"epoch": h.epoch, "loss": h.loss, "base_val_acc": h.base_val_acc} for h in history])
