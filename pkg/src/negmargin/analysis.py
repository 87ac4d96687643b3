"""Feature discriminability diagnostics.

Class centers are means of L2-normalized features (not re-normalized).
``D_inter`` averages squared center distances over ordered class pairs,
``D_intra`` averages each class's mean squared distance to its center, and
``phi = D_inter / D_intra``.  The confusion profile measures how a
pretrained model spreads each novel class over the base classes, and the
proposition checker relates those quantities across two margins.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import Network, head_forward
from .numerics import l2_normalize, softmax

VARIANCE_FIELDS = ["margin", "split", "D_inter", "D_intra", "phi"]
CONFUSION_FIELDS = ["novel_class", "base_class", "P_jk"]
HISTOGRAM_FIELDS = ["class", "bin_start_rad", "count"]


@dataclass
class AnalysisReport:
    centers: np.ndarray
    d_inter: float
    d_intra: float
    phi: float
    split_tag: str
    margin: float
    # True when D_intra == 0; phi is then +inf.
    phi_infinite: bool = False

    def row(self) -> dict:
        return {"margin": self.margin, "split": self.split_tag, "D_inter": self.d_inter,
                "D_intra": self.d_intra, "phi": self.phi}


def _grouped(features, labels):
    z = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ContractError(f"features {z.shape} and labels {y.shape} disagree")
    classes = np.unique(y)
    return l2_normalize(z), y, classes


def class_centers(features, labels, n_classes: int | None = None) -> np.ndarray:
    """Row ``j`` is the mean of the unit-normalized features of class ``j``."""
    unit, y, _ = _grouped(features, labels)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(y, minlength=n_classes)
    if np.any(counts == 0):
        raise ContractError(f"empty classes: {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((n_classes, unit.shape[1]))
    np.add.at(sums, y, unit)
    return sums / counts[:, None]


def variance_report(features, labels, margin: float = 0.0, split_tag: str = "all") -> AnalysisReport:
    unit, y, classes = _grouped(features, labels)
    if len(classes) < 2:
        raise ContractError("variance report needs at least two classes")
    # Relabel so that only populated classes count.
    dense = np.searchsorted(classes, y)
    centers = class_centers(unit, dense, len(classes))
    c = len(classes)
    diff = centers[:, None, :] - centers[None, :, :]
    pair = np.sum(diff * diff, axis=2)
    d_inter = float(pair.sum() / (c * (c - 1)))
    resid = np.sum((unit - centers[dense]) ** 2, axis=1)
    per_class = np.bincount(dense, weights=resid, minlength=c) / np.bincount(dense, minlength=c)
    d_intra = float(per_class.mean())
    if d_intra > 0:
        return AnalysisReport(centers, d_inter, d_intra, d_inter / d_intra, split_tag, float(margin))
    return AnalysisReport(centers, d_inter, 0.0, math.inf, split_tag, float(margin), phi_infinite=True)


@dataclass
class ConfusionProfile:
    """Soft assignment of novel classes to base classes.

    ``P[j, k]`` is the average softmax probability that a sample of novel
    class ``j`` lands in base class ``k``; ``per_class[j] = sum_k P[j, k]**2``
    and ``p_same`` is their mean.  ``hard_counts`` is the argmax histogram.
    """

    P: np.ndarray
    per_class: np.ndarray
    p_same: float
    beta: float
    hard_counts: np.ndarray
    novel_names: list[str] = field(default_factory=list)
    base_names: list[str] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [{"novel_class": self.novel_names[j], "base_class": self.base_names[k], "P_jk": float(self.P[j, k])}
                for j in range(self.P.shape[0]) for k in range(self.P.shape[1])]


def confusion_from_scores(scores, labels, beta: float, n_novel: int | None = None) -> ConfusionProfile:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_novel = int(y.max()) + 1 if n_novel is None else n_novel
    counts = np.bincount(y, minlength=n_novel)
    if np.any(counts == 0):
        raise ContractError(f"empty novel classes: {np.flatnonzero(counts == 0).tolist()}")
    probs = softmax(beta * s, axis=1)
    P = np.zeros((n_novel, s.shape[1]))
    np.add.at(P, y, probs)
    P /= counts[:, None]
    hard = np.zeros((n_novel, s.shape[1]), dtype=np.int64)
    np.add.at(hard, (y, np.argmax(s, axis=1)), 1)
    per_class = np.sum(P * P, axis=1)
    return ConfusionProfile(P, per_class, float(per_class.mean()), float(beta), hard)


def confusion_profile(net: Network, ds_novel, beta: float) -> ConfusionProfile:
    """Confusion profile of a novel dataset under a pretrained network's own classifier."""
    z = net.features(ds_novel.features)
    scores, _ = head_forward(z, net.params["classifier"], net.similarity)
    prof = confusion_from_scores(scores, ds_novel.labels, beta, ds_novel.n_classes)
    prof.novel_names = list(ds_novel.class_names)
    prof.base_names = list(net.class_names)
    return prof


# --- proposition -------------------------------------------------------

@dataclass(frozen=True)
class PropositionInstance:
    """Measurements at two margins ``m1 < m2``.

    ``r`` is the per-unit-margin drop of ``1/phi`` on base classes, ``t``
    the per-unit-margin drop of ``psi = D_inter(novel) / D_inter(base)``.
    Both are finite-difference ratios between the two margins.
    """

    m1: float
    m2: float
    base_inter: tuple[float, float]
    base_intra: tuple[float, float]
    novel_inter: tuple[float, float]

    def __post_init__(self):
        if not self.m1 < self.m2:
            raise ContractError(f"need m1 < m2, got {self.m1}, {self.m2}")

    def inv_phi_base(self, i: int) -> float:
        return self.base_intra[i] / self.base_inter[i]

    def psi(self, i: int) -> float:
        return self.novel_inter[i] / self.base_inter[i]

    @property
    def r(self) -> float:
        return (self.inv_phi_base(0) - self.inv_phi_base(1)) / (self.m2 - self.m1)

    @property
    def t(self) -> float:
        return (self.psi(0) - self.psi(1)) / (self.m2 - self.m1)

    @property
    def threshold(self) -> float:
        t = self.t
        return t / (t * (1.0 - self.inv_phi_base(0)) + self.r * self.psi(0))

    def novel_intra(self, i: int, p_same: float) -> float:
        return p_same * self.base_intra[i] + (1.0 - p_same) * self.base_inter[i]

    def phi_novel(self, i: int, p_same: float) -> float:
        return self.novel_inter[i] / self.novel_intra(i, p_same)


@dataclass
class PropositionVerdict:
    applicable: bool
    reason: str
    threshold: float = math.nan
    r: float = math.nan
    t: float = math.nan
    predicted: bool = False
    phi_novel_m1: float = math.nan
    phi_novel_m2: float = math.nan
    direct: bool = False

    @property
    def agrees(self) -> bool:
        """A positive prediction must be confirmed by the direct evaluation."""
        return not self.applicable or not self.predicted or self.direct


def check_proposition(inst: PropositionInstance, p_same: float) -> PropositionVerdict:
    vals = (*inst.base_inter, *inst.base_intra, *inst.novel_inter)
    if not all(v > 0 and math.isfinite(v) for v in vals):
        return PropositionVerdict(False, "variances must be positive and finite")
    if not 0 < p_same <= 1:
        return PropositionVerdict(False, f"P^s={p_same} outside (0, 1]")
    r, t = inst.r, inst.t
    if not r > 0:
        return PropositionVerdict(False, f"base discriminability not increasing (r={r:.6g})", r=r, t=t)
    if not t > 0:
        return PropositionVerdict(False, f"psi not decreasing (t={t:.6g})", r=r, t=t)
    thr = inst.threshold
    phi1 = inst.phi_novel(0, p_same)
    phi2 = inst.phi_novel(1, p_same)
    return PropositionVerdict(True, "ok", thr, r, t, bool(0 < p_same < thr), phi1, phi2, bool(phi2 < phi1))


def random_instance(rng: np.random.Generator) -> tuple[PropositionInstance, float]:
    """An admissible instance (r > 0, t > 0) and a P^s strictly below its threshold.

    Returns ``(instance, nan)`` in the rare case the threshold is not
    positive; callers redraw.
    """
    m1 = rng.uniform(-1.0, 0.5)
    m2 = m1 + rng.uniform(0.05, 1.0)
    base_inter = rng.uniform(0.2, 2.0, size=2)
    inv_phi1 = rng.uniform(0.05, 2.0)
    inv_phi2 = inv_phi1 * rng.uniform(0.1, 0.99)
    psi1 = rng.uniform(0.1, 2.0)
    psi2 = psi1 * rng.uniform(0.1, 0.99)
    inst = PropositionInstance(
        m1, m2,
        (base_inter[0], base_inter[1]),
        (inv_phi1 * base_inter[0], inv_phi2 * base_inter[1]),
        (psi1 * base_inter[0], psi2 * base_inter[1]),
    )
    thr = inst.threshold
    if not thr > 0:
        return inst, math.nan
    p = rng.uniform(0.0, min(thr, 1.0))
    return inst, (p if p > 0 else min(thr, 1.0) / 2)


def instance_from_reports(base1: AnalysisReport, base2: AnalysisReport,
                          novel1: AnalysisReport, novel2: AnalysisReport) -> PropositionInstance:
    return PropositionInstance(base1.margin, base2.margin, (base1.d_inter, base2.d_inter),
                               (base1.d_intra, base2.d_intra), (novel1.d_inter, novel2.d_inter))


# --- angular histograms and embedding export ---------------------------

def angular_histogram(features, labels, n_bins: int, n_classes: int | None = None):
    """Per-class counts of feature angles ``atan2(y, x)`` over [0, 2*pi).

    Returns ``(counts, bin_starts)`` with ``counts`` of shape
    ``(n_classes, n_bins)``. The zero vector has angle 0.
    """
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ContractError(f"angular histogram needs 2-D features, got shape {z.shape}")
    if n_bins < 4:
        raise ContractError(f"n_bins must be >= 4, got {n_bins}")
    y = np.asarray(labels, dtype=np.int64)
    n_classes = (int(y.max()) + 1 if len(y) else 0) if n_classes is None else n_classes
    theta = np.mod(np.arctan2(z[:, 1], z[:, 0]), 2 * np.pi)
    width = 2 * np.pi / n_bins
    bins = np.minimum((theta / width).astype(np.int64), n_bins - 1)
    counts = np.zeros((n_classes, n_bins), dtype=np.int64)
    np.add.at(counts, (y, bins), 1)
    return counts, np.arange(n_bins) * width


def histogram_rows(counts, bin_starts, class_names) -> list[dict]:
    return [{"class": class_names[c], "bin_start_rad": float(bin_starts[b]), "count": int(counts[c, b])}
            for c in range(counts.shape[0]) for b in range(counts.shape[1])]


def export_embeddings(net: Network, ds, path) -> None:
    """Write backbone features as CSV ``class,f0,...,f{D-1}``."""
    D = net.config.feature_dim
    z = net.features(ds.features) if len(ds) else np.zeros((0, D))
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["class"] + [f"f{i}" for i in range(D)])
            for row, y in zip(z, ds.labels):
                w.writerow([ds.class_names[y]] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc.strerror}") from exc
