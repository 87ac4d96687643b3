"""Report figures. Each function writes one PNG and closes its figure."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps PNG bytes stable across runs of the same version.
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def _seed_mean(sweeps, value):
    """Margins and the across-seed mean of ``value(run)``, skipping failed runs."""
    table = {}
    for sw in sweeps:
        for r in sw.runs:
            if r.error is None:
                v = value(r)
                if v is not None:
                    table.setdefault(r.margin, []).append(v)
    xs = sorted(table)
    return xs, [float(np.mean(table[x])) for x in xs]


def plot_accuracy_vs_margin(sweeps, path, shot: int = 1):
    """Few-shot accuracy (with mean 95% CI bars) against the pretraining margin.

    ``sweeps`` is one ``SweepResult`` per seed; points are seed averages.
    """
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for split, color in (("novel", "tab:red"), ("base", "tab:blue")):
        def get(r, attr):
            res = r.evals.get((split, shot))
            return None if res is None else 100 * getattr(res, attr)
        xs, ys = _seed_mean(sweeps, lambda r: get(r, "mean"))
        _, es = _seed_mean(sweeps, lambda r: get(r, "ci95"))
        if xs:
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, color=color, label=f"{split} ({shot}-shot)")
    ax.axvline(0.0, color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("margin m")
    ax.set_ylabel("accuracy (%)")
    ax.set_xticks(sweeps[0].margins)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_discriminability(sweeps, path):
    """Seed-averaged D_inter, D_intra and phi per split against margin."""
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    for split, color in (("base", "tab:red"), ("novel", "tab:blue")):
        for ax, attr, label in zip(axes, ("d_inter", "d_intra", "phi"), ("$D_{inter}$", "$D_{intra}$", r"$\phi$")):
            xs, ys = _seed_mean(sweeps, lambda r: getattr(r.reports[split], attr) if split in r.reports else None)
            ax.plot(xs, ys, "o-", color=color, label=split)
            ax.set_title(label)
            ax.set_xlabel("margin m")
    axes[0].legend(frameon=False)
    _save(fig, path)


def plot_ps_accuracy(pairs, path):
    """Scatter of per-novel-class P_j^s against 1-shot accuracy on that class."""
    fig, ax = plt.subplots(figsize=(4.5, 3.6))
    for margin in sorted({p[0] for p in pairs}):
        pts = np.array([(p[1], p[2]) for p in pairs if p[0] == margin])
        ax.scatter(pts[:, 0], 100 * pts[:, 1], s=18, label=f"m={margin:g}")
    ax.set_xlabel("$P_j^s$")
    ax.set_ylabel("1-shot accuracy (%)")
    ax.legend(frameon=False, fontsize=7)
    _save(fig, path)


def plot_angular_histogram(counts, bin_starts, class_names, path, title=""):
    """Per-class histogram of feature angles on [0, 2*pi)."""
    fig, ax = plt.subplots(figsize=(6, 2.8))
    width = bin_starts[1] - bin_starts[0] if len(bin_starts) > 1 else 2 * np.pi
    centers = np.degrees(bin_starts + width / 2)
    for c, name in enumerate(class_names):
        ax.plot(centers, counts[c], lw=1.2, label=str(name))
    ax.set_xlim(0, 360)
    ax.set_xlabel("angle (degrees)")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=7, ncol=min(len(class_names), 5))
    _save(fig, path)


def plot_confusion(profile, path):
    """Soft novel-to-base assignment matrix, rows sorted by P_j^s."""
    order = np.argsort(-profile.per_class)
    fig, ax = plt.subplots(figsize=(1 + 0.45 * profile.P.shape[1], 1 + 0.4 * profile.P.shape[0]))
    im = ax.imshow(profile.P[order], vmin=0, vmax=1, cmap="viridis", aspect="auto")
    ax.set_yticks(range(len(order)), [f"{profile.novel_names[j]} ({profile.per_class[j]:.2f})" for j in order])
    ax.set_xticks(range(profile.P.shape[1]), profile.base_names)
    ax.set_xlabel("base class")
    ax.set_ylabel("novel class ($P_j^s$)")
    fig.colorbar(im, ax=ax)
    _save(fig, path)
