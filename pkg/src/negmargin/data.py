"""Datasets, splits and the N-way K-shot episode sampler."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .numerics import l2_normalize

SPLIT_TAGS = ("base", "val", "novel", "all")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Feature rows with integer class ids indexing ``class_names``."""

    features: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    split_tag: str = "all"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = [str(c) for c in self.class_names]
        if self.split_tag not in SPLIT_TAGS:
            raise ContractError(f"unknown split tag {self.split_tag!r}")
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ContractError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
                raise ContractError("class id outside class_names")
            missing = set(range(len(self.class_names))) - set(np.unique(self.labels).tolist())
            if missing:
                raise ContractError(f"classes without records: {sorted(missing)}")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def indices_by_class(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.n_classes)]

    def subset(self, class_ids, split_tag=None) -> "LabeledDataset":
        """Keep only ``class_ids`` (original ids), relabelled 0..k-1 in the given order."""
        class_ids = [int(c) for c in class_ids]
        remap = np.full(self.n_classes, -1, dtype=np.int64)
        remap[class_ids] = np.arange(len(class_ids))
        keep = remap[self.labels] >= 0
        return LabeledDataset(self.features[keep], remap[self.labels[keep]],
                              [self.class_names[c] for c in class_ids], split_tag or self.split_tag)

    def take(self, idx, split_tag=None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_names, split_tag or self.split_tag)


@dataclass
class Episode:
    way: int
    shot: int
    query_per_class: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    classes: list[int] = field(default_factory=list)
    # Row indices into the source dataset, kept for disjointness checks.
    support_idx: np.ndarray | None = None
    query_idx: np.ndarray | None = None


@dataclass(frozen=True)
class SplitSpec:
    """Class-level assignment to base / val / novel (by class name)."""

    base: tuple[str, ...]
    val: tuple[str, ...] = ()
    novel: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        for name in ("base", "val", "novel"):
            object.__setattr__(self, name, tuple(str(c) for c in getattr(self, name)))
        check_disjoint(self.base, self.val, self.novel)


def check_disjoint(base, val=(), novel=()) -> None:
    groups = {"base": set(base), "val": set(val), "novel": set(novel)}
    for a, b in (("base", "val"), ("base", "novel"), ("val", "novel")):
        shared = groups[a] & groups[b]
        if shared:
            raise ContractError(f"{a} and {b} splits share classes {sorted(shared)}")


def split_dataset(ds: LabeledDataset, spec: SplitSpec) -> dict[str, LabeledDataset]:
    index = {name: i for i, name in enumerate(ds.class_names)}
    out = {}
    for tag in ("base", "val", "novel"):
        names = getattr(spec, tag)
        unknown = [n for n in names if n not in index]
        if unknown:
            raise ContractError(f"{tag} split names unknown classes {unknown}")
        if names:
            out[tag] = ds.subset([index[n] for n in names], split_tag=tag)
    return out


def holdout_split(ds: LabeledDataset, fraction: float, rng: np.random.Generator):
    """Per-class record holdout: returns ``(train, holdout)``, same classes in both.

    Each class keeps at least one training record.
    """
    if not 0.0 <= fraction < 1.0:
        raise ContractError(f"holdout fraction must lie in [0, 1), got {fraction}")
    train_idx, hold_idx = [], []
    for idx in ds.indices_by_class():
        perm = rng.permutation(idx)
        k = min(int(round(fraction * len(perm))), len(perm) - 1)
        hold_idx.append(perm[:k])
        train_idx.append(perm[k:])
    train = ds.take(np.sort(np.concatenate(train_idx)))
    hold = ds.take(np.sort(np.concatenate(hold_idx)))
    return train, hold


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def gen_synthetic(n_classes: int, per_class: int, dim: int, cluster_std: float,
                  confusability: float, seed: int, n_novel: int = 0) -> LabeledDataset:
    """Gaussian clusters projected onto the unit sphere.

    The last ``n_novel`` classes are "novel": their means are pulled toward
    a randomly chosen base-class mean by ``confusability`` (0 = independent
    direction, 1 = same direction as that base class).
    """
    if n_classes < 2 or per_class < 1 or dim < 1:
        raise ContractError("need n_classes >= 2, per_class >= 1, dim >= 1")
    if not 0.0 <= confusability <= 1.0:
        raise ContractError(f"confusability must lie in [0, 1], got {confusability}")
    if not 0 <= n_novel < n_classes:
        raise ContractError(f"n_novel must lie in [0, {n_classes}), got {n_novel}")
    if cluster_std < 0:
        raise ContractError("cluster_std must be >= 0")
    rng = np.random.Generator(np.random.Philox(seed))
    means = l2_normalize(rng.standard_normal((n_classes, dim)))
    n_base = n_classes - n_novel
    for c in range(n_base, n_classes):
        anchor = means[rng.integers(n_base)]
        means[c] = l2_normalize((1.0 - confusability) * means[c] + confusability * anchor)
    noise = rng.standard_normal((n_classes, per_class, dim))
    feats = l2_normalize(means[:, None, :] + cluster_std * noise).reshape(-1, dim)
    labels = np.repeat(np.arange(n_classes), per_class)
    return LabeledDataset(feats, labels, [f"c{c}" for c in range(n_classes)])


def sample_episode(ds: LabeledDataset, way: int, shot: int, query: int,
                   rng: np.random.Generator) -> Episode:
    """Draw ``way`` classes, then ``shot`` support and ``query`` query rows per class.

    Classes and records are drawn uniformly without replacement; episode
    labels are 0..way-1 in draw order.
    """
    if way < 1 or shot < 1 or query < 0:
        raise ContractError(f"invalid episode shape way={way} shot={shot} query={query}")
    if ds.n_classes < way:
        raise ContractError(f"dataset has {ds.n_classes} classes, episode needs {way}")
    by_class = ds.indices_by_class()
    classes = rng.choice(ds.n_classes, size=way, replace=False)
    sup, qry = [], []
    for c in classes:
        idx = by_class[c]
        if len(idx) < shot + query:
            raise ContractError(f"class {ds.class_names[c]!r} has {len(idx)} records, "
                                f"episode needs {shot + query}")
        picked = rng.choice(idx, size=shot + query, replace=False)
        sup.append(picked[:shot])
        qry.append(picked[shot:])
    sup_idx = np.concatenate(sup)
    qry_idx = np.concatenate(qry)
    return Episode(way, shot, query,
                   ds.features[sup_idx], np.repeat(np.arange(way), shot),
                   ds.features[qry_idx], np.repeat(np.arange(way), query),
                   [int(c) for c in classes], sup_idx, qry_idx)


# --- IDX ---------------------------------------------------------------

def _open_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(path, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for IDX magic at offset 0")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad {what} magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < size:
        raise FormatError(f"{path}: truncated data at offset {len(raw)}, expected {header + size} bytes")
    if len(raw) - header > size:
        raise FormatError(f"{path}: {len(raw) - header - size} trailing bytes at offset {header + size}")
    return dims, raw[header:]


def load_idx(images_path, labels_path, split_tag: str = "all") -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzipped).

    Pixels are scaled to [0, 1] and flattened row-major; class names are
    the label values as strings, class ids follow sorted label order.
    """
    dims, pix = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    (n_labels,), lab = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if dims[0] != n_labels:
        raise FormatError(f"{images_path}: {dims[0]} images at offset 4 but {labels_path} holds {n_labels} labels")
    if n_labels == 0:
        raise FormatError(f"{images_path}: no records (count 0 at offset 4)")
    feats = np.frombuffer(pix, dtype=np.uint8).reshape(dims[0], -1).astype(np.float64) / 255.0
    raw_labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    values = np.unique(raw_labels)
    labels = np.searchsorted(values, raw_labels)
    return LabeledDataset(feats, labels, [str(v) for v in values], split_tag)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels to IDX files."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or images.shape[0] != labels.shape[0]:
        raise ContractError(f"images {images.shape} and labels {labels.shape} disagree")
    if images.dtype != np.uint8 or labels.dtype != np.uint8:
        raise ContractError("IDX writer expects uint8 images and labels")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# --- CSV ---------------------------------------------------------------

def write_csv(ds: LabeledDataset, path) -> None:
    """``label,f0,f1,...`` with the class *name* in the label column."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(ds.dim)])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([ds.class_names[y]] + [repr(float(v)) for v in x])


def load_csv(path, split_tag: str = "all") -> LabeledDataset:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"{path}: empty file (line 1)")
    head = rows[0]
    if not head or head[0] != "label" or head[1:] != [f"f{i}" for i in range(len(head) - 1)]:
        raise FormatError(f"{path}: header must be label,f0,f1,... (line 1)")
    names, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(head):
            raise FormatError(f"{path}: expected {len(head)} fields, got {len(row)} (line {lineno})")
        try:
            feats.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}: {exc} (line {lineno})") from None
        names.append(row[0])
    if not names:
        raise FormatError(f"{path}: no records")
    classes = sorted(set(names), key=_natural_key)
    index = {c: i for i, c in enumerate(classes)}
    return LabeledDataset(np.array(feats), np.array([index[n] for n in names]), classes, split_tag)


def _natural_key(name: str):
    try:
        return (0, float(name), name)
    except ValueError:
        return (1, 0.0, name)


# --- bundled handwritten-digit samples ---------------------------------

def digit_images(source: str = "mlxtend") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(images uint8 (n, rows, cols), labels uint8)`` from an installed package.

    ``mlxtend`` ships a 5000-image MNIST subset (28x28, 500 per digit);
    ``digits`` is scikit-learn's 8x8 digit set rescaled to 0..255. Both
    are optional dependencies and are imported lazily.
    """
    if source == "mlxtend":
        try:
            from mlxtend.data import mnist_data
        except ImportError as exc:
            raise ContractError("source 'mlxtend' needs the mlxtend package (pip install mlxtend)") from exc
        X, y = mnist_data()
        return np.asarray(X, dtype=np.uint8).reshape(-1, 28, 28), np.asarray(y, dtype=np.uint8)
    if source == "digits":
        try:
            from sklearn.datasets import load_digits
        except ImportError as exc:
            raise ContractError("source 'digits' needs scikit-learn") from exc
        d = load_digits()
        img = np.rint(d.images * (255.0 / 16.0)).astype(np.uint8)
        return img, d.target.astype(np.uint8)
    raise ContractError(f"unknown digit source {source!r}; use 'mlxtend' or 'digits'")
