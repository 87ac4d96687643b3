"""Flat ``key=value`` run configuration and dataset manifests.

One setting per line, ``#`` starts a comment. Every key has a default and
unknown keys are rejected with their line number. ``RunConfig.to_text``
writes the effective configuration back in the same format.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import LabeledDataset, SplitSpec, gen_synthetic, holdout_split, load_csv, load_idx, split_dataset
from .errors import ConfigError, NegMarginError
from .losses import DEFAULT_TEMPERATURE, LossSpec
from .model import SIMILARITIES, BackboneConfig
from .numerics import make_rng
from .pipeline import FinetuneConfig, PretrainConfig, SweepBundle

SEED_ENV = "NEGMARGIN_SEED"


def parse_grid(text: str) -> tuple[float, ...]:
    """``start:step:end`` (inclusive, ascending) or a comma list.

    The sign of ``step`` is ignored; the grid always runs from ``start``
    toward ``end``.
    """
    text = text.strip()
    if not text:
        return ()
    if ":" not in text:
        return tuple(sorted(float(v) for v in text.split(",") if v.strip()))
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid {text!r} is not start:step:end")
    start, step, end = (float(p) for p in parts)
    step = abs(step)
    if step == 0:
        raise ValueError("grid step must be non-zero")
    lo, hi = sorted((start, end))
    n = int(round((hi - lo) / step))
    if abs(lo + n * step - hi) > 1e-9 * max(1.0, abs(hi)):
        raise ValueError(f"grid {text!r}: step does not divide the range")
    return tuple(round(lo + i * step, 10) + 0.0 for i in range(n + 1))


def _format_grid(values) -> str:
    return ",".join(repr(float(v)) for v in values)


@dataclass(frozen=True)
class RunConfig:
    data: str = ""
    seed: int = 0
    similarity: str = "cosine"
    margin: float = 0.0
    # 0 means "default for the similarity" (10 cosine, 1 inner product).
    temperature: float = 0.0
    label_smoothing: float = 0.0
    hidden_dims: tuple[int, ...] = (128, 64)
    feature_dim: int = 2
    activation: str = "relu"
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = True
    holdout_fraction: float = 0.1
    finetune_margin: float = 0.0
    finetune_steps: int = 100
    finetune_lr: float = 0.05
    finetune_weight_decay: float = 0.0
    way: int = 5
    base_way: int = 5
    shots: tuple[int, ...] = (1, 5)
    query: int = 16
    episodes: int = 600
    margins: tuple[float, ...] = (-0.5, -0.3, -0.1, 0.0, 0.1, 0.3)
    n_bins: int = 72
    workers: int = 1

    def __post_init__(self):
        if self.similarity not in SIMILARITIES:
            raise ConfigError(f"similarity must be one of {SIMILARITIES}, got {self.similarity!r}")
        if self.temperature == 0:
            object.__setattr__(self, "temperature", DEFAULT_TEMPERATURE[self.similarity])

    # -- derived configs -------------------------------------------------

    def loss(self) -> LossSpec:
        return LossSpec(self.margin, self.temperature, self.similarity, self.label_smoothing)

    def backbone(self, input_dim: int) -> BackboneConfig:
        return BackboneConfig(input_dim, self.hidden_dims, self.feature_dim, self.activation)

    def pretrain(self, input_dim: int) -> PretrainConfig:
        return PretrainConfig(self.loss(), self.backbone(input_dim), self.epochs, self.batch_size,
                              self.seed, self.lr, self.weight_decay, self.decoupled_weight_decay)

    def finetune(self) -> FinetuneConfig:
        # Stage two reuses the pretraining similarity and temperature.
        spec = LossSpec(self.finetune_margin, self.temperature, self.similarity)
        return FinetuneConfig(spec, self.finetune_steps, self.finetune_lr, self.finetune_weight_decay, self.seed)

    # -- text round trip -------------------------------------------------

    def to_text(self) -> str:
        lines = ["# effective configuration (defaults resolved)"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif f.name == "margins":
                text = _format_grid(v)
            elif isinstance(v, tuple):
                text = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(name: str, text: str):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    if name == "margins":
        return parse_grid(text)
    if kind == "bool":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind.startswith("tuple[int"):
        return tuple(int(v) for v in text.split(",") if v.strip())
    return text


def parse_key_values(text: str, allowed, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Split ``key=value`` lines; returns ``{key: (raw value, line number)}``."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: expected key=value (line {lineno})")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' (line {lineno})")
        if key in out:
            raise ConfigError(f"duplicate key '{key}' (line {lineno})")
        out[key] = (value, lineno)
    return out


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    values = {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env_seed!r} is not an integer") from None
    for key, (raw, lineno) in parse_key_values(text, _FIELD_TYPES, source).items():
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}' (line {lineno}): {exc}") from None
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return RunConfig(**values)
    except NegMarginError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config("", overrides=overrides)
    path = Path(path)
    cfg = parse_config(path.read_text(encoding="utf-8"), str(path), overrides)
    if cfg.data and not Path(cfg.data).is_absolute():
        cfg = replace(cfg, data=str((path.parent / cfg.data).resolve()))
    return cfg


# --- dataset manifests ---------------------------------------------------

MANIFEST_KEYS = {
    "format", "images", "labels", "path",
    "n_classes", "per_class", "dim", "cluster_std", "confusability", "n_novel", "seed",
    "base_classes", "val_classes", "novel_classes",
}


@dataclass
class DataSplits:
    """Base training records, held-out base records, and the novel / val splits."""

    base_train: LabeledDataset
    base_holdout: LabeledDataset
    novel: LabeledDataset
    val: LabeledDataset | None = None

    def by_name(self, split: str) -> LabeledDataset:
        table = {"base": self.base_holdout, "novel": self.novel, "val": self.val, "base_train": self.base_train}
        ds = table.get(split)
        if ds is None:
            raise ConfigError(f"split {split!r} is not available in this manifest")
        return ds


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def load_manifest(path) -> tuple[LabeledDataset, SplitSpec]:
    """Read a manifest and the dataset it points to.

    Relative paths resolve against the manifest's directory. When
    ``base_classes`` is omitted, every class not listed as val/novel is base.
    """
    path = Path(path)
    kv = {k: v for k, (v, _) in parse_key_values(path.read_text(encoding="utf-8"), MANIFEST_KEYS, str(path)).items()}
    fmt = kv.get("format", "idx")

    def rel(key):
        if key not in kv:
            raise ConfigError(f"{path}: manifest needs '{key}' for format {fmt}")
        p = Path(kv[key])
        return p if p.is_absolute() else path.parent / p

    try:
        if fmt == "idx":
            ds = load_idx(rel("images"), rel("labels"))
        elif fmt == "csv":
            ds = load_csv(rel("path"))
        elif fmt == "synthetic":
            n_novel = int(kv.get("n_novel", 0))
            ds = gen_synthetic(int(kv.get("n_classes", 10)), int(kv.get("per_class", 50)), int(kv.get("dim", 16)),
                               float(kv.get("cluster_std", 0.3)), float(kv.get("confusability", 0.0)),
                               int(kv.get("seed", 0)), n_novel)
            if "novel_classes" not in kv and n_novel:
                kv["novel_classes"] = ",".join(ds.class_names[-n_novel:])
        else:
            raise ConfigError(f"{path}: unknown data format {fmt!r}")
    except ValueError as exc:
        if isinstance(exc, NegMarginError):
            raise
        raise ConfigError(f"{path}: {exc}") from None
    val, novel = _names(kv.get("val_classes", "")), _names(kv.get("novel_classes", ""))
    base = _names(kv.get("base_classes", "")) or tuple(c for c in ds.class_names if c not in val + novel)
    return ds, SplitSpec(base, val, novel, int(kv.get("seed", 0)))


def prepare_splits(manifest, cfg: RunConfig) -> DataSplits:
    ds, spec = load_manifest(manifest)
    parts = split_dataset(ds, spec)
    if "base" not in parts:
        raise ConfigError(f"{manifest}: no base classes")
    if "novel" not in parts:
        raise ConfigError(f"{manifest}: no novel classes")
    train, hold = holdout_split(parts["base"], cfg.holdout_fraction, make_rng(cfg.seed, "holdout"))
    hold.split_tag = "base"
    return DataSplits(train, hold, parts["novel"], parts.get("val"))


def sweep_bundle(cfg: RunConfig, splits: DataSplits) -> SweepBundle:
    return SweepBundle(cfg.pretrain(splits.base_train.dim), cfg.finetune(), splits.base_train,
                       splits.base_holdout, splits.novel, cfg.way, cfg.base_way, cfg.shots,
                       cfg.query, cfg.episodes, cfg.workers)
