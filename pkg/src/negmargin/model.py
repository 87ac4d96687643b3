"""Dense feature extractor plus a bias-free classifier head.

The backbone is a stack of affine layers; hidden layers use the configured
activation and the final (feature) layer is linear so that low-dimensional
features can occupy the whole circle/sphere. Scores are either inner
products ``z . W_j`` or cosines between ``z`` and ``W_j``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .numerics import DEFAULT_EPS, as_matrix

SIMILARITIES = ("inner_product", "cosine")
ACTIVATIONS = ("relu", "tanh")

CHECKPOINT_MAGIC = b"NEGMARGIN-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    feature_dim: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        if any(d < 1 for d in dims):
            raise ContractError(f"all layer widths must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.feature_dim)


def check_similarity(kind: str) -> str:
    if kind not in SIMILARITIES:
        raise ContractError(f"unknown similarity {kind!r}; expected one of {SIMILARITIES}")
    return kind


def _normalize_backward(grad, unit, norm, eps):
    # d(v / max(|v|, eps)) applied to an upstream gradient, row-wise.
    radial = np.sum(grad * unit, axis=-1, keepdims=True)
    big = norm >= eps
    return np.where(big, (grad - unit * radial) / np.maximum(norm, eps), grad / eps)


def head_forward(z: np.ndarray, W: np.ndarray, similarity: str, eps: float = DEFAULT_EPS):
    """Scores ``s(z_i, W_j)`` for every row of ``z`` and column of ``W``.

    Returns ``(scores, cache)``; the cache feeds :func:`head_backward`.
    """
    if z.shape[1] != W.shape[0]:
        raise ContractError(f"feature width {z.shape[1]} does not match classifier rows {W.shape[0]}")
    if similarity == "inner_product":
        return z @ W, (similarity, z, W)
    if similarity == "cosine":
        z_norm = np.sqrt(np.sum(z * z, axis=1, keepdims=True))
        w_norm = np.sqrt(np.sum(W * W, axis=0, keepdims=True)).T
        z_hat = z / np.maximum(z_norm, eps)
        w_hat = W.T / np.maximum(w_norm, eps)
        return z_hat @ w_hat.T, (similarity, z_hat, z_norm, w_hat, w_norm, eps)
    raise ContractError(f"unknown similarity {similarity!r}")


def head_backward(upstream: np.ndarray, cache):
    """Return ``(dL/dz, dL/dW)`` given ``dL/dscores``."""
    if cache[0] == "inner_product":
        _, z, W = cache
        return upstream @ W.T, z.T @ upstream
    _, z_hat, z_norm, w_hat, w_norm, eps = cache
    dz_hat = upstream @ w_hat
    dw_hat = upstream.T @ z_hat
    dz = _normalize_backward(dz_hat, z_hat, z_norm, eps)
    dW = _normalize_backward(dw_hat, w_hat, w_norm, eps).T
    return dz, dW


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class Network:
    """Backbone ``f_theta`` and classifier matrix ``W`` (D x C, no bias).

    Parameters live in ``params`` under the names ``layer{i}.weight``
    (shape in x out), ``layer{i}.bias`` and ``classifier``; ``grads`` mirrors
    them.
    """

    config: BackboneConfig
    n_classes: int
    similarity: str = "cosine"
    class_names: list[str] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        check_similarity(self.similarity)
        if self.n_classes < 1:
            raise ContractError("a network needs at least one class")
        if not self.class_names:
            self.class_names = [str(i) for i in range(self.n_classes)]
        if not self.params:
            self.params = {name: np.zeros(shape) for name, shape in self.shapes().items()}
        self._check_shapes()
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        self._cache = None

    @classmethod
    def initialized(cls, config: BackboneConfig, n_classes: int, rng: np.random.Generator,
                    similarity: str = "cosine", class_names=None) -> "Network":
        net = cls(config, n_classes, similarity, list(class_names or []))
        widths = config.widths
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if config.activation == "relu" and not last:
                net.params[f"layer{i}.weight"] = he_uniform(rng, fan_in, fan_out)
            else:
                net.params[f"layer{i}.weight"] = glorot_uniform(rng, fan_in, fan_out)
        net.params["classifier"] = glorot_uniform(rng, config.feature_dim, n_classes)
        return net

    @property
    def n_layers(self) -> int:
        return len(self.config.widths) - 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        widths = self.config.widths
        out = {}
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            out[f"layer{i}.weight"] = (fan_in, fan_out)
            out[f"layer{i}.bias"] = (fan_out,)
        out["classifier"] = (self.config.feature_dim, self.n_classes)
        return out

    def _check_shapes(self):
        expected = self.shapes()
        if set(expected) != set(self.params):
            raise ContractError(f"parameter names {sorted(self.params)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            self.params[name] = np.asarray(self.params[name], dtype=np.float64)
            if self.params[name].shape != shape:
                raise ContractError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def _activate(self, h):
        return np.maximum(h, 0.0) if self.config.activation == "relu" else np.tanh(h)

    def _activate_grad(self, pre, post):
        if self.config.activation == "relu":
            return (pre > 0).astype(np.float64)
        return 1.0 - post * post

    def features(self, batch) -> np.ndarray:
        """Backbone output for ``batch`` without touching the backward cache."""
        return self._run_backbone(self._check_batch(batch))[0]

    def _check_batch(self, batch):
        x = as_matrix(batch, "batch")
        if x.shape[1] != self.config.input_dim:
            raise ContractError(f"batch width {x.shape[1]} != input_dim {self.config.input_dim}")
        return x

    def _run_backbone(self, x):
        acts, pres = [x], []
        h = x
        for i in range(self.n_layers):
            pre = h @ self.params[f"layer{i}.weight"] + self.params[f"layer{i}.bias"]
            pres.append(pre)
            h = pre if i == self.n_layers - 1 else self._activate(pre)
            acts.append(h)
        return h, acts, pres

    def forward(self, batch):
        x = self._check_batch(batch)
        z, acts, pres = self._run_backbone(x)
        scores, head_cache = head_forward(z, self.params["classifier"], self.similarity)
        self._cache = (acts, pres, head_cache)
        return z, scores

    def backward(self, upstream) -> dict[str, np.ndarray]:
        """Accumulate ``dL/dparam`` into ``grads`` given ``dL/dscores``."""
        if self._cache is None:
            raise ContractError("backward called without a cached forward pass")
        acts, pres, head_cache = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != (acts[0].shape[0], self.n_classes):
            raise ContractError(f"upstream shape {g.shape} does not match scores")
        dz, dW = head_backward(g, head_cache)
        self.grads["classifier"] += dW
        delta = dz
        for i in reversed(range(self.n_layers)):
            if i != self.n_layers - 1:
                delta = delta * self._activate_grad(pres[i], acts[i + 1])
            self.grads[f"layer{i}.weight"] += acts[i].T @ delta
            self.grads[f"layer{i}.bias"] += delta.sum(axis=0)
            delta = delta @ self.params[f"layer{i}.weight"].T
        return self.grads

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def invalidate(self):
        self._cache = None

    def copy(self) -> "Network":
        return Network(self.config, self.n_classes, self.similarity, list(self.class_names),
                       {k: v.copy() for k, v in self.params.items()})

    def predict(self, batch) -> np.ndarray:
        z = self.features(batch)
        scores, _ = head_forward(z, self.params["classifier"], self.similarity)
        return np.argmax(scores, axis=1)


def save_checkpoint(net: Network, path, meta=None) -> None:
    """Write a checkpoint: magic line, one JSON header line, raw float64 data.

    The header lists tensors in storage order with their shapes; the data
    section is each tensor in C order, little-endian.  No timestamps are
    written, so identical parameters give identical bytes.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "backbone": asdict(net.config),
        "n_classes": net.n_classes,
        "similarity": net.similarity,
        "class_names": net.class_names,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in net.params.items()],
        "meta": meta or {},
    }
    path = Path(path)
    with path.open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in net.params.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Network, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: bad checkpoint magic at offset 0")
    offset = len(CHECKPOINT_MAGIC)
    end = raw.find(b"\n", offset)
    if end < 0:
        raise FormatError(f"{path}: unterminated header at offset {offset}")
    try:
        header = json.loads(raw[offset:end].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable header at offset {offset}: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = end + 1
    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64)) * 8
        if offset + n > len(raw):
            raise FormatError(f"{path}: truncated tensor {t['name']} at offset {offset}")
        params[t["name"]] = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(t["shape"]).astype(np.float64)
        offset += n
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes at offset {offset}")
    bb = header["backbone"]
    config = BackboneConfig(bb["input_dim"], tuple(bb["hidden_dims"]), bb["feature_dim"], bb["activation"])
    net = Network(config, header["n_classes"], header["similarity"], header["class_names"], params)
    return net, header["meta"]
