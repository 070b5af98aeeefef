"""Dense MLP substrate with hand-written backprop.

A model is ``f = c o g``: the first ``split`` layers form the feature
extractor ``g`` and the remaining ones the classifier head ``c``. Every
layer except the last is ``linear -> batchnorm -> relu``; the last is a bare
linear map producing logits. All arrays are float64.

Weights are stored as ``(fan_in, fan_out)`` so a forward pass is ``x @ W + b``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

BN_MOMENTUM = 0.9
BN_EPS = 1e-5

MAGIC = b"MFED"
FORMAT_VERSION = 1


@dataclass
class Norm:
    """Batch-norm state for one layer: running statistics plus the affine pair."""

    mean: np.ndarray
    var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    @classmethod
    def fresh(cls, width: int) -> "Norm":
        return cls(np.zeros(width), np.ones(width), np.ones(width), np.zeros(width))

    def copy(self) -> "Norm":
        return Norm(self.mean.copy(), self.var.copy(), self.scale.copy(), self.shift.copy())


@dataclass
class Model:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norms: list[Norm | None]
    split: int

    def __post_init__(self):
        n = len(self.weights)
        if n == 0 or len(self.biases) != n or len(self.norms) != n:
            raise ShapeError("weights, biases and norms must be non-empty lists of equal length")
        if not 0 < self.split < n:
            raise ShapeError(f"split must satisfy 0 < split < {n}, got {self.split}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k + 1 < n and self.weights[k + 1].shape[0] != w.shape[1]:
                raise ShapeError(f"layer {k} out-dim {w.shape[1]} != layer {k + 1} in-dim")
            nm = self.norms[k]
            if nm is not None:
                if k == n - 1:
                    raise ShapeError("the output layer cannot carry a norm layer")
                if np.any(nm.var <= 0):
                    raise ShapeError(f"layer {k}: running variance must be strictly positive")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Model":
        return Model(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [None if nm is None else nm.copy() for nm in self.norms],
            self.split,
        )

    def architecture(self) -> tuple:
        return (tuple(self.dims), tuple(nm is not None for nm in self.norms), self.split)

    def n_params(self, include_norm: bool = True) -> int:
        total = sum(w.size + b.size for w, b in zip(self.weights, self.biases))
        if include_norm:
            total += sum(4 * nm.mean.size for nm in self.norms if nm is not None)
        return total


@dataclass
class Grads:
    """Gradient per trainable array; ``scales``/``shifts`` are None where a layer has no norm."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    scales: list[np.ndarray | None]
    shifts: list[np.ndarray | None]

    @classmethod
    def zeros_like(cls, model: Model) -> "Grads":
        return cls(
            [np.zeros_like(w) for w in model.weights],
            [np.zeros_like(b) for b in model.biases],
            [None if nm is None else np.zeros_like(nm.scale) for nm in model.norms],
            [None if nm is None else np.zeros_like(nm.shift) for nm in model.norms],
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for k in range(len(self.weights)):
            out += [self.weights[k], self.biases[k]]
            if self.scales[k] is not None:
                out += [self.scales[k], self.shifts[k]]
        return out


def trainable_arrays(model: Model) -> list[np.ndarray]:
    """Live views of trainable arrays, in the same order as ``Grads.arrays``."""
    out = []
    for k in range(model.n_layers):
        out += [model.weights[k], model.biases[k]]
        nm = model.norms[k]
        if nm is not None:
            out += [nm.scale, nm.shift]
    return out


def init_model(dims, rng: np.random.Generator, *, split: int = 1, norm: bool = True) -> Model:
    """Glorot-uniform MLP with layer sizes ``dims`` (input, hidden..., classes)."""
    dims = [int(d) for d in dims]
    if len(dims) < 3:
        raise ShapeError("need at least one hidden layer so g and c are both non-empty")
    weights, biases, norms = [], [], []
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        last = k == len(dims) - 2
        norms.append(Norm.fresh(fan_out) if norm and not last else None)
    return Model(weights, biases, norms, split)


@dataclass
class Forward:
    """Result of a forward pass.

    ``features[k]`` is the post-activation output of hidden block ``k`` (so
    ``features[split - 1]`` is the output of ``g``). ``cache`` holds what
    ``backward`` needs.
    """

    features: list[np.ndarray]
    logits: np.ndarray
    train: bool
    cache: list[dict] = field(default_factory=list, repr=False)


def forward(model: Model, x: np.ndarray, *, train: bool = False, update_stats: bool = True) -> Forward:
    """Run the network on a batch.

    In train mode, normalization uses batch statistics and (if
    ``update_stats``) folds them into the running statistics in place. Eval
    mode uses the stored running statistics and never mutates the model.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ShapeError(f"input of shape {x.shape} does not fit in-dim {model.dims[0]}")
    a = x
    feats, cache = [], []
    last = model.n_layers - 1
    for k in range(model.n_layers):
        w, b, nm = model.weights[k], model.biases[k], model.norms[k]
        z = a @ w + b
        entry = {"a_in": a}
        if k == last:
            cache.append(entry)
            a = z
            break
        if nm is not None:
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    nm.mean *= BN_MOMENTUM
                    nm.mean += (1.0 - BN_MOMENTUM) * mu
                    nm.var *= BN_MOMENTUM
                    nm.var += (1.0 - BN_MOMENTUM) * var
            else:
                mu, var = nm.mean, nm.var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            y = nm.scale * zhat + nm.shift
            entry.update(zhat=zhat, inv_std=inv_std)
        else:
            y = z
        a = np.maximum(y, 0.0)
        entry["mask"] = y > 0
        cache.append(entry)
        feats.append(a)
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite logits in forward pass")
    return Forward(feats, a, train, cache)


def backward(model: Model, fwd: Forward, dlogits: np.ndarray, dfeats: dict[int, np.ndarray] | None = None) -> Grads:
    """Chain rule through the cached forward pass.

    ``dlogits`` is the loss gradient w.r.t. the logits; ``dfeats`` maps a
    hidden-block index to an extra gradient injected at that block's output
    (used by feature distillation).
    """
    dfeats = dfeats or {}
    grads = Grads.zeros_like(model)
    n = dlogits.shape[0]
    delta = dlogits
    last = model.n_layers - 1
    for k in range(last, -1, -1):
        entry = fwd.cache[k]
        if k == last:
            dz = delta
        else:
            da = delta
            if k in dfeats:
                da = da + dfeats[k]
            dy = da * entry["mask"]
            nm = model.norms[k]
            if nm is not None:
                zhat = entry["zhat"]
                grads.scales[k] = (dy * zhat).sum(axis=0)
                grads.shifts[k] = dy.sum(axis=0)
                dzhat = dy * nm.scale
                if fwd.train:
                    dz = entry["inv_std"] / n * (
                        n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0)
                    )
                else:
                    dz = dzhat * entry["inv_std"]
            else:
                dz = dy
        grads.weights[k] = entry["a_in"].T @ dz
        grads.biases[k] = dz.sum(axis=0)
        if k > 0:
            delta = dz @ model.weights[k].T
    return grads


def sgd_step(model: Model, grads: Grads, lr: float) -> Model:
    """In-place ``param -= lr * grad`` on trainable arrays; running stats are left alone."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    params = trainable_arrays(model)
    gs = grads.arrays()
    if len(params) != len(gs):
        raise ShapeError("gradient structure does not match model")
    for p, g in zip(params, gs):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p -= lr * g
    return model


def copy_model(src: Model, dst: Model, preserve_local_norm: bool = False) -> Model:
    """Return a new model holding ``src``'s parameters.

    With ``preserve_local_norm`` the norm layers (running stats and affine
    pair) come from ``dst`` instead, FedBN style.
    """
    if src.architecture() != dst.architecture():
        raise ShapeError("copy_model needs identical architectures")
    out = src.copy()
    if preserve_local_norm:
        out.norms = [None if nm is None else nm.copy() for nm in dst.norms]
    return out


# -- serialization ---------------------------------------------------------
#
# Layout (little endian):
#   "MFED" | u16 version | u16 n_layers | u16 split | u16 flags
#   n_layers x (u32 fan_in, u32 fan_out, u8 has_norm)
#   float64 data per layer: W (row-major), b, [mean, var, scale, shift]
# flags bit 0 set means the norm arrays were omitted (payload without local BN).

_HEADER = struct.Struct("<4sHHHH")
_LAYER = struct.Struct("<IIB")


def to_bytes(model: Model, include_norm: bool = True) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, model.n_layers, model.split, 0 if include_norm else 1)]
    for w, nm in zip(model.weights, model.norms):
        parts.append(_LAYER.pack(w.shape[0], w.shape[1], nm is not None))
    for w, b, nm in zip(model.weights, model.biases, model.norms):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        if nm is not None and include_norm:
            for arr in (nm.mean, nm.var, nm.scale, nm.shift):
                parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> Model:
    if len(blob) < _HEADER.size:
        raise ShapeError("truncated model header")
    magic, version, n_layers, split, flags = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ShapeError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ShapeError(f"unsupported format version {version}")
    if flags & 1:
        raise ShapeError("payload omits norm layers; it cannot be restored on its own")
    off = _HEADER.size
    shapes = []
    for _ in range(n_layers):
        shapes.append(_LAYER.unpack_from(blob, off))
        off += _LAYER.size

    def take(count):
        nonlocal off
        end = off + 8 * count
        if end > len(blob):
            raise ShapeError("truncated model payload")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64)
        off = end
        return arr

    weights, biases, norms = [], [], []
    for fan_in, fan_out, has_norm in shapes:
        weights.append(take(fan_in * fan_out).reshape(fan_in, fan_out))
        biases.append(take(fan_out))
        norms.append(Norm(*(take(fan_out) for _ in range(4))) if has_norm else None)
    if off != len(blob):
        raise ShapeError("trailing bytes after model payload")
    return Model(weights, biases, norms, split)


def payload_nbytes(model: Model, include_norm: bool = True) -> int:
    n_floats = model.n_params(include_norm=include_norm)
    return _HEADER.size + model.n_layers * _LAYER.size + 8 * n_floats


def checksum(model: Model) -> str:
    return hashlib.sha256(to_bytes(model)).hexdigest()[:16]
