"""Training objectives: cross-entropy, feature distillation, FedProx's proximal
term, their weighted sum, and the adaptive distillation weight used during
personalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nncore import Grads, Model, backward, forward

TAPS = ("last_hidden_block", "penultimate", "combined")


@dataclass(frozen=True)
class LossSpec:
    """Which loss terms are active and how strongly.

    ``lam`` weights feature distillation, ``prox_mu`` the proximal term.
    ``tap`` picks the hidden boundary (or boundaries) whose activations are
    matched against the teacher's.
    """

    lam: float = 0.0
    tap: str = "last_hidden_block"
    prox_mu: float = 0.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not self.prox_mu >= 0:
            raise ConfigError(f"proximal mu must be >= 0, got {self.prox_mu}")
        if self.tap not in TAPS:
            raise ConfigError(f"unknown tap {self.tap!r}; expected one of {TAPS}")


def tap_indices(model: Model, tap: str) -> list[int]:
    """Hidden-block indices whose outputs feed the distillation term.

    ``last_hidden_block`` is the output of the feature extractor g,
    ``penultimate`` the input to the final linear layer, ``combined`` the
    last two hidden boundaries.
    """
    n_hidden = model.n_layers - 1
    if tap == "last_hidden_block":
        return [model.split - 1]
    if tap == "penultimate":
        return [n_hidden - 1]
    if tap == "combined":
        if n_hidden < 2:
            raise ConfigError("combined tap needs at least two hidden blocks")
        return [n_hidden - 2, n_hidden - 1]
    raise ConfigError(f"unknown tap {tap!r}")


def teacher_features(teacher: Model, x: np.ndarray, tap: str) -> list[np.ndarray]:
    """Teacher activations at the tap, computed in eval mode and treated as constants."""
    fwd = forward(teacher, x, train=False)
    return [fwd.features[k] for k in tap_indices(teacher, tap)]


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.intp)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = _check_labels(logits, labels)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(labels.size), labels].mean())


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = _check_labels(logits, labels)
    p = np.exp(_log_softmax(logits))
    p[np.arange(labels.size), labels] -= 1.0
    return p / labels.size


def distill_loss(teacher_feats: np.ndarray, student_feats: np.ndarray) -> float:
    """Batch mean of the squared L2 distance between matching feature rows."""
    if teacher_feats.shape != student_feats.shape:
        raise ShapeError(f"feature shapes differ: {teacher_feats.shape} vs {student_feats.shape}")
    diff = student_feats - teacher_feats
    return float((diff * diff).sum(axis=1).mean())


def distill_grad(teacher_feats: np.ndarray, student_feats: np.ndarray) -> np.ndarray:
    return 2.0 * (student_feats - teacher_feats) / student_feats.shape[0]


def _plain_pairs(model: Model, reference: Model):
    if model.architecture() != reference.architecture():
        raise ShapeError("proximal term needs identical architectures")
    yield from zip(model.weights, reference.weights)
    yield from zip(model.biases, reference.biases)


def proximal_term(model: Model, reference: Model, mu: float) -> float:
    """``mu/2 * ||w - w_ref||^2`` over weights and biases (norm layers excluded)."""
    if mu == 0:
        return 0.0
    return 0.5 * mu * sum(float(((p - q) ** 2).sum()) for p, q in _plain_pairs(model, reference))


def lambda_schedule(lambda0: float, acc_common: float, acc_local: float) -> float:
    """Distillation weight for personalization.

    Grows tenfold per 0.2 of accuracy advantage of the common model over the
    local one, capped at ``lambda0`` once the advantage reaches 0.2.
    """
    return lambda0 * 10.0 ** (min(1.0, (acc_common - acc_local) * 5) - 1)


def _validate(spec: LossSpec, teacher_present: bool, reference_present: bool):
    if spec.lam > 0 and not teacher_present:
        raise ConfigError("distillation is active (lambda > 0) but no teacher was given")
    if spec.prox_mu > 0 and not reference_present:
        raise ConfigError("proximal term is active (mu > 0) but no reference model was given")


def total_loss(x, y, model: Model, spec: LossSpec, teacher: Model | None = None,
               reference: Model | None = None, *, train: bool = True):
    """Value of ``cls + lam * dist + prox`` and its parts.

    Train mode uses batch statistics but does not touch the running stats,
    so this is the exact function whose gradient ``loss_and_grad`` returns.
    """
    _validate(spec, teacher is not None, reference is not None)
    fwd = forward(model, x, train=train, update_stats=False)
    parts = {"cls": cross_entropy(fwd.logits, y), "dist": 0.0, "prox": 0.0}
    if spec.lam > 0:
        tf = teacher_features(teacher, x, spec.tap)
        parts["dist"] = sum(distill_loss(t, fwd.features[k])
                            for t, k in zip(tf, tap_indices(model, spec.tap)))
    if spec.prox_mu > 0:
        parts["prox"] = proximal_term(model, reference, spec.prox_mu)
    value = parts["cls"] + spec.lam * parts["dist"] + parts["prox"]
    return value, parts


def loss_and_grad(model: Model, x, y, spec: LossSpec, teacher_feats: list[np.ndarray] | None = None,
                  reference: Model | None = None, *, update_stats: bool = True):
    """One train-mode forward/backward pass.

    Returns ``(value, parts, grads)``. Inactive terms contribute exactly
    zero gradient. ``teacher_feats`` are the teacher's tap activations on the
    same batch (see ``teacher_features``).
    """
    _validate(spec, teacher_feats is not None, reference is not None)
    fwd = forward(model, x, train=True, update_stats=update_stats)
    parts = {"cls": cross_entropy(fwd.logits, y), "dist": 0.0, "prox": 0.0}
    dlogits = cross_entropy_grad(fwd.logits, y)
    dfeats = {}
    if spec.lam > 0:
        idx = tap_indices(model, spec.tap)
        if len(teacher_feats) != len(idx):
            raise ShapeError("teacher features do not match the tap")
        for t, k in zip(teacher_feats, idx):
            s = fwd.features[k]
            parts["dist"] += distill_loss(t, s)
            dfeats[k] = spec.lam * distill_grad(t, s)
    grads: Grads = backward(model, fwd, dlogits, dfeats)
    if spec.prox_mu > 0:
        parts["prox"] = proximal_term(model, reference, spec.prox_mu)
        for k in range(model.n_layers):
            grads.weights[k] += spec.prox_mu * (model.weights[k] - reference.weights[k])
            grads.biases[k] += spec.prox_mu * (model.biases[k] - reference.biases[k])
    value = parts["cls"] + spec.lam * parts["dist"] + parts["prox"]
    return value, parts, grads
