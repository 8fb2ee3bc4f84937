"""Linear binary classifier over frozen backbone features.

Numpy implementation with explicit Adam state so the optimizer recurrence
and gradients are directly testable against independent references.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

N_CLASSES = 2


class ShapeError(Exception):
    pass


class NonFiniteGradientError(Exception):
    pass


class DivergenceError(Exception):
    pass


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 30
    batch_size: int = 64
    class_weighting: bool = False  # inverse-frequency weights; off by default

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"betas must be in [0,1), got ({self.beta1}, {self.beta2})")
        # 0 is allowed so a no-update run can serve as a determinism control
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")


# per-architecture-family learning rates
FAMILY_LEARNING_RATES = {
    "RESIDUAL_CNN": 1e-4,
    "VISION_TRANSFORMER": 5e-6,
}


@dataclass
class ProbeModel:
    weights: np.ndarray  # (2, D)
    bias: np.ndarray  # (2,)
    feature_dim: int
    backbone_id: Optional[str] = None
    init_seed: Optional[int] = None

    def copy(self) -> "ProbeModel":
        return ProbeModel(self.weights.copy(), self.bias.copy(), self.feature_dim,
                          self.backbone_id, self.init_seed)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   t=0)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


TrainingCurve = list[EpochRecord]


def init_probe(feature_dim: int, rng: np.random.Generator,
               backbone_id: Optional[str] = None) -> ProbeModel:
    """Uniform(-1/sqrt(D), 1/sqrt(D)) weights, zero bias."""
    if feature_dim <= 0:
        raise ValueError(f"feature_dim must be positive, got {feature_dim}")
    bound = 1.0 / np.sqrt(feature_dim)
    weights = rng.uniform(-bound, bound, size=(N_CLASSES, feature_dim)).astype(np.float64)
    return ProbeModel(weights=weights, bias=np.zeros(N_CLASSES, dtype=np.float64),
                      feature_dim=feature_dim, backbone_id=backbone_id)


def forward(probe: ProbeModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != probe.feature_dim:
        raise ShapeError(f"expected (N, {probe.feature_dim}) features, got {features.shape}")
    return features @ probe.weights.T + probe.bias


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss(logits: np.ndarray, labels: np.ndarray,
         sample_weights: Optional[np.ndarray] = None) -> float:
    """Mean softmax cross-entropy over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != N_CLASSES:
        raise ShapeError(f"expected (N, {N_CLASSES}) logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected ({logits.shape[0]},) labels, got {labels.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -log_probs[np.arange(len(labels)), labels]
    if sample_weights is not None:
        return float(np.sum(nll * sample_weights) / np.sum(sample_weights))
    return float(nll.mean())


def loss_and_grad(probe: ProbeModel, features: np.ndarray, labels: np.ndarray,
                  sample_weights: Optional[np.ndarray] = None):
    """Cross-entropy loss and its analytic gradient w.r.t. probe parameters."""
    logits = forward(probe, features)
    value = loss(logits, labels, sample_weights)
    probs = softmax(logits)
    delta = probs.copy()
    delta[np.arange(len(labels)), labels] -= 1.0
    if sample_weights is not None:
        w = sample_weights / np.sum(sample_weights)
        delta = delta * w[:, None]
    else:
        delta = delta / len(labels)
    grads = {
        "weights": delta.T @ np.asarray(features, dtype=np.float64),
        "bias": delta.sum(axis=0),
    }
    return value, grads


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: OptimizerConfig):
    """One Adam update with bias correction; returns (new_params, new_state)."""
    t = state.t + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {key!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {key!r}")
        m = cfg.beta1 * state.m[key] + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v[key] + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        new_params[key] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def predict(probe: ProbeModel, features: np.ndarray):
    """Per-row (label, confidence). Ties break to label 0."""
    logits = forward(probe, features)
    probs = softmax(logits)
    # argmax returns the first maximal index, which is the documented class-0 tie-break
    labels = np.argmax(logits, axis=1)
    confidence = probs[np.arange(len(labels)), labels]
    return labels, confidence


def _accuracy(probe: ProbeModel, features: np.ndarray, labels: np.ndarray) -> float:
    pred, _ = predict(probe, features)
    return float(np.mean(pred == labels))


def train_on_features(probe: ProbeModel,
                      train_x: np.ndarray, train_y: np.ndarray,
                      val_x: np.ndarray, val_y: np.ndarray,
                      cfg: OptimizerConfig,
                      rng: np.random.Generator,
                      train_x_per_epoch=None):
    """Core training loop over precomputed feature matrices.

    ``train_x_per_epoch``, when given, is a callable epoch -> feature matrix
    used to refresh training features each epoch (augmented inputs); the row
    order must match ``train_y``.
    """
    probe = probe.copy()
    params = {"weights": probe.weights, "bias": probe.bias}
    state = AdamState.zeros_like(params)
    curve: TrainingCurve = []

    sample_weights_full = None
    if cfg.class_weighting:
        counts = np.bincount(train_y, minlength=N_CLASSES).astype(np.float64)
        counts[counts == 0] = 1.0
        inv = len(train_y) / (N_CLASSES * counts)
        sample_weights_full = inv[train_y]

    n = len(train_y)
    for epoch in range(1, cfg.epochs + 1):
        x = train_x_per_epoch(epoch) if train_x_per_epoch is not None else train_x
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            sw = sample_weights_full[idx] if sample_weights_full is not None else None
            probe.weights, probe.bias = params["weights"], params["bias"]
            value, grads = loss_and_grad(probe, x[idx], train_y[idx], sw)
            if not np.isfinite(value):
                raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
            params, state = adam_step(params, grads, state, cfg)
        probe.weights, probe.bias = params["weights"], params["bias"]

        train_logits = forward(probe, x)
        val_logits = forward(probe, val_x)
        curve.append(EpochRecord(
            epoch=epoch,
            train_loss=loss(train_logits, train_y),
            train_accuracy=_accuracy(probe, x, train_y),
            val_loss=loss(val_logits, val_y),
            val_accuracy=_accuracy(probe, val_x, val_y),
        ))
    return probe, curve
