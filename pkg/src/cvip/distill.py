"""Classification, feature-distance and soft-label losses for the P-stream.

All functions take batched tensors: logits (N, K), features (N, D), labels (N,).
Reductions are means over the batch so a batch of one gives the per-sample value.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .tensor import ops
from .tensor.engine import Tensor, as_tensor


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 50.0  # feature distance weight
    lambda2: float = 0.0  # soft-label weight
    temperature: float = 8.0
    norm: str = "l1"
    t2_scale: bool = False  # multiply the soft-label term by T^2

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InputError("loss weights must be non-negative")
        if not self.temperature > 0:
            raise InputError("temperature must be positive")
        if self.norm not in ("l1", "l2"):
            raise InputError(f"norm must be l1 or l2, got {self.norm}")


def _batch(x) -> Tensor:
    x = as_tensor(x)
    return x.reshape(1, -1) if x.ndim == 1 else x


def cross_entropy(logits, labels) -> Tensor:
    logits = _batch(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise InputError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"label out of range for {k} classes")
    return -ops.pick(ops.log_softmax(logits, axis=1), labels).mean()


def feature_distance(f_p, f_of, norm: str = "l1") -> Tensor:
    """Mean over dimensions (and batch) of |f_p - f_of| or (f_p - f_of)^2."""
    f_p, f_of = _batch(f_p), _batch(f_of)
    if f_p.shape != f_of.shape:
        raise InputError(f"feature shapes differ: {f_p.shape} vs {f_of.shape}")
    d = f_p - f_of.detach()
    if norm == "l1":
        return ops.abs(d).mean()
    if norm == "l2":
        return (d * d).mean()
    raise InputError(f"unknown norm {norm}")


def soft_label_ce(student_logits, teacher_logits, temperature: float = 8.0) -> Tensor:
    """Cross-entropy of softmax(student / T) against softmax(teacher / T).

    The teacher side is treated as a constant.
    """
    s, t = _batch(student_logits), _batch(teacher_logits)
    if s.shape != t.shape:
        raise InputError(f"logit shapes differ: {s.shape} vs {t.shape}")
    if not temperature > 0:
        raise InputError("temperature must be positive")
    target = ops.softmax(Tensor(t.data / temperature), axis=1).data
    logp = ops.log_softmax(s * (1.0 / temperature), axis=1)
    return -(logp * Tensor(target)).sum(axis=1).mean()


def p_stream_loss(logits, labels, f_p=None, f_of=None, teacher_logits=None,
                  cfg: LossConfig = LossConfig()) -> Tensor:
    """CE + lambda1 * feature distance + lambda2 * soft-label CE.

    Terms with a zero weight are skipped entirely, so with both weights zero
    the result is exactly the cross-entropy.
    """
    loss = cross_entropy(logits, labels)
    if cfg.lambda1:
        if f_p is None or f_of is None:
            raise InputError("lambda1 > 0 needs student and teacher features")
        loss = loss + feature_distance(f_p, f_of, cfg.norm) * cfg.lambda1
    if cfg.lambda2:
        if teacher_logits is None:
            raise InputError("lambda2 > 0 needs teacher logits")
        w = cfg.lambda2 * (cfg.temperature ** 2 if cfg.t2_scale else 1.0)
        loss = loss + soft_label_ce(logits, teacher_logits, cfg.temperature) * w
    return loss
