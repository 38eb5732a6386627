"""Training objectives on logits.

Every loss returns ``(value, grad)`` where ``grad`` is d(value)/d(logits) with
shape (B, C), averaged over the batch, ready to feed ``nn.backward``. All the
softmax-type expressions are computed through shifted log-sum-exp so large
logits never overflow.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import Gradients, Model

__all__ = [
    "cross_entropy",
    "wsm_loss",
    "ace_loss",
    "kl_distill",
    "composite_objective",
    "prox_term",
    "check_label_proportions",
]

LossAndGrad = tuple[float, np.ndarray]


def _check_logits(logits: np.ndarray, name: str = "logits") -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"{name} must be 2-D (B, C), got ndim={logits.ndim}")
    if logits.shape[0] == 0:
        raise ValueError(f"{name}: empty batch")
    if not np.all(np.isfinite(logits)):
        raise ValueError(f"{name}: non-finite values")
    return logits


def _check_labels(labels: np.ndarray, batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} != ({batch},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integers")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels out of range [0, {num_classes})")
    return labels.astype(np.intp)


def check_label_proportions(beta: np.ndarray, num_classes: int) -> np.ndarray:
    """Validate a class-proportion vector: shape (C,), entries in [0, 1], sum 1."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (num_classes,):
        raise ValueError(f"proportions shape {beta.shape} != ({num_classes},)")
    if beta.min() < 0.0 or beta.max() > 1.0:
        raise ValueError("proportions must lie in [0, 1]")
    if abs(beta.sum() - 1.0) > 1e-9:
        raise ValueError(f"proportions must sum to 1, got {beta.sum()!r}")
    return beta


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> LossAndGrad:
    """Mean softmax cross entropy; grad = (softmax - onehot) / B."""
    logits = _check_logits(logits)
    b, c = logits.shape
    labels = _check_labels(labels, b, c)
    shift = logits.max(axis=1, keepdims=True)
    ez = np.exp(logits - shift)
    lse = shift[:, 0] + np.log(ez.sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(b), labels]))
    p = ez / ez.sum(axis=1, keepdims=True)
    grad = p.copy()
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def wsm_loss(logits: np.ndarray, labels: np.ndarray, proportions: np.ndarray) -> LossAndGrad:
    """Weighted-softmax supervision for skewed local label distributions.

    The softmax normalizer re-weights each class's exponential by the local
    class proportion, so classes absent from the local data (proportion zero)
    drop out of the normalizer entirely. Loss per sample is
    -(z_y - log sum_c beta_c exp(z_c)); every batch label must have a strictly
    positive proportion. With uniform proportions this equals cross entropy
    minus log(C).
    """
    logits = _check_logits(logits)
    b, c = logits.shape
    labels = _check_labels(labels, b, c)
    beta = check_label_proportions(proportions, c)
    mask = beta > 0.0
    if not mask.any():
        raise ValueError("all class proportions are zero")
    if not mask[labels].all():
        bad = labels[~mask[labels]][0]
        raise ValueError(f"batch contains label {int(bad)} with zero proportion")
    zm = logits[:, mask]
    bm = beta[mask]
    shift = zm.max(axis=1, keepdims=True)
    wez = np.exp(zm - shift) * bm
    norm = wez.sum(axis=1, keepdims=True)
    wlse = shift[:, 0] + np.log(norm[:, 0])
    loss = float(np.mean(wlse - logits[np.arange(b), labels]))
    grad = np.zeros_like(logits)
    grad[:, mask] = wez / norm
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def ace_loss(logits: np.ndarray, labels: np.ndarray, present_classes: np.ndarray) -> LossAndGrad:
    """Cross entropy with the softmax restricted to locally present classes.

    Absent classes contribute nothing to the normalizer and get exactly zero
    gradient. Batch labels must all be present classes.
    """
    logits = _check_logits(logits)
    b, c = logits.shape
    labels = _check_labels(labels, b, c)
    present = np.unique(np.asarray(present_classes, dtype=np.intp))
    if present.size == 0:
        raise ValueError("present_classes is empty")
    if present.min() < 0 or present.max() >= c:
        raise ValueError(f"present_classes out of range [0, {c})")
    mask = np.zeros(c, dtype=bool)
    mask[present] = True
    if not mask[labels].all():
        bad = labels[~mask[labels]][0]
        raise ValueError(f"batch contains label {int(bad)} not in present_classes")
    zm = logits[:, mask]
    shift = zm.max(axis=1, keepdims=True)
    ez = np.exp(zm - shift)
    norm = ez.sum(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(norm[:, 0])
    loss = float(np.mean(lse - logits[np.arange(b), labels]))
    grad = np.zeros_like(logits)
    grad[:, mask] = ez / norm
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def kl_distill(
    student_logits: np.ndarray,
    teachers: Sequence[tuple[np.ndarray, int]],
    temperature: float = 1.0,
    weighting: str = "size_weighted",
) -> LossAndGrad:
    """Weighted KL(teacher || student) distillation against frozen teachers.

    ``teachers`` is a sequence of (logits, param_count) pairs; teacher logits
    are treated as constants (no gradient flows into them). Weights are
    param_count / total over the teacher set ("size_weighted") or uniform
    ("vanilla_average"); either way they sum to one and do not include the
    student. Gradient on the student logits is (p_student - p_mix) / (B * T).
    """
    zs = _check_logits(student_logits, "student_logits")
    b, c = zs.shape
    if len(teachers) == 0:
        raise ValueError("teacher set is empty")
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if weighting not in ("size_weighted", "vanilla_average"):
        raise ValueError(f"unknown weighting {weighting!r}")

    if weighting == "size_weighted":
        phis = np.array([float(phi) for _, phi in teachers])
        if np.any(phis <= 0):
            raise ValueError("teacher param counts must be positive")
        weights = phis / phis.sum()
    else:
        weights = np.full(len(teachers), 1.0 / len(teachers))

    def log_softmax(z: np.ndarray) -> np.ndarray:
        zt = z / temperature
        shift = zt.max(axis=1, keepdims=True)
        return zt - shift - np.log(np.exp(zt - shift).sum(axis=1, keepdims=True))

    ls = log_softmax(zs)
    ps = np.exp(ls)
    loss = 0.0
    p_mix = np.zeros_like(ps)
    for (zt, _), w in zip(teachers, weights):
        zt = _check_logits(zt, "teacher_logits")
        if zt.shape != (b, c):
            raise ValueError(f"teacher logits shape {zt.shape} != {(b, c)}")
        lt = log_softmax(zt)
        pt = np.exp(lt)
        loss += w * float(np.mean(np.sum(pt * (lt - ls), axis=1)))
        p_mix += w * pt
    grad = (ps - p_mix) / (b * temperature)
    return loss, grad


def composite_objective(
    alpha: float,
    supervision: LossAndGrad,
    distillation: LossAndGrad,
) -> LossAndGrad:
    """Convex blend (1 - alpha) * supervision + alpha * distillation."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return scaled_objective(1.0 - alpha, alpha, supervision, distillation)


def scaled_objective(
    sup_scale: float,
    dist_scale: float,
    supervision: LossAndGrad,
    distillation: LossAndGrad,
) -> LossAndGrad:
    """General two-term blend; the component-scheduler ablations use this."""
    s_loss, s_grad = supervision
    d_loss, d_grad = distillation
    s_grad = np.asarray(s_grad, dtype=np.float64)
    d_grad = np.asarray(d_grad, dtype=np.float64)
    if s_grad.shape != d_grad.shape:
        raise ValueError(f"gradient shapes differ: {s_grad.shape} vs {d_grad.shape}")
    return sup_scale * s_loss + dist_scale * d_loss, sup_scale * s_grad + dist_scale * d_grad


def prox_term(model: Model, anchor: Model, mu: float) -> tuple[float, Gradients]:
    """Proximal penalty (mu/2) * ||params - anchor||^2 and its parameter gradient."""
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    if model.spec != anchor.spec:
        raise ValueError("prox anchor architecture differs from model")
    loss = 0.0
    gw, gb = [], []
    for w, wa in zip(model.weights, anchor.weights):
        d = w - wa
        loss += float(np.sum(d * d))
        gw.append(mu * d)
    for b_, ba in zip(model.biases, anchor.biases):
        d = b_ - ba
        loss += float(np.sum(d * d))
        gb.append(mu * d)
    return 0.5 * mu * loss, Gradients(grad_w=gw, grad_b=gb)
