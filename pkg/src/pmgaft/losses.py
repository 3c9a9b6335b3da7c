"""Objective for pre-trained-model-guided adversarial fine-tuning.

Probability-level functions (``cross_entropy``, ``kl_divergence``, ...) take
row-stochastic matrices and floor them inside every log. ``total_loss``
works from logits through a floored log-softmax, which equals
``log(max(softmax, floor))`` without the underflow of softmax-then-log.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractViolation, ShapeError, ValidationError

DEFAULT_PROB_FLOOR = 1e-12

VALID_PAIRINGS = {
    "output": ("kl", "l2"),
    "penultimate": ("l2", "cosine"),
}


@dataclass
class LossSpec:
    alpha: float = 1.0
    beta: float = 1.0
    general_layer: str = "output"
    general_metric: str = "kl"
    prob_floor: float = DEFAULT_PROB_FLOOR
    detach_clean: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.general_layer not in VALID_PAIRINGS:
            raise ConfigError(f"general_layer must be one of {list(VALID_PAIRINGS)}")
        if self.general_metric not in VALID_PAIRINGS[self.general_layer]:
            raise ConfigError(f"metric {self.general_metric!r} is not supported at the "
                              f"{self.general_layer} layer; use one of {VALID_PAIRINGS[self.general_layer]}")
        if not 0 < self.prob_floor < 1:
            raise ConfigError(f"prob_floor must be in (0, 1), got {self.prob_floor}")


@dataclass
class LossBreakdown:
    robust: float
    general: float
    clean: float
    total: float
    objective: torch.Tensor = None  # differentiable scalar behind ``total``

    def as_dict(self):
        return {"robust": self.robust, "general": self.general, "clean": self.clean, "total": self.total}


def one_hot(labels, num_classes, dtype=torch.float32):
    return F.one_hot(labels.long(), num_classes).to(dtype)


def check_one_hot(Y):
    if Y.dim() != 2:
        raise ValidationError(f"labels must be an N x c one-hot matrix, got shape {tuple(Y.shape)}")
    if not (((Y == 0) | (Y == 1)).all() and (Y.sum(1) == 1).all()):
        raise ValidationError("label rows must contain exactly one 1 and zeros elsewhere")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def floored_log(P, prob_floor=DEFAULT_PROB_FLOOR):
    return torch.log(P.clamp_min(prob_floor))


def floored_log_softmax(logits, prob_floor=DEFAULT_PROB_FLOOR):
    return F.log_softmax(logits, dim=-1).clamp_min(math.log(prob_floor))


def cross_entropy(P, Y, prob_floor=DEFAULT_PROB_FLOOR):
    _same_shape(P, Y)
    check_one_hot(Y)
    return -(Y * floored_log(P, prob_floor)).sum(1).mean()


def kl_divergence(P, Q, prob_floor=DEFAULT_PROB_FLOOR):
    """Batch mean of row-wise KL(P || Q)."""
    _same_shape(P, Q)
    return (P * (floored_log(P, prob_floor) - floored_log(Q, prob_floor))).sum(1).mean()


def general_loss(P_adv, P_ori_adv, prob_floor=DEFAULT_PROB_FLOOR):
    if P_ori_adv.requires_grad:
        raise ContractViolation("pre-trained branch output must not carry gradients")
    return kl_divergence(P_adv, P_ori_adv, prob_floor)


def clean_loss(P_adv, P_clean, prob_floor=DEFAULT_PROB_FLOOR, detach_clean=False):
    if P_adv.shape[0] != P_clean.shape[0]:
        raise ShapeError(f"batch size mismatch {P_adv.shape[0]} vs {P_clean.shape[0]}")
    if detach_clean:
        P_clean = P_clean.detach()
    return kl_divergence(P_adv, P_clean, prob_floor)


def feature_distance(A, B, metric="l2"):
    _same_shape(A, B)
    if metric == "l2":
        return torch.linalg.vector_norm(A - B, dim=1).mean()
    if metric == "cosine":
        na = torch.linalg.vector_norm(A, dim=1)
        nb = torch.linalg.vector_norm(B, dim=1)
        if (na == 0).any() or (nb == 0).any():
            raise ValidationError("cosine distance undefined for zero-norm rows")
        return (1 - (A * B).sum(1) / (na * nb)).mean()
    raise ValidationError(f"unknown feature metric {metric!r}")


def ce_from_logits(logits, Y, prob_floor=DEFAULT_PROB_FLOOR):
    return -(Y * floored_log_softmax(logits, prob_floor)).sum(1).mean()


def kl_from_logits(logits_p, logits_q, prob_floor=DEFAULT_PROB_FLOOR):
    lp = floored_log_softmax(logits_p, prob_floor)
    lq = floored_log_softmax(logits_q, prob_floor)
    return (torch.softmax(logits_p, dim=-1) * (lp - lq)).sum(1).mean()


def robust_loss(model, T, X_a, Y, prob_floor=DEFAULT_PROB_FLOOR):
    check_one_hot(Y)
    return ce_from_logits(model.logits(X_a, T), Y, prob_floor)


def _general_term(model, pretrained, T, X_a, logits_adv, spec):
    if spec.general_layer == "penultimate":
        with torch.no_grad():
            target = pretrained.penultimate_features(X_a)
        return feature_distance(model.penultimate_features(X_a), target, spec.general_metric)
    with torch.no_grad():
        logits_ori = pretrained.logits(X_a, T)
    if spec.general_metric == "kl":
        return kl_from_logits(logits_adv, logits_ori, spec.prob_floor)
    return feature_distance(torch.softmax(logits_adv, -1), torch.softmax(logits_ori, -1), "l2")


def total_loss(model, pretrained, T, X, X_a, Y, spec: LossSpec) -> LossBreakdown:
    """robust + alpha * general + beta * clean.

    Terms with zero weight are evaluated for reporting only and kept out of the
    differentiable objective, so alpha = beta = 0 reproduces the robust-loss
    gradient bit for bit.
    """
    check_one_hot(Y)
    if X.shape != X_a.shape:
        raise ShapeError(f"clean batch {tuple(X.shape)} and adversarial batch {tuple(X_a.shape)} differ")
    logits_adv = model.logits(X_a, T)
    robust = ce_from_logits(logits_adv, Y, spec.prob_floor)
    objective = robust

    with torch.set_grad_enabled(torch.is_grad_enabled() and spec.alpha > 0):
        general = _general_term(model, pretrained, T, X_a, logits_adv, spec)
    if spec.alpha > 0:
        objective = objective + spec.alpha * general

    with torch.set_grad_enabled(torch.is_grad_enabled() and spec.beta > 0):
        logits_clean = model.logits(X, T)
        if spec.detach_clean:
            logits_clean = logits_clean.detach()
        clean = kl_from_logits(logits_adv, logits_clean, spec.prob_floor)
    if spec.beta > 0:
        objective = objective + spec.beta * clean

    r, g, c = robust.item(), general.item(), clean.item()
    return LossBreakdown(r, g, c, r + spec.alpha * g + spec.beta * c, objective)


def entropy(P, prob_floor=DEFAULT_PROB_FLOOR):
    return -(P * floored_log(P, prob_floor)).sum(1).mean()


def cross_entropy_between(P, Q, prob_floor=DEFAULT_PROB_FLOOR):
    """H(P, Q) = -sum P log Q, batch-averaged; unlike ``cross_entropy`` P need not be one-hot."""
    _same_shape(P, Q)
    return -(P * floored_log(Q, prob_floor)).sum(1).mean()


def decomposition_residual(P_adv, P_ori_adv, Y, prob_floor=DEFAULT_PROB_FLOOR) -> float:
    """|CE(Y, P_adv) + KL(P_adv || P_ori) - (-H(P_adv) + H(P_adv, P_ori) + H(Y, P_adv))|."""
    check_one_hot(Y)
    lhs = cross_entropy(P_adv, Y, prob_floor) + kl_divergence(P_adv, P_ori_adv, prob_floor)
    rhs = (-entropy(P_adv, prob_floor)
           + cross_entropy_between(P_adv, P_ori_adv, prob_floor)
           + cross_entropy_between(Y, P_adv, prob_floor))
    return abs(float(lhs) - float(rhs))
