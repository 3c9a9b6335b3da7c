"""L-infinity PGD against the text-supervised cross-entropy."""
import warnings
from dataclasses import asdict, dataclass
from typing import Optional, Protocol

import torch

from .errors import AttackFailureError, DegenerateConfigWarning, ShapeError, ValidationError
from .losses import DEFAULT_PROB_FLOOR, check_one_hot, floored_log_softmax

INIT_MODES = ("zero", "uniform_symmetric", "uniform_nonneg")


@dataclass
class AttackConfig:
    epsilon: float = 1 / 255
    step_size: Optional[float] = None  # None -> 2.5 * epsilon / steps
    steps: int = 10
    init_mode: str = "uniform_symmetric"
    pixel_bounds: tuple = (0.0, 1.0)
    seed: int = 0
    signed: bool = True

    def __post_init__(self):
        self.pixel_bounds = tuple(float(b) for b in self.pixel_bounds)
        if self.epsilon < 0:
            raise ValidationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.step_size is not None and self.step_size < 0:
            raise ValidationError(f"step_size must be >= 0, got {self.step_size}")
        if self.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {self.steps}")
        if self.init_mode not in INIT_MODES:
            raise ValidationError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        lo, hi = self.pixel_bounds
        if not lo < hi:
            raise ValidationError(f"pixel_bounds must satisfy lo < hi, got {self.pixel_bounds}")

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return 2.5 * self.epsilon / self.steps if self.steps else 0.0

    def to_dict(self):
        d = asdict(self)
        d["pixel_bounds"] = list(self.pixel_bounds)
        d["step_size"] = self.resolved_step_size
        return d


@dataclass
class PerturbedBatch:
    adversarial: torch.Tensor
    original: torch.Tensor
    config: AttackConfig


class Attack(Protocol):
    """Evaluation plug-in: returns adversarial images for (model, T, X, Y).

    Implementations that set ``accepts_seed = True`` receive per-batch
    ``seed`` and ``batch_index`` keywords.
    """

    def attack(self, model, T, X, Y, **kwargs) -> torch.Tensor: ...


def project_linf(x_adv, x, epsilon, pixel_bounds=(0.0, 1.0)):
    if x_adv.shape != x.shape:
        raise ShapeError(f"shape mismatch {tuple(x_adv.shape)} vs {tuple(x.shape)}")
    lo, hi = pixel_bounds
    out = torch.min(torch.max(x_adv, x - epsilon), x + epsilon)
    return out.clamp(lo, hi)


def attack_objective(logits, Y, prob_floor=DEFAULT_PROB_FLOOR):
    """Batch-mean cross-entropy maximised by the attack; the only loss PGD ever sees."""
    return -(Y * floored_log_softmax(logits, prob_floor)).sum(1).mean()


def _init_noise(X, cfg, gen):
    if cfg.init_mode == "zero" or cfg.epsilon == 0:
        return torch.zeros_like(X)
    u = torch.rand(X.shape, generator=gen, dtype=X.dtype)
    if cfg.init_mode == "uniform_symmetric":
        return (2 * u - 1) * cfg.epsilon
    return u * cfg.epsilon


def pgd_attack(model, T, X, Y, cfg: AttackConfig, batch_index=None) -> PerturbedBatch:
    check_one_hot(Y)
    step = cfg.resolved_step_size
    if cfg.steps > 0 and step == 0 and cfg.epsilon > 0:
        warnings.warn("PGD with steps > 0 and step_size = 0 never moves past its initial point",
                      DegenerateConfigWarning, stacklevel=2)
    X = X.detach()
    gen = torch.Generator().manual_seed(cfg.seed)
    x = project_linf(X + _init_noise(X, cfg, gen), X, cfg.epsilon, cfg.pixel_bounds)
    for _ in range(cfg.steps):
        x = x.detach().requires_grad_(True)
        with torch.enable_grad():
            loss = attack_objective(model.logits(x, T), Y)
            (grad,) = torch.autograd.grad(loss, x)
        if not torch.isfinite(grad).all():
            raise AttackFailureError("non-finite input gradient during PGD", batch_index)
        direction = grad.sign() if cfg.signed else grad
        x = project_linf(x.detach() + step * direction, X, cfg.epsilon, cfg.pixel_bounds)
    return PerturbedBatch(x.detach(), X, cfg)


class PGDAttack:
    accepts_seed = True

    def __init__(self, cfg: AttackConfig):
        self.cfg = cfg

    def attack(self, model, T, X, Y, seed=None, batch_index=None):
        cfg = self.cfg
        if seed is not None:
            cfg = AttackConfig(**{**asdict(cfg), "seed": seed})
        return pgd_attack(model, T, X, Y, cfg, batch_index=batch_index).adversarial
