"""Adversarial fine-tuning loop: alternate PGD generation with SGD updates on the image tower."""
import copy
import hashlib
import json
import logging
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .attack import AttackConfig, PGDAttack
from .errors import AliasingError, ConfigError, ContractViolation, ShapeError, TrainingAbort
from .losses import LossBreakdown, LossSpec, ce_from_logits, one_hot, total_loss
from .model import TwoTowerModel, parameter_checksum
from .snapshot import ParameterSnapshot, relative_drift, save_checkpoint, snapshot_parameters

logger = logging.getLogger(__name__)

METHODS = ("pmg_aft", "ft_tecoa", "ft_standard")
ADAPTATIONS = ("full_finetune", "visual_prompt")
DEFAULT_LR = {"full_finetune": 5e-5, "visual_prompt": 40.0}


@dataclass
class TrainConfig:
    method: str = "pmg_aft"
    adaptation: str = "full_finetune"
    epochs: int = 10
    learning_rate: Optional[float] = None  # None -> per-adaptation default
    optimizer: str = "sgd"
    momentum: float = 0.0
    batch_size: int = 128
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=1 / 255, steps=2))
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    snapshot_every: int = 0
    snapshot_cap: int = 16
    token_prompt_params: int = 100

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.adaptation not in ADAPTATIONS:
            raise ConfigError(f"adaptation must be one of {ADAPTATIONS}, got {self.adaptation!r}")
        if self.optimizer != "sgd":
            raise ConfigError("only the sgd optimizer is supported")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def lr(self):
        return DEFAULT_LR[self.adaptation] if self.learning_rate is None else self.learning_rate

    def objective_spec(self) -> LossSpec:
        if self.method == "ft_tecoa":
            return LossSpec(alpha=0.0, beta=0.0, prob_floor=self.loss.prob_floor)
        return self.loss

    def to_dict(self):
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        d["learning_rate"] = self.lr
        return d


class VisualPrompt(nn.Module):
    """Additive image-level prompt plus optional learnable tokens for token encoders."""

    def __init__(self, image_shape, token_length=0, token_width=None, pixel_bounds=(0.0, 1.0)):
        super().__init__()
        self.image_prompt = nn.Parameter(torch.zeros(*image_shape))
        if token_length and token_width:
            self.token_prompt = nn.Parameter(torch.zeros(token_length, token_width))
        else:
            self.token_prompt = None
        self.pixel_bounds = tuple(pixel_bounds)

    @classmethod
    def for_encoder(cls, encoder, token_params=100, pixel_bounds=(0.0, 1.0)):
        width = encoder.token_width
        if width:
            length = max(1, round(token_params / width))
            return cls(encoder.input_shape, length, width, pixel_bounds)
        logger.warning("%s has no token layer; visual prompt reduced to the image-level prompt",
                       type(encoder).__name__)
        return cls(encoder.input_shape, pixel_bounds=pixel_bounds)

    def shift_images(self, images):
        if tuple(images.shape[1:]) != tuple(self.image_prompt.shape):
            raise ShapeError(f"image prompt shape {tuple(self.image_prompt.shape)} does not match "
                             f"images {tuple(images.shape[1:])}")
        lo, hi = self.pixel_bounds
        return (images + self.image_prompt).clamp(lo, hi)

    def features(self, encoder, images):
        shifted = self.shift_images(images)
        if self.token_prompt is None:
            return encoder.features(shifted)
        return encoder.features_with_tokens(shifted, self.token_prompt)

    def forward(self, encoder, images):
        shifted = self.shift_images(images)
        if self.token_prompt is None:
            return encoder(shifted)
        return encoder.forward_with_tokens(shifted, self.token_prompt)


def apply_visual_prompt(model: TwoTowerModel, prompt: VisualPrompt, images):
    """Prompted forward pass: embeddings of ``images`` with ``prompt`` applied."""
    previous = model.prompt
    model.prompt = prompt
    try:
        return model.encode_images(images)
    finally:
        model.prompt = previous


@dataclass
class EpochRecord:
    epoch: int
    robust: float
    general: float
    clean: float
    total: float
    train_accuracy: float
    drift: float
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainHistory:
    method: str
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # ParameterSnapshot, or Path once spilled

    @property
    def drift(self):
        return [r.drift for r in self.records]

    def to_dict(self):
        return {
            "method": self.method,
            "records": [asdict(r) for r in self.records],
            "snapshots": [str(s) if isinstance(s, Path) else s.source for s in self.snapshots],
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


def frozen_copy(model: TwoTowerModel) -> TwoTowerModel:
    clone = copy.deepcopy(model)
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


def _check_aliasing(model, pretrained):
    if pretrained is None:
        return
    if pretrained is model:
        raise AliasingError("pretrained model is the model being trained")
    ptrs = {p.data_ptr() for p in model.image_encoder.parameters()}
    if any(p.data_ptr() in ptrs for p in pretrained.image_encoder.parameters()):
        raise AliasingError("pretrained copy shares parameter storage with the trained model")


def derive_seed(*parts) -> int:
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


class _SnapshotStore:
    def __init__(self, cap, spill_dir):
        self.cap = cap
        self.spill_dir = spill_dir
        self.items = []

    def add(self, snap: ParameterSnapshot):
        in_memory = sum(isinstance(s, ParameterSnapshot) for s in self.items)
        if in_memory < self.cap:
            self.items.append(snap)
            return
        if self.spill_dir is None:
            self.spill_dir = Path(tempfile.mkdtemp(prefix="pmgaft-snapshots-"))
        path = Path(self.spill_dir) / f"{snap.source}.pmga"
        save_checkpoint(path, snap)
        self.items.append(path)


def finetune(model: TwoTowerModel, pretrained: Optional[TwoTowerModel], dataset, cfg: TrainConfig,
             attack=None, on_step=None, spill_dir=None):
    """Fine-tune ``model`` in place on ``dataset.train``; returns (model, TrainHistory).

    ``attack`` overrides the PGD generator (it must accept the evaluation
    plug-in signature); ``on_step(epoch, batch, model)`` runs after each update.
    """
    if cfg.method == "pmg_aft" and pretrained is None:
        raise ConfigError("pmg_aft needs the frozen pre-trained model")
    _check_aliasing(model, pretrained)
    if pretrained is not None:
        for p in pretrained.parameters():
            p.requires_grad_(False)
    split = dataset.train
    if split is None or len(split) == 0:
        raise ConfigError(f"dataset {dataset.id} has no training samples")

    dtype = next(model.image_encoder.parameters()).dtype
    T = model.build_text_matrix(dataset.class_names, dataset.prompt_template)
    c = T.num_classes

    if cfg.adaptation == "visual_prompt":
        for p in model.image_encoder.parameters():
            p.requires_grad_(False)
        if model.prompt is None:
            model.prompt = VisualPrompt.for_encoder(model.image_encoder, cfg.token_prompt_params,
                                                    cfg.attack.pixel_bounds).to(dtype)
        params = list(model.prompt.parameters())
    else:
        for p in model.image_encoder.parameters():
            p.requires_grad_(True)
        params = list(model.image_encoder.parameters())

    text_sum = parameter_checksum(model.text_encoder)
    theta0 = snapshot_parameters(model, "initial")
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    attacker = attack if attack is not None else PGDAttack(cfg.attack)
    spec = cfg.objective_spec()
    history = TrainHistory(cfg.method)
    store = _SnapshotStore(cfg.snapshot_cap, spill_dir)
    order_gen = torch.Generator().manual_seed(cfg.seed)
    n = len(split)

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        sums = {"robust": 0.0, "general": 0.0, "clean": 0.0, "total": 0.0}
        correct = 0
        perm = torch.randperm(n, generator=order_gen)
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[lo:lo + cfg.batch_size]
            X = split.images[idx].to(dtype)
            Y = one_hot(split.labels[idx], c, dtype)

            if cfg.method == "ft_standard":
                X_a = X
                logits = model.logits(X, T)
                ce = ce_from_logits(logits, Y, cfg.loss.prob_floor)
                v = ce.item()
                parts = LossBreakdown(v, 0.0, 0.0, v, ce)
            else:
                kwargs = {}
                if getattr(attacker, "accepts_seed", False):
                    kwargs = {"seed": derive_seed(cfg.seed, cfg.attack.seed, epoch, b), "batch_index": b}
                X_a = attacker.attack(model, T, X, Y, **kwargs).detach()
                parts = total_loss(model, pretrained, T, X, X_a, Y, spec)
            if not torch.isfinite(parts.objective):
                raise TrainingAbort("non-finite training loss", epoch=epoch, batch=b)
            with torch.no_grad():
                correct += int((model.logits(X_a, T).argmax(1) == Y.argmax(1)).sum())

            opt.zero_grad(set_to_none=True)
            parts.objective.backward()
            opt.step()
            for k in sums:
                sums[k] += getattr(parts, k) * len(idx)
            if on_step is not None:
                on_step(epoch, b, model)

        drift = relative_drift(snapshot_parameters(model), theta0)
        record = EpochRecord(epoch=epoch, **{k: v / n for k, v in sums.items()},
                             train_accuracy=correct / n, drift=drift,
                             wall_time=time.perf_counter() - start)
        history.records.append(record)
        logger.info("epoch %d %s loss=%.4f acc=%.4f drift=%.3e", epoch, cfg.method,
                    record.total, record.train_accuracy, drift)
        if cfg.snapshot_every and (epoch + 1) % cfg.snapshot_every == 0:
            target = model.prompt if cfg.adaptation == "visual_prompt" else model
            store.add(snapshot_parameters(target, f"{cfg.method}-epoch{epoch + 1}"))

    if parameter_checksum(model.text_encoder) != text_sum:
        raise ContractViolation("text encoder parameters changed during training")
    history.snapshots = store.items
    return model, history
