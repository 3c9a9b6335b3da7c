"""Desk-scale stand-in for a pre-trained two-tower model.

The image tower is pre-trained with clean cross-entropy on a broad corpus of
classes that never appear in the fine-tuning or held-out datasets. Because
every synthetic class is rendered from its name's text embedding, the
pre-trained tower transfers zero-shot to unseen class names.
"""
from dataclasses import dataclass, replace

from .datasets import SyntheticSpec, synthesize
from .model import build_toy_model
from .trainer import TrainConfig, derive_seed, finetune

PRETRAIN_NAME_OFFSET = 1000


@dataclass
class ToyModelConfig:
    encoder: str = "mlp"
    hidden: int = 48
    dim: int = 32
    width: int = 32
    patch: int = 4
    logit_scale: float = 100.0
    normalize_embeddings: bool = True
    pretrain_classes: int = 200
    pretrain_per_class: int = 20
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 64


def fresh_model(mcfg: ToyModelConfig, data: SyntheticSpec, seed=0):
    return build_toy_model(
        kind=mcfg.encoder, input_shape=data.image_shape, dim=data.text_dim, hidden=mcfg.hidden,
        width=mcfg.width, patch=mcfg.patch, text_seed=data.text_seed, init_seed=seed,
        logit_scale=mcfg.logit_scale, normalize_embeddings=mcfg.normalize_embeddings,
        prompt_template=data.prompt_template,
    )


def pretrain_corpus(mcfg: ToyModelConfig, data: SyntheticSpec, seed=0):
    spec = replace(
        data,
        seed=derive_seed("pretrain-corpus", seed),
        num_classes=mcfg.pretrain_classes,
        samples_per_class=mcfg.pretrain_per_class,
        test_per_class=10,
        held_out_classes=(),
        heldout_group_size=None,
        name_offset=PRETRAIN_NAME_OFFSET,
        class_names=None,
        dataset_id="pretrain-corpus",
    )
    train, _ = synthesize(spec)
    return train


def pretrained_model(mcfg: ToyModelConfig, data: SyntheticSpec, seed=0):
    """Deterministic pre-trained toy model for ``seed``."""
    model = fresh_model(mcfg, data, seed)
    corpus = pretrain_corpus(mcfg, data, seed)
    cfg = TrainConfig(method="ft_standard", epochs=mcfg.pretrain_epochs, learning_rate=mcfg.pretrain_lr,
                      batch_size=mcfg.pretrain_batch_size, seed=derive_seed("pretrain", seed))
    finetune(model, None, corpus, cfg)
    return model
