"""Two-tower zero-shot classifier with a trainable image tower and a frozen text tower."""
import hashlib
import logging
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputShapeError, ShapeError, UnsupportedTapError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "This is a photo of a {}"


def stable_hash(text: str, seed: int = 0) -> int:
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8, key=str(seed).encode()).digest()
    return int.from_bytes(digest, "little")


def tokenize(text: str) -> list:
    return re.findall(r"[a-z0-9]+", text.lower())


class HashTextEncoder(nn.Module):
    """Frozen text tower.

    Each token seeds its own Gaussian vector through a 64-bit hash, so distinct
    tokens never share an embedding; token vectors are summed and passed
    through a fixed random projection.
    """

    def __init__(self, dim: int = 32, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.proj = nn.Parameter(torch.randn(dim, dim, generator=gen) / dim ** 0.5, requires_grad=False)
        self.seed = seed
        self.dim = dim

    def token_vector(self, token: str) -> torch.Tensor:
        gen = torch.Generator().manual_seed(stable_hash(token, self.seed) >> 1)
        return torch.randn(self.dim, generator=gen, dtype=torch.float64).to(self.proj.dtype)

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        rows = []
        for p in prompts:
            tokens = tokenize(p)
            if not tokens:
                raise ValidationError(f"prompt {p!r} has no tokens")
            rows.append(torch.stack([self.token_vector(t) for t in tokens]).sum(0))
        return torch.stack(rows) @ self.proj.T


class ImageEncoder(nn.Module):
    """Adapter surface for image towers.

    Subclasses implement ``forward`` (images -> embeddings). Encoders with a
    hidden layer in front of the output projection override ``features``;
    encoders that accept injected prompt tokens set ``token_width``.
    """

    token_width: Optional[int] = None

    def __init__(self, input_shape, pixel_mean=0.5, pixel_std=0.25):
        super().__init__()
        self.input_shape = tuple(int(d) for d in input_shape)
        self.pixel_mean = float(pixel_mean)
        self.pixel_std = float(pixel_std)

    def normalize(self, images):
        # fixed preprocessing inside the tower, so attacks stay in pixel space
        return (images - self.pixel_mean) / self.pixel_std

    def features(self, images: torch.Tensor) -> torch.Tensor:
        raise UnsupportedTapError(f"{type(self).__name__} has no penultimate layer")

    def features_with_tokens(self, images, prompt_tokens):
        raise UnsupportedTapError(f"{type(self).__name__} has no token layer")

    def forward_with_tokens(self, images, prompt_tokens):
        raise UnsupportedTapError(f"{type(self).__name__} has no token layer")

    def named_segments(self):
        return [(name, p) for name, p in self.named_parameters()]


class LinearImageEncoder(ImageEncoder):
    def __init__(self, input_shape=(3, 16, 16), dim=32, bias=True, pixel_mean=0.5, pixel_std=0.25):
        super().__init__(input_shape, pixel_mean, pixel_std)
        n_in = 1
        for d in self.input_shape:
            n_in *= d
        self.proj = nn.Linear(n_in, dim, bias=bias)

    def forward(self, images):
        return self.proj(self.normalize(images).flatten(1))


class MLPImageEncoder(ImageEncoder):
    """flatten -> Linear -> ReLU -> Linear. The ReLU output is the penultimate tap."""

    def __init__(self, input_shape=(3, 16, 16), hidden=48, dim=32, bias=True, pixel_mean=0.5, pixel_std=0.25):
        super().__init__(input_shape, pixel_mean, pixel_std)
        n_in = 1
        for d in self.input_shape:
            n_in *= d
        self.fc1 = nn.Linear(n_in, hidden, bias=bias)
        self.fc2 = nn.Linear(hidden, dim, bias=bias)

    def features(self, images):
        return F.relu(self.fc1(self.normalize(images).flatten(1)))

    def forward(self, images):
        return self.fc2(self.features(images))


class PatchImageEncoder(ImageEncoder):
    """Tiny token encoder: patch embedding, one global-context mixing block, mean pool, projection.

    Prompt tokens appended at the token layer take part in the mixing context
    but are excluded from the pooled output.
    """

    def __init__(self, input_shape=(3, 16, 16), patch=4, width=32, dim=32, pixel_mean=0.5, pixel_std=0.25):
        super().__init__(input_shape, pixel_mean, pixel_std)
        c, h, w = self.input_shape
        if h % patch or w % patch:
            raise ValidationError(f"image {h}x{w} not divisible into {patch}x{patch} patches")
        self.patch = patch
        self.num_patches = (h // patch) * (w // patch)
        self.token_width = width
        self.embed = nn.Linear(c * patch * patch, width)
        self.pos = nn.Parameter(torch.zeros(self.num_patches, width))
        self.mix = nn.Linear(width, width)
        self.proj = nn.Linear(width, dim)
        nn.init.normal_(self.pos, std=0.02)

    def tokens(self, images):
        p = self.patch
        x = self.normalize(images).unfold(2, p, p).unfold(3, p, p)  # N, C, h', w', p, p
        x = x.permute(0, 2, 3, 1, 4, 5).flatten(3).flatten(1, 2)
        return self.embed(x) + self.pos

    def _pool(self, tok, n_patches):
        ctx = tok.mean(1, keepdim=True)
        tok = tok + F.relu(self.mix(tok + ctx))
        return tok[:, :n_patches].mean(1)

    def features(self, images):
        return self._pool(self.tokens(images), self.num_patches)

    def features_with_tokens(self, images, prompt_tokens):
        tok = self.tokens(images)
        extra = prompt_tokens.unsqueeze(0).expand(tok.shape[0], -1, -1)
        return self._pool(torch.cat([tok, extra], dim=1), self.num_patches)

    def forward_with_tokens(self, images, prompt_tokens):
        return self.proj(self.features_with_tokens(images, prompt_tokens))

    def forward(self, images):
        return self.proj(self.features(images))


@dataclass(frozen=True)
class TextEmbeddingMatrix:
    matrix: torch.Tensor
    class_names: tuple
    prompt_template: str

    @property
    def num_classes(self):
        return self.matrix.shape[0]


class TwoTowerModel(nn.Module):
    """Trainable image tower plus frozen text tower.

    ``prompt`` is an optional input-level adapter (see ``trainer.VisualPrompt``);
    when set, every image forward pass goes through it.
    """

    def __init__(self, image_encoder: ImageEncoder, text_encoder: HashTextEncoder,
                 logit_scale: float = 1.0, normalize_embeddings: bool = False,
                 prompt_template: str = DEFAULT_TEMPLATE):
        super().__init__()
        if not logit_scale > 0:
            raise ValidationError(f"logit_scale must be positive, got {logit_scale}")
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        for p in self.text_encoder.parameters():
            p.requires_grad_(False)
        self.logit_scale = float(logit_scale)
        self.normalize_embeddings = bool(normalize_embeddings)
        self.prompt_template = prompt_template
        self.prompt = None
        self._text_cache = {}

    def _check_images(self, images):
        expected = self.image_encoder.input_shape
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise InputShapeError(f"expected images of shape (N, {', '.join(map(str, expected))}), "
                                  f"got {tuple(images.shape)}")
        if not torch.isfinite(images).all():
            raise ValidationError("images contain non-finite values")

    def encode_images(self, images):
        self._check_images(images)
        if self.prompt is not None:
            emb = self.prompt(self.image_encoder, images)
        else:
            emb = self.image_encoder(images)
        if self.normalize_embeddings:
            emb = F.normalize(emb, dim=-1)
        return emb

    def penultimate_features(self, images):
        self._check_images(images)
        if self.prompt is not None:
            return self.prompt.features(self.image_encoder, images)
        return self.image_encoder.features(images)

    def build_text_matrix(self, class_names, prompt_template=None):
        from .datasets import render_prompt

        template = self.prompt_template if prompt_template is None else prompt_template
        names = tuple(class_names)
        if not names:
            raise ValidationError("class_names is empty")
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate class names in {list(names)}")
        key = (names, template, self.text_encoder.proj.dtype)
        cached = self._text_cache.get(key)
        if cached is not None:
            return cached
        prompts = [render_prompt(template, n) for n in names]
        with torch.no_grad():
            mat = self.text_encoder(prompts)
            if self.normalize_embeddings:
                mat = F.normalize(mat, dim=-1)
        tm = TextEmbeddingMatrix(mat.detach().clone(), names, template)
        self._text_cache[key] = tm
        return tm

    def logits(self, images, T):
        return self.logit_scale * similarity(self.encode_images(images), T)

    def forward(self, images, T):
        return predict_probs(similarity(self.encode_images(images), T), self.logit_scale)


def encode_images(model: TwoTowerModel, images):
    return model.encode_images(images)


def build_text_matrix(model: TwoTowerModel, class_names, prompt_template=None):
    return model.build_text_matrix(class_names, prompt_template)


def penultimate_features(model: TwoTowerModel, images):
    return model.penultimate_features(images)


def _matrix(T):
    return T.matrix if isinstance(T, TextEmbeddingMatrix) else T


def similarity(I, T):
    T = _matrix(T)
    if I.dim() != 2 or T.dim() != 2 or I.shape[1] != T.shape[1]:
        raise ShapeError(f"cannot form similarity of {tuple(I.shape)} and {tuple(T.shape)}")
    return I @ T.T


def predict_probs(S, logit_scale=1.0):
    if not logit_scale > 0:
        raise ValidationError(f"logit_scale must be positive, got {logit_scale}")
    if not torch.isfinite(S).all():
        raise ValidationError("similarity matrix contains non-finite values")
    return torch.softmax(logit_scale * S, dim=-1)


def classify(P):
    """Row-wise argmax; ties go to the lowest class index."""
    if P.dim() != 2:
        raise ShapeError(f"expected an N x c matrix, got shape {tuple(P.shape)}")
    return torch.argmax(P, dim=1)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_toy_model(kind="mlp", input_shape=(3, 16, 16), dim=32, hidden=48, width=32, patch=4,
                    text_seed=0, init_seed=0, logit_scale=1.0,
                    normalize_embeddings=False, prompt_template=DEFAULT_TEMPLATE):
    with torch.random.fork_rng():
        torch.manual_seed(init_seed)
        if kind == "mlp":
            enc = MLPImageEncoder(input_shape, hidden=hidden, dim=dim)
        elif kind == "linear":
            enc = LinearImageEncoder(input_shape, dim=dim)
        elif kind == "patch":
            enc = PatchImageEncoder(input_shape, patch=patch, width=width, dim=dim)
        else:
            raise ValidationError(f"unknown encoder kind {kind!r}")
    text = HashTextEncoder(dim=dim, seed=text_seed)
    return TwoTowerModel(enc, text, logit_scale=logit_scale,
                         normalize_embeddings=normalize_embeddings, prompt_template=prompt_template)
