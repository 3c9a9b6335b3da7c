"""Prompt templating and synthetic datasets, plus the on-disk tensor archive."""
import hashlib
import json
import random
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .binio import Reader, Writer
from .errors import CorruptionError, FormatError, ValidationError
from .model import DEFAULT_TEMPLATE, HashTextEncoder

ARCHIVE_MAGIC = b"PMGT"
DTYPE_TAGS = {0: np.float32, 1: np.uint32}


def render_prompt(template: str, class_name: str) -> str:
    n = template.count("{}")
    if n != 1:
        raise ValidationError(f"template {template!r} must contain exactly one '{{}}' placeholder, found {n}")
    return template.replace("{}", class_name)


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def class_vocabulary(n: int, seed: int = 0, offset: int = 0) -> list:
    """Deterministic list of unique pseudo-word class names; ``offset`` selects a disjoint slice."""
    rng = random.Random(seed)
    seen, words = set(), []
    while len(words) < offset + n:
        w = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(3))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words[offset:offset + n]


@dataclass
class Split:
    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return self.images.shape[0]

    def sample_hashes(self) -> set:
        arr = self.images.detach().cpu().numpy().astype(np.float32)
        return {hashlib.sha256(x.tobytes()).hexdigest() for x in arr}


@dataclass
class DatasetManifest:
    id: str
    class_names: list
    prompt_template: str
    splits: dict
    image_shape: list
    sample_counts: dict
    content_hash: str
    zero_shot: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            data = json.loads(text)
            return cls(**data)
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"bad dataset manifest: {exc}") from None


@dataclass
class ImageDataset:
    id: str
    class_names: list
    test: Split
    train: Optional[Split] = None
    prompt_template: str = DEFAULT_TEMPLATE
    zero_shot: bool = True

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError(f"dataset {self.id}: duplicate class names")
        for split in (self.train, self.test):
            if split is None:
                continue
            if len(split) and int(split.labels.max()) >= len(self.class_names):
                raise ValidationError(f"dataset {self.id}: label index out of range")

    @property
    def image_shape(self):
        return tuple(self.test.images.shape[1:])

    def splits(self):
        return {k: v for k, v in (("train", self.train), ("test", self.test)) if v is not None}

    def content_hash(self) -> str:
        h = hashlib.sha256(json.dumps(list(self.class_names)).encode())
        for name, split in sorted(self.splits().items()):
            h.update(name.encode())
            h.update(split.images.detach().cpu().numpy().astype("<f4").tobytes())
            h.update(split.labels.detach().cpu().numpy().astype("<u4").tobytes())
        return h.hexdigest()

    def manifest(self, paths=None) -> DatasetManifest:
        splits = self.splits()
        return DatasetManifest(
            id=self.id,
            class_names=list(self.class_names),
            prompt_template=self.prompt_template,
            splits={k: (paths or {}).get(k) for k in splits},
            image_shape=list(self.image_shape),
            sample_counts={k: len(v) for k, v in splits.items()},
            content_hash=self.content_hash(),
            zero_shot=self.zero_shot,
        )


class DatasetAdapter(Protocol):
    """Hook for real image datasets; implementations yield (images in [0,1], labels) at their native size."""

    id: str
    class_names: list

    def load_split(self, split: str) -> Split: ...


def from_adapter(adapter: DatasetAdapter, size: int = 224, zero_shot=True,
                 prompt_template=DEFAULT_TEMPLATE) -> ImageDataset:
    def resized(split):
        imgs = F.interpolate(split.images.float(), size=(size, size), mode="bilinear", align_corners=False)
        return Split(imgs.clamp(0, 1), split.labels.long())

    test = resized(adapter.load_split("test"))
    try:
        train = resized(adapter.load_split("train"))
    except KeyError:
        train = None
    return ImageDataset(adapter.id, list(adapter.class_names), test, train, prompt_template, zero_shot)


@dataclass
class SyntheticSpec:
    seed: int = 0
    num_classes: int = 14
    samples_per_class: int = 200
    test_per_class: int = 50
    image_shape: tuple = (3, 16, 16)
    signal: float = 0.03
    noise: float = 0.05
    held_out_classes: tuple = (10, 11, 12, 13)
    heldout_group_size: Optional[int] = None
    world_seed: int = 0
    name_offset: int = 0
    text_dim: int = 32
    text_seed: int = 0
    prompt_template: str = DEFAULT_TEMPLATE
    dataset_id: str = "synthetic"
    class_names: Optional[list] = field(default=None)

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        self.held_out_classes = tuple(self.held_out_classes)
        if self.num_classes < 2:
            raise ValidationError("num_classes must be at least 2")
        if any(not 0 <= c < self.num_classes for c in self.held_out_classes):
            raise ValidationError("held_out_classes out of range")
        if len(set(self.held_out_classes)) != len(self.held_out_classes):
            raise ValidationError("held_out_classes contains duplicates")
        if self.num_classes - len(self.held_out_classes) < 2 and self.samples_per_class > 0:
            raise ValidationError("need at least 2 training classes")

    def names(self):
        if self.class_names is not None:
            if len(self.class_names) != self.num_classes:
                raise ValidationError("class_names length does not match num_classes")
            return list(self.class_names)
        return class_vocabulary(self.num_classes, self.world_seed, self.name_offset)


def rendering_matrix(image_shape, dim, world_seed):
    pixels = int(np.prod(image_shape))
    gen = torch.Generator().manual_seed(10_007 * world_seed + 17)
    return torch.randn(pixels, dim, generator=gen, dtype=torch.float64)


def class_patterns(names, image_shape, text_dim=32, text_seed=0, world_seed=0):
    """Unit-std pixel pattern per class, rendered from the class name's text-tower embedding."""
    text = HashTextEncoder(dim=text_dim, seed=text_seed).double()
    with torch.no_grad():
        emb = F.normalize(text(list(names)), dim=-1)
    pat = emb @ rendering_matrix(image_shape, text_dim, world_seed).T
    pat = (pat - pat.mean(1, keepdim=True)) / pat.std(1, keepdim=True)
    return pat.reshape(len(names), *image_shape)


def _sample(patterns, class_ids, per_class, signal, noise, gen):
    labels = torch.arange(len(class_ids)).repeat_interleave(per_class)
    base = patterns[list(class_ids)][labels]
    eps = torch.randn(base.shape, generator=gen, dtype=torch.float64)
    imgs = (0.5 + signal * base + noise * eps).clamp(0.0, 1.0)
    return Split(imgs.float(), labels)


def synthesize(spec: SyntheticSpec):
    """Return (train dataset, list of held-out zero-shot datasets); pure function of ``spec``."""
    c = spec.num_classes
    if int(np.prod(spec.image_shape)) < c:
        warnings.warn(f"image shape {spec.image_shape} too small to carry {c} distinguishable patterns",
                      RuntimeWarning)
    names = spec.names()
    patterns = class_patterns(names, spec.image_shape, spec.text_dim, spec.text_seed, spec.world_seed)
    gen = torch.Generator().manual_seed(spec.seed)
    held = list(spec.held_out_classes)
    seen = [i for i in range(c) if i not in held]

    train_ds = None
    if seen:
        train_ds = ImageDataset(
            id=spec.dataset_id,
            class_names=[names[i] for i in seen],
            train=_sample(patterns, seen, spec.samples_per_class, spec.signal, spec.noise, gen),
            test=_sample(patterns, seen, spec.test_per_class, spec.signal, spec.noise, gen),
            prompt_template=spec.prompt_template,
            zero_shot=False,
        )
    heldout = []
    size = spec.heldout_group_size or len(held)
    for g, start in enumerate(range(0, len(held), max(size, 1))):
        group = held[start:start + size]
        if len(group) < 2:
            raise ValidationError("each held-out dataset needs at least 2 classes")
        heldout.append(ImageDataset(
            id=f"{spec.dataset_id}-heldout{g}",
            class_names=[names[i] for i in group],
            test=_sample(patterns, group, spec.test_per_class, spec.signal, spec.noise, gen),
            prompt_template=spec.prompt_template,
            zero_shot=True,
        ))
    return train_ds, heldout


def assert_disjoint(train: ImageDataset, others):
    """Raise if any sample of ``others`` also appears in ``train``'s training split."""
    seen = train.train.sample_hashes()
    for ds in others:
        for split in ds.splits().values():
            if seen & split.sample_hashes():
                raise ValidationError(f"dataset {ds.id} shares samples with training set {train.id}")


def save_archive(path, tensors: dict):
    w = Writer(ARCHIVE_MAGIC)
    w.u32(len(tensors))
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if arr.dtype.kind == "f":
            tag = 0
        elif arr.dtype.kind in "iu":
            if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint32).max):
                raise ValidationError(f"tensor {name} does not fit in u32")
            tag = 1
        else:
            raise ValidationError(f"tensor {name}: unsupported dtype {arr.dtype}")
        w.name(name)
        w.shape(arr.shape)
        w.u8(tag)
        w.payload(arr, DTYPE_TAGS[tag])
    Path(path).write_bytes(w.getvalue())


def load_archive(path) -> dict:
    r = Reader(Path(path).read_bytes(), ARCHIVE_MAGIC)
    out = {}
    for _ in range(r.u32()):
        name = r.name()
        dims = r.shape()
        tag_offset = r.pos
        tag = r.u8()
        if tag not in DTYPE_TAGS:
            raise CorruptionError(f"unknown dtype tag {tag}", offset=tag_offset)
        out[name] = r.payload(dims, DTYPE_TAGS[tag])
    r.finish()
    return out


def save_dataset(ds: ImageDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split_name, split in ds.splits().items():
        fname = f"{ds.id}-{split_name}.pmgt"
        save_archive(directory / fname, {"images": split.images.float(), "labels": split.labels})
        paths[split_name] = fname
    manifest_path = directory / f"{ds.id}.json"
    manifest_path.write_text(ds.manifest(paths).to_json())
    return manifest_path


def _load_split(path):
    tensors = load_archive(path)
    if set(tensors) != {"images", "labels"}:
        raise FormatError(f"{path}: expected tensors 'images' and 'labels', found {sorted(tensors)}")
    images, labels = tensors["images"], tensors["labels"]
    if images.ndim != 4 or labels.shape != (images.shape[0],):
        raise FormatError(f"{path}: inconsistent images/labels shapes")
    if images.shape[0] == 0:
        raise ValidationError(f"{path}: split has no samples")
    return Split(torch.from_numpy(images.copy()), torch.from_numpy(labels.astype(np.int64)))


def load_dataset(manifest_path, verify=True) -> ImageDataset:
    manifest_path = Path(manifest_path)
    m = DatasetManifest.from_json(manifest_path.read_text())
    splits = {k: _load_split(manifest_path.parent / p) for k, p in m.splits.items() if p}
    if "test" not in splits:
        raise ValidationError(f"dataset {m.id} has no test split")
    ds = ImageDataset(m.id, list(m.class_names), splits["test"], splits.get("train"),
                      m.prompt_template, m.zero_shot)
    if verify and ds.content_hash() != m.content_hash:
        raise CorruptionError(f"dataset {m.id}: content hash mismatch")
    return ds
