"""Flat named views of trainable parameters and the PMGA checkpoint file."""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .binio import Reader, Writer
from .errors import ShapeError, ValidationError

CHECKPOINT_MAGIC = b"PMGA"


@dataclass
class ParameterSnapshot:
    segments: dict  # name -> np.ndarray, insertion order is the layout
    source: str = ""
    meta: dict = field(default_factory=dict)

    def layout(self):
        return [(name, tuple(arr.shape)) for name, arr in self.segments.items()]

    def __len__(self):
        return sum(arr.size for arr in self.segments.values())

    def flat(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([arr.ravel().astype(np.float64) for arr in self.segments.values()])

    def check_layout(self, other: "ParameterSnapshot"):
        if self.layout() != other.layout():
            raise ShapeError(f"snapshot layouts differ: {self.layout()} vs {other.layout()}")

    def __eq__(self, other):
        if not isinstance(other, ParameterSnapshot) or self.layout() != other.layout():
            return False
        return all(np.array_equal(a, other.segments[k]) for k, a in self.segments.items())


def _target(model):
    return getattr(model, "image_encoder", model)


def snapshot_parameters(model: nn.Module, source="") -> ParameterSnapshot:
    """Independent copy of the image tower's parameters (or of any module's parameters)."""
    segs = {name: p.detach().cpu().numpy().copy() for name, p in _target(model).named_parameters()}
    return ParameterSnapshot(segs, source)


def load_snapshot(model: nn.Module, snap: ParameterSnapshot):
    target = _target(model)
    current = dict(target.named_parameters())
    expected = [(n, tuple(p.shape)) for n, p in current.items()]
    if expected != snap.layout():
        raise ShapeError(f"snapshot layout {snap.layout()} does not match model layout {expected}")
    with torch.no_grad():
        for name, arr in snap.segments.items():
            p = current[name]
            p.copy_(torch.from_numpy(np.asarray(arr)).to(p.dtype))
    return model


def relative_drift(current: ParameterSnapshot, reference: ParameterSnapshot) -> float:
    current.check_layout(reference)
    ref = reference.flat()
    denom = np.linalg.norm(ref)
    if denom == 0:
        raise ValidationError("reference parameters have zero norm")
    return float(np.linalg.norm(current.flat() - ref) / denom)


def interpolate(theta0: ParameterSnapshot, theta_ft: ParameterSnapshot, lam: float) -> ParameterSnapshot:
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"interpolation weight must lie in [0, 1], got {lam}")
    theta0.check_layout(theta_ft)
    segs = {}
    for name, a in theta0.segments.items():
        b = theta_ft.segments[name]
        if lam == 0.0:
            segs[name] = a.copy()
        elif lam == 1.0:
            segs[name] = b.copy()
        else:
            segs[name] = ((1.0 - lam) * a + lam * b).astype(a.dtype)
    return ParameterSnapshot(segs, f"interp({lam})")


def save_checkpoint(path, snap: ParameterSnapshot):
    w = Writer(CHECKPOINT_MAGIC)
    w.u32(len(snap.segments))
    for name, arr in snap.segments.items():
        w.name(name)
        w.shape(arr.shape)
        w.payload(arr, np.float32)
    data = w.getvalue()
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> ParameterSnapshot:
    r = Reader(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    segs = {}
    for _ in range(r.u32()):
        name = r.name()
        dims = r.shape()
        segs[name] = r.payload(dims, np.float32).copy()
    r.finish()
    return ParameterSnapshot(segs, str(path))
