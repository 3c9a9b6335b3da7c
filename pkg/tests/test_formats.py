"""Byte-layout pins for the checkpoint and tensor-archive formats."""
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from pmgaft.datasets import load_archive, save_archive
from pmgaft.errors import FormatError
from pmgaft.snapshot import ParameterSnapshot, load_checkpoint, save_checkpoint

GOLDEN = Path(__file__).parent / "golden"
sys.path.insert(0, str(GOLDEN))
from make_golden import archive_bytes, checkpoint_bytes  # noqa: E402

CKPT_SEGMENTS = {"fc.weight": np.array([[1.0, 2.0], [3.0, 4.5]], np.float32),
                 "fc.bias": np.array([-1.0, 0.25], np.float32)}
ARCHIVE_TENSORS = {"images": torch.tensor([[[[0.0, 0.5], [0.75, 1.0]]]]),
                   "labels": torch.tensor([3])}


def test_golden_files_match_reference_builder():
    assert (GOLDEN / "checkpoint.pmga").read_bytes() == checkpoint_bytes()
    assert (GOLDEN / "archive.pmgt").read_bytes() == archive_bytes()


def test_checkpoint_writer_reproduces_golden(tmp_path):
    data = save_checkpoint(tmp_path / "c.pmga", ParameterSnapshot(CKPT_SEGMENTS))
    assert data == (GOLDEN / "checkpoint.pmga").read_bytes()


def test_checkpoint_golden_loads():
    snap = load_checkpoint(GOLDEN / "checkpoint.pmga")
    assert list(snap.segments) == ["fc.weight", "fc.bias"]
    assert snap == ParameterSnapshot(CKPT_SEGMENTS)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    snap = load_checkpoint(GOLDEN / "checkpoint.pmga")
    assert save_checkpoint(tmp_path / "c.pmga", snap) == (GOLDEN / "checkpoint.pmga").read_bytes()


def test_archive_writer_reproduces_golden(tmp_path):
    save_archive(tmp_path / "a.pmgt", ARCHIVE_TENSORS)
    assert (tmp_path / "a.pmgt").read_bytes() == (GOLDEN / "archive.pmgt").read_bytes()


def test_archive_golden_loads_and_roundtrips(tmp_path):
    out = load_archive(GOLDEN / "archive.pmgt")
    assert out["images"].dtype == np.float32 and out["labels"].dtype == np.uint32
    assert out["images"].tolist() == ARCHIVE_TENSORS["images"].tolist() and out["labels"].tolist() == [3]
    save_archive(tmp_path / "a.pmgt", {k: torch.from_numpy(v.copy()) if v.dtype == np.float32 else v
                                       for k, v in out.items()})
    assert (tmp_path / "a.pmgt").read_bytes() == (GOLDEN / "archive.pmgt").read_bytes()


@pytest.mark.parametrize("name,loader", [("checkpoint.pmga", load_checkpoint), ("archive.pmgt", load_archive)])
def test_every_corruption_is_a_typed_error(tmp_path, name, loader):
    good = (GOLDEN / name).read_bytes()
    path = tmp_path / name
    variants = [good[:n] for n in range(len(good))]
    for i in range(len(good)):
        for mask in (0x01, 0x80, 0xFF):
            b = bytearray(good)
            b[i] ^= mask
            variants.append(bytes(b))
    variants.append(good + b"\x00")
    for data in variants:
        path.write_bytes(data)
        with pytest.raises(FormatError):
            loader(path)
