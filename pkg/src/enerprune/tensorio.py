"""Tensor file I/O and dataset directories.

File format (.tnsr): magic b"TNSR", version byte 0x01, u8 rank, then
rank little-endian u32 dims, then the float32 payload in row-major order.
Round trips are bit exact.

A dataset directory holds ``images.tnsr`` [N,C,H,W], ``labels.tnsr`` [N]
(float32 with integral values) and ``split.json`` with half-open index
ranges, e.g. ``{"train": [0, 1600], "val": [1600, 2000]}``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DimOverflowError,
    TruncatedPayloadError,
)

MAGIC = b"TNSR"
VERSION = 0x01
MAX_ELEMENTS = 2**31  # sanity cap on product(dims)


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` as float32 in the TNSR format (atomic: temp + rename)."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > 255:
        raise ConfigError(f"tensor rank {arr.ndim} not supported")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    _atomic_write(path, header + arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a TNSR file back into a float32 array."""
    blob = Path(path).read_bytes()
    if len(blob) < 6 or blob[:4] != MAGIC or blob[4] != VERSION:
        raise BadMagicError(f"{path}: bad magic or unsupported version")
    rank = blob[5]
    head_end = 6 + 4 * rank
    if len(blob) < head_end:
        raise TruncatedPayloadError(f"{path}: header truncated")
    dims = struct.unpack(f"<{rank}I", blob[6:head_end])
    count = 1
    for d in dims:
        count *= int(d)
    if count > MAX_ELEMENTS:
        raise DimOverflowError(f"{path}: dims {dims} overflow element cap")
    payload = blob[head_end:]
    if len(payload) < 4 * count:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload) // 4} of {count} elements"
        )
    data = np.frombuffer(payload[: 4 * count], dtype="<f4")
    return data.reshape(dims).astype(np.float32, copy=True)


def _atomic_write(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


@dataclass
class Dataset:
    """Labelled image set with a train/val split."""

    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    train_idx: np.ndarray
    val_idx: np.ndarray

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset_classes(self, classes: list[int]) -> "Dataset":
        """Keep only the given classes, relabelled 0..len(classes)-1."""
        classes = list(classes)
        remap = {c: i for i, c in enumerate(classes)}
        keep = np.isin(self.labels, classes)
        new_pos = np.cumsum(keep) - 1
        images = self.images[keep]
        labels = np.array([remap[int(c)] for c in self.labels[keep]], dtype=np.int64)
        tr = new_pos[self.train_idx[keep[self.train_idx]]]
        va = new_pos[self.val_idx[keep[self.val_idx]]]
        return Dataset(images, labels, tr.astype(np.int64), va.astype(np.int64))


def save_dataset(dirpath: str | Path, ds: Dataset) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    write_tensor(dirpath / "images.tnsr", ds.images)
    write_tensor(dirpath / "labels.tnsr", ds.labels.astype(np.float32))
    n_train = int(ds.train_idx.size)
    split = {
        "train": [0, n_train],
        "val": [n_train, n_train + int(ds.val_idx.size)],
    }
    # canonical layout: train indices first, then val
    order = np.concatenate([ds.train_idx, ds.val_idx])
    if not np.array_equal(order, np.arange(ds.images.shape[0])):
        write_tensor(dirpath / "images.tnsr", ds.images[order])
        write_tensor(dirpath / "labels.tnsr", ds.labels[order].astype(np.float32))
    atomic_write_text(dirpath / "split.json", json.dumps(split))


def load_dataset(dirpath: str | Path) -> Dataset:
    dirpath = Path(dirpath)
    for fname in ("images.tnsr", "labels.tnsr", "split.json"):
        if not (dirpath / fname).exists():
            raise ConfigError(f"dataset {dirpath}: missing {fname}")
    images = read_tensor(dirpath / "images.tnsr")
    labels_f = read_tensor(dirpath / "labels.tnsr")
    if images.ndim != 4:
        raise ConfigError(f"dataset {dirpath}: images must be [N,C,H,W]")
    if labels_f.ndim != 1 or labels_f.shape[0] != images.shape[0]:
        raise ConfigError(f"dataset {dirpath}: labels must be [N] matching images")
    if not np.all(labels_f == np.round(labels_f)):
        raise ConfigError(f"dataset {dirpath}: labels must be integral")
    split = json.loads((dirpath / "split.json").read_text())
    n = images.shape[0]

    def _range(name: str) -> np.ndarray:
        try:
            lo, hi = split[name]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"dataset {dirpath}: split.json lacks range {name!r}") from exc
        if not (0 <= lo <= hi <= n):
            raise ConfigError(f"dataset {dirpath}: {name} range [{lo},{hi}) out of bounds")
        return np.arange(lo, hi, dtype=np.int64)

    return Dataset(images, labels_f.astype(np.int64), _range("train"), _range("val"))
