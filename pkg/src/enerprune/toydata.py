"""Bundled 10-class 16x16 grayscale shapes task and the matching toy CNN.

The generator draws simple glyphs (bars, diagonals, crosses, boxes, disks,
rings, checkers) with jittered position, size, brightness and pixel noise on
a zero background, so the task is learnable by a small CNN in seconds while
keeping realistic activation sparsity.
"""

from __future__ import annotations

import numpy as np

from .nets import (
    CONV,
    FC,
    IDENTITY,
    RELU,
    FilterBank,
    Layer,
    LayerShape,
    Network,
    init_bank,
    relu_pool,
)
from .tensorio import Dataset

SIZE = 16
N_CLASSES = 10

CLASS_NAMES = (
    "hbar",
    "vbar",
    "diag",
    "antidiag",
    "cross",
    "xcross",
    "box",
    "disk",
    "ring",
    "checker",
)


def _draw(cls: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    cy = SIZE // 2 + rng.integers(-2, 3)
    cx = SIZE // 2 + rng.integers(-2, 3)
    half = int(rng.integers(4, 7))
    thick = int(rng.integers(0, 2))
    dy = yy - cy
    dx = xx - cx
    box = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if cls == 0:  # horizontal bar
        m = (np.abs(dy) <= thick) & (np.abs(dx) <= half)
    elif cls == 1:  # vertical bar
        m = (np.abs(dx) <= thick) & (np.abs(dy) <= half)
    elif cls == 2:  # main diagonal
        m = (np.abs(dy - dx) <= thick) & box
    elif cls == 3:  # anti-diagonal
        m = (np.abs(dy + dx) <= thick) & box
    elif cls == 4:  # plus
        m = ((np.abs(dy) <= 0) | (np.abs(dx) <= 0)) & box
    elif cls == 5:  # x
        m = ((np.abs(dy - dx) <= 0) | (np.abs(dy + dx) <= 0)) & box
    elif cls == 6:  # box outline
        edge = np.maximum(np.abs(dy), np.abs(dx))
        m = (edge <= half) & (edge >= half - thick)
    elif cls == 7:  # filled disk
        m = dy * dy + dx * dx <= (half - 1) ** 2
    elif cls == 8:  # ring
        r2 = dy * dy + dx * dx
        m = (r2 <= half * half) & (r2 >= (half - 1 - thick) ** 2)
    elif cls == 9:  # checkerboard
        m = box & ((yy + xx) % 2 == int(rng.integers(0, 2)))
    else:
        raise ValueError(f"unknown class {cls}")
    img = np.zeros((SIZE, SIZE), dtype=np.float32)
    base = rng.uniform(0.6, 1.0)
    noise = rng.normal(0.0, 0.08, size=m.sum())
    img[m] = np.clip(base + noise, 0.2, 1.4)
    # speckle clutter
    for _ in range(int(rng.integers(0, 4))):
        sy, sx = rng.integers(0, SIZE, size=2)
        img[sy, sx] = rng.uniform(0.3, 1.0)
    return img


def generate_dataset(
    n_per_class: int = 200, seed: int = 0, val_fraction: float = 0.2
) -> Dataset:
    """Build a shuffled shapes dataset with a train/val split."""
    rng = np.random.default_rng(seed)
    n = n_per_class * N_CLASSES
    images = np.zeros((n, 1, SIZE, SIZE), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    i = 0
    for cls in range(N_CLASSES):
        for _ in range(n_per_class):
            images[i, 0] = _draw(cls, rng)
            labels[i] = cls
            i += 1
    perm = rng.permutation(n)
    images = images[perm]
    labels = labels[perm]
    n_val = int(round(n * val_fraction))
    n_train = n - n_val
    return Dataset(
        images,
        labels,
        np.arange(0, n_train, dtype=np.int64),
        np.arange(n_train, n, dtype=np.int64),
    )


def build_toy_cnn(
    rng: np.random.Generator, n_classes: int = N_CLASSES, energy_batch: int = 8
) -> Network:
    """3 CONV + 2 FC classifier for the shapes task.

    ``energy_batch`` is stored in the layer shapes and only affects energy
    accounting (weight-traffic amortisation); forward/backward accept any
    actual batch size.
    """
    specs = [
        ("conv1", LayerShape(CONV, 16, 16, 1, 3, 3, 8, 1, 1, energy_batch), relu_pool(2)),
        ("conv2", LayerShape(CONV, 8, 8, 8, 3, 3, 16, 1, 1, energy_batch), relu_pool(2)),
        ("conv3", LayerShape(CONV, 4, 4, 16, 3, 3, 32, 1, 1, energy_batch), RELU),
        ("fc1", LayerShape(FC, 4, 4, 32, 4, 4, 64, 1, 0, energy_batch), RELU),
        ("fc2", LayerShape(FC, 1, 1, 64, 1, 1, n_classes, 1, 0, energy_batch), IDENTITY),
    ]
    net = Network([Layer(name, init_bank(shape, rng), post) for name, shape, post in specs])
    net.validate_chain()
    return net


def train_toy_cnn(
    net: Network,
    dataset: Dataset,
    rng: np.random.Generator,
    epochs: int = 30,
    lr: float = 0.08,
    batch_size: int = 32,
) -> list[float]:
    """Plain SGD; returns the per-epoch mean training loss."""
    from .nets import train_step

    xtr = dataset.images[dataset.train_idx]
    ytr = dataset.labels[dataset.train_idx]
    losses = []
    for _ in range(epochs):
        perm = rng.permutation(xtr.shape[0])
        total = 0.0
        for start in range(0, perm.size, batch_size):
            sel = perm[start : start + batch_size]
            total += train_step(net, xtr[sel], ytr[sel], lr) * sel.size
        losses.append(total / perm.size)
    return losses


def rebuild_head(net: Network, n_classes_kept: list[int]) -> Network:
    """Drop final-layer filters for removed classes (class-subset experiments)."""
    out = net.clone()
    last = out.layers[-1]
    s = last.bank.shape
    keep = np.asarray(n_classes_kept, dtype=np.int64)
    new_shape = LayerShape(
        s.kind, s.in_h, s.in_w, s.in_c, s.filt_h, s.filt_w, len(keep), s.stride, s.pad, s.batch
    )
    out.layers[-1] = Layer(
        last.name,
        FilterBank(
            new_shape,
            last.bank.weights[:, keep].copy(),
            last.bank.bias[keep].copy(),
            last.bank.mask[:, keep].copy(),
        ),
        last.post,
    )
    return out
