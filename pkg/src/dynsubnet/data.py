"""Datasets: CIFAR-10 binary batches and a seeded synthetic texture task."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, FormatError

CIFAR_RECORD = 3073
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = "test_batch.bin"


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx])

    def batches(self, batch_size, rng=None):
        order = np.arange(len(self.y)) if rng is None else rng.permutation(len(self.y))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            yield self.x[idx], self.y[idx]


def augment_batch(x, rng, pad=4):
    """Random zero-padded crop and horizontal flip, one draw per image."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


@dataclass
class Augmented(Dataset):
    """Training view that augments every yielded batch."""

    pad: int = 4

    def batches(self, batch_size, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        for x, y in super().batches(batch_size, rng):
            yield augment_batch(x, rng, self.pad), y


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    val_indices: np.ndarray


def parse_cifar_bytes(buf, start_offset=0):
    """Decode CIFAR-10 binary records into ``(uint8 images N x 3 x 32 x 32, labels)``."""
    n, rem = divmod(len(buf), CIFAR_RECORD)
    if rem:
        raise FormatError(
            f"CIFAR-10 file is truncated: {len(buf)} bytes is not a multiple of {CIFAR_RECORD}",
            start_offset + n * CIFAR_RECORD,
        )
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} > 9", start_offset + int(bad[0]) * CIFAR_RECORD)
    images = arr[:, 1:].reshape(n, 3, 32, 32).copy()
    return images, labels


def read_cifar_file(path):
    with open(path, "rb") as fh:
        return parse_cifar_bytes(fh.read())


def _standardize(train_x, *others):
    mean = train_x.mean(axis=(0, 2, 3), keepdims=True)
    std = train_x.std(axis=(0, 2, 3), keepdims=True) + 1e-6
    return [((a - mean) / std).astype(np.float32) for a in (train_x, *others)]


def load_cifar10(root, train_limit=None, seed=0):
    """Load train/test batches from ``root``; pixels scaled to [0, 1] then standardized per channel."""
    xs, ys = [], []
    for name in CIFAR_TRAIN:
        path = os.path.join(root, name)
        if os.path.exists(path):
            x, y = read_cifar_file(path)
            xs.append(x)
            ys.append(y)
    if not xs:
        raise DataError(f"no CIFAR-10 training batches found in {root}")
    test_x, test_y = read_cifar_file(os.path.join(root, CIFAR_TEST))
    train_x, train_y = np.concatenate(xs), np.concatenate(ys)
    if train_limit is not None and train_limit < len(train_y):
        idx = np.sort(np.random.default_rng(seed).choice(len(train_y), train_limit, replace=False))
        train_x, train_y = train_x[idx], train_y[idx]
    train_x, test_x = _standardize(train_x.astype(np.float32) / 255.0, test_x.astype(np.float32) / 255.0)
    return Dataset(train_x, train_y), Dataset(test_x, test_y)


def _class_templates(rng, classes, channels, size, waves):
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    temps = np.zeros((classes, channels, size, size))
    for c in range(classes):
        for ch in range(channels):
            for _ in range(waves):
                fy, fx = rng.integers(0, size // 2 + 1, 2)
                if fy == 0 and fx == 0:
                    fx = 1
                phase = rng.uniform(0, 2 * np.pi)
                temps[c, ch] += np.cos(2 * np.pi * (fy * yy + fx * xx) / size + phase)
        temps[c] /= np.sqrt(np.mean(temps[c] ** 2))
    return temps


def synthetic(classes=4, samples=2000, size=8, separation=1.0, seed=0, channels=3, waves=2):
    """Gaussian clouds around randomly shifted periodic class templates.

    Each sample is ``separation * roll(template[c]) + N(0, 1)``; random
    circular shifts make the class signal a texture rather than a location.
    """
    if classes < 2 or samples < 1 or size < 2:
        raise ConfigurationError("synthetic spec needs classes >= 2, samples >= 1, size >= 2")
    rng = np.random.default_rng(seed)
    temps = _class_templates(rng, classes, channels, size, waves)
    y = np.arange(samples) % classes
    rng.shuffle(y)
    shifts = rng.integers(0, size, (samples, 2))
    x = np.empty((samples, channels, size, size))
    for n in range(samples):
        x[n] = np.roll(temps[y[n]], tuple(shifts[n]), axis=(1, 2))
    x = separation * x + rng.standard_normal(x.shape)
    return x.astype(np.float32), y.astype(np.int64)


def _draw_val(dataset, size, seed):
    if size >= len(dataset):
        return np.arange(len(dataset))
    return np.sort(np.random.default_rng(seed).choice(len(dataset), size, replace=False))


def load_dataset(descriptor, seed=0):
    """Return :class:`Splits` for a descriptor dict.

    ``{"kind": "synthetic", "classes", "samples", "size", "separation", "seed", "val", "test"}``
    draws independent train/validation/test sets from one template family.
    ``{"kind": "cifar10", "path", "train_limit", "val"}`` samples the
    validation subset from the test batch.
    """
    d = dict(descriptor)
    kind = d.pop("kind", "synthetic")
    val_size = int(d.pop("val", 5000))
    if kind == "cifar10":
        train, test = load_cifar10(d["path"], d.get("train_limit"), seed)
        idx = _draw_val(test, val_size, seed)
        return Splits(train, test.subset(idx), test, idx)
    if kind != "synthetic":
        raise ConfigurationError(f"unknown dataset kind {kind!r}")
    test_size = int(d.pop("test", 2000))
    samples = int(d.pop("samples", 2000))
    data_seed = int(d.pop("seed", seed))
    x, y = synthetic(samples=samples + val_size + test_size, seed=data_seed, **d)
    tr, va, te = _standardize(x[:samples], x[samples:samples + val_size], x[samples + val_size:])
    train = Dataset(tr, y[:samples])
    val = Dataset(va, y[samples:samples + val_size])
    test = Dataset(te, y[samples + val_size:])
    return Splits(train, val, test, np.arange(val_size))
