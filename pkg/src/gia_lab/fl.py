"""Federated client simulation: datasets and the updates a server observes.

Attacks consume :class:`Update` objects; the hidden ground-truth batch is
returned separately and used only for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models, rng
from . import tensor as T

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
SYNTH_MEAN = 0.5
SYNTH_STD = 0.5

RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str
    mean: np.ndarray  # per-channel
    std: np.ndarray

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return (images - self.mean[None, :, None, None]) / self.std[None, :, None, None]

    def denormalize(self, images: np.ndarray) -> np.ndarray:
        out = images * self.std[None, :, None, None] + self.mean[None, :, None, None]
        return np.clip(out, 0.0, 1.0)


@dataclass
class ClientConfig:
    batch_size: int
    epochs: int = 1
    lr: float = 0.1
    optimizer: str = "sgd"
    seed: int = 0

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ValueError(f"invalid client config: {self}")
        if self.optimizer != "sgd":
            raise ValueError(f"local optimizer must be plain sgd, got {self.optimizer}")


@dataclass
class Update:
    kind: str  # "fedsgd-gradient" | "fedavg-delta"
    tensors: dict
    meta: dict = field(default_factory=dict)


def load_cifar10(path, subset=None) -> Dataset:
    """Read CIFAR-10 binary records (1 label byte + 3072 channel-major pixels)."""
    raw = np.fromfile(str(path), dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    if subset is not None:
        idx = np.asarray(list(subset), dtype=np.int64)
        images, labels = images[idx], labels[idx]
    return Dataset(
        images=images,
        labels=labels,
        name="cifar10",
        mean=np.asarray(CIFAR10_MEAN),
        std=np.asarray(CIFAR10_STD),
    )


def synth_dataset(n, channels, height, width, classes, seed) -> Dataset:
    """Smooth random images: per channel the sum of 3 Gaussian blobs,
    min-max scaled to [0, 1] per image. Labels are assigned round-robin.
    """
    if min(n, channels, height, width, classes) < 1:
        raise ValueError("synth_dataset: all arguments must be positive")
    g = rng.stream(seed, 101)
    yy, xx = np.mgrid[0:height, 0:width]
    images = np.zeros((n, channels, height, width))
    for i in range(n):
        for c in range(channels):
            img = np.zeros((height, width))
            for _ in range(3):
                cy = g.uniform(0, height)
                cx = g.uniform(0, width)
                sig = g.uniform(max(1.0, height / 8), height / 3)
                amp = g.uniform(0.5, 1.0)
                img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
            lo, hi = img.min(), img.max()
            images[i, c] = (img - lo) / (hi - lo + 1e-12)
    labels = np.arange(n, dtype=np.int64) % classes
    return Dataset(
        images=images,
        labels=labels,
        name=f"synth{channels}x{height}x{width}",
        mean=np.full(channels, SYNTH_MEAN),
        std=np.full(channels, SYNTH_STD),
    )


def _update_meta(dataset: Dataset, spec, batch_size, epochs, lr, n_local):
    return {
        "B": int(batch_size),
        "E": int(epochs),
        "eta": float(lr),
        "mean": dataset.mean.tolist(),
        "std": dataset.std.tolist(),
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "n_local": int(n_local),
    }


def fedsgd_round(spec, params, dataset: Dataset, batch_size, seed, round_index=0):
    """One FedSGD round: the mean gradient on one sampled batch.

    Returns (Update, (raw images, labels)) — the batch is the evaluation
    ground truth and is never placed in the update.
    """
    if batch_size > dataset.n:
        raise ValueError(
            f"fedsgd_round: batch size {batch_size} exceeds dataset size {dataset.n}"
        )
    g = rng.stream(seed, 211, round_index)
    idx = g.choice(dataset.n, size=batch_size, replace=False)
    x = dataset.normalize(dataset.images[idx])
    y = dataset.labels[idx]
    _, grads = models.loss_and_grads(spec, params, x, y)
    update = Update(
        kind="fedsgd-gradient",
        tensors=grads,
        meta=_update_meta(dataset, spec, batch_size, 1, 0.0, batch_size),
    )
    return update, (dataset.images[idx].copy(), y.copy())


def fedavg_round(spec, params, dataset: Dataset, cfg: ClientConfig):
    """E epochs of plain SGD over the client subset; returns the delta.

    The trace records the batch order per step so a strong-simulation
    attacker can replay the local run exactly.
    """
    cfg.validate()
    if cfg.batch_size > dataset.n:
        raise ValueError(
            f"fedavg_round: batch size {cfg.batch_size} exceeds dataset size {dataset.n}"
        )
    theta = {k: v.copy() for k, v in params.items()}
    step_indices = []
    for epoch in range(cfg.epochs):
        g = rng.stream(cfg.seed, 223, epoch)
        perm = g.permutation(dataset.n)
        for start in range(0, dataset.n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x = dataset.normalize(dataset.images[idx])
            y = dataset.labels[idx]
            _, grads = models.loss_and_grads(spec, theta, x, y)
            theta = {k: theta[k] - cfg.lr * grads[k] for k in theta}
            step_indices.append(idx.tolist())
    delta = {k: theta[k] - params[k] for k in params}
    update = Update(
        kind="fedavg-delta",
        tensors=delta,
        meta=_update_meta(dataset, spec, cfg.batch_size, cfg.epochs, cfg.lr, dataset.n),
    )
    trace = {"step_indices": step_indices, "seed": cfg.seed, "lr": cfg.lr,
             "batch_size": cfg.batch_size, "epochs": cfg.epochs}
    return update, trace


def per_sample_grads(spec, params, x, y) -> list:
    """Gradient of each sample alone (batch of one), in order."""
    out = []
    for i in range(x.shape[0]):
        _, grads = models.loss_and_grads(spec, params, x[i : i + 1], y[i : i + 1])
        out.append(grads)
    return out
