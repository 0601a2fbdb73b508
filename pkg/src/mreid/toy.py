"""Desk-scale trainer: linear embedder + batch norm + sub-center head.

Exists to prove the kernel end-to-end on synthetic clustered vectors:
dynamic margins from class counts, the margin forward/backward pass,
the warmup/decay schedule, and export of held-out embeddings through
the retrieval pipeline. Full-batch gradient descent, deterministic
under a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arcface import (
    ArcHead,
    LrSchedule,
    MarginPolicy,
    arcface_backward,
    arcface_forward,
    dynamic_margins,
    lr_at,
)
from .errors import DegenerateDataset

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ToyDataset:
    features: np.ndarray  # (N, input_dim) float64
    labels: np.ndarray  # (N,) int64

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def make_cluster_dataset(
    n_classes: int = 8,
    per_class: int | list[int] = 30,
    input_dim: int = 16,
    spread: float = 0.15,
    seed: int = 0,
    duplicate_centers: bool = False,
) -> ToyDataset:
    """Gaussian clusters around random unit centers; ``duplicate_centers``
    collapses all classes onto one center (indistinguishable classes)."""
    rng = np.random.default_rng(seed)
    counts = (
        [per_class] * n_classes if isinstance(per_class, int) else list(per_class)
    )
    if len(counts) != n_classes:
        raise DegenerateDataset("per_class list must have one entry per class")
    centers = rng.standard_normal((n_classes, input_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    if duplicate_centers:
        centers = np.repeat(centers[:1], n_classes, axis=0)
    feats, labels = [], []
    for c, n in enumerate(counts):
        feats.append(centers[c] + spread * rng.standard_normal((n, input_dim)))
        labels.extend([c] * n)
    return ToyDataset(
        features=np.concatenate(feats), labels=np.asarray(labels, dtype=np.int64)
    )


def split_holdout(
    dataset: ToyDataset, holdout_frac: float = 0.2, seed: int = 0
) -> tuple[ToyDataset, ToyDataset]:
    """Per-class split; every class keeps >= 2 held-out samples so the
    one-vs-all evaluation has positives."""
    rng = np.random.default_rng(seed)
    train_idx, hold_idx = [], []
    for c in range(dataset.n_classes):
        idx = np.nonzero(dataset.labels == c)[0]
        n_hold = max(2, math.ceil(holdout_frac * idx.size))
        if idx.size - n_hold < 1:
            raise DegenerateDataset(f"class {c} too small to hold out {n_hold}")
        picked = rng.permutation(idx.size)[:n_hold]
        mask = np.zeros(idx.size, dtype=bool)
        mask[picked] = True
        hold_idx.extend(idx[mask].tolist())
        train_idx.extend(idx[~mask].tolist())
    return (
        ToyDataset(dataset.features[train_idx], dataset.labels[train_idx]),
        ToyDataset(dataset.features[hold_idx], dataset.labels[hold_idx]),
    )


@dataclass
class ToyModel:
    """Linear projection -> per-feature batch norm -> margin head."""

    w_in: np.ndarray  # (input_dim, emb_dim)
    b_in: np.ndarray  # (emb_dim,)
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    head: ArcHead
    loss_trace: list[float] = field(default_factory=list)

    def embed(self, features: np.ndarray) -> np.ndarray:
        """Inference-mode embeddings (frozen batch-norm statistics)."""
        z = features @ self.w_in + self.b_in
        zhat = (z - self.running_mean) / np.sqrt(self.running_var + _BN_EPS)
        return self.gamma * zhat + self.beta


def toy_train(
    dataset: ToyDataset,
    emb_dim: int = 16,
    subcenters: int = 3,
    scale: float = 51.5,
    margin_policy: MarginPolicy = MarginPolicy(),
    sched: LrSchedule = LrSchedule(),
    epochs: int = 40,
    seed: int = 0,
    steps_per_epoch: int = 10,
) -> ToyModel:
    """Full-batch gradient descent over the whole pipeline.

    The per-epoch loss trace records the loss before that epoch's first
    step, plus the final loss as the last entry (length epochs + 1).
    """
    n_classes = dataset.n_classes
    counts = dataset.class_counts()
    if n_classes < 2:
        raise DegenerateDataset("need at least 2 classes")
    if counts.min() < 4:
        raise DegenerateDataset("need at least 4 samples per class")

    rng = np.random.default_rng(seed)
    x = np.asarray(dataset.features, dtype=np.float64)
    y = dataset.labels
    input_dim = x.shape[1]

    margins = dynamic_margins(counts, margin_policy)
    head = ArcHead.initialize(
        num_classes=n_classes,
        dim=emb_dim,
        subcenters=subcenters,
        scale=scale,
        margins=margins,
        rng=rng,
    )
    model = ToyModel(
        w_in=rng.standard_normal((input_dim, emb_dim)) / math.sqrt(input_dim),
        b_in=np.zeros(emb_dim),
        gamma=np.ones(emb_dim),
        beta=np.zeros(emb_dim),
        running_mean=np.zeros(emb_dim),
        running_var=np.ones(emb_dim),
        head=head,
    )

    n = x.shape[0]
    for epoch in range(epochs):
        lr = lr_at(epoch, sched)
        for step in range(steps_per_epoch):
            z = x @ model.w_in + model.b_in
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + _BN_EPS)
            zhat = (z - mu) * inv_std
            emb = model.gamma * zhat + model.beta

            loss, _ = arcface_forward(emb, y, head)
            if step == 0:
                model.loss_trace.append(loss)
            d_emb, d_w_head = arcface_backward(emb, y, head)

            d_gamma = np.sum(d_emb * zhat, axis=0)
            d_beta = np.sum(d_emb, axis=0)
            d_zhat = d_emb * model.gamma
            d_z = (inv_std / n) * (
                n * d_zhat
                - d_zhat.sum(axis=0)
                - zhat * np.sum(d_zhat * zhat, axis=0)
            )
            d_w_in = x.T @ d_z
            d_b_in = d_z.sum(axis=0)

            head.weights = head.weights - lr * d_w_head
            model.w_in -= lr * d_w_in
            model.b_in -= lr * d_b_in
            model.gamma -= lr * d_gamma
            model.beta -= lr * d_beta
            model.running_mean = (
                (1 - _BN_MOMENTUM) * model.running_mean + _BN_MOMENTUM * mu
            )
            model.running_var = (
                (1 - _BN_MOMENTUM) * model.running_var + _BN_MOMENTUM * var
            )

    z = x @ model.w_in + model.b_in
    mu, var = z.mean(axis=0), z.var(axis=0)
    emb = model.gamma * (z - mu) / np.sqrt(var + _BN_EPS) + model.beta
    final_loss, _ = arcface_forward(emb, y, head)
    model.loss_trace.append(final_loss)
    return model
