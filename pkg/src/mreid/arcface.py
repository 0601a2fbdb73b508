"""Sub-center additive-angular-margin kernel, GeM pooling, LR schedule.

Forward rule per sample: normalize the embedding and every class
sub-center weight row, take cosines, reduce each class to the max over
its sub-centers, replace the target class cosine cos(theta) by
cos(theta + m) for that class's margin m (falling back to
cos(theta) - m*sin(m) once theta + m would pass pi), scale everything
by s, and apply softmax cross-entropy. Margins are per class and
decrease with class frequency.

All ops are pure functions, run in the dtype of their inputs (float64
supported throughout for gradient checking), and have hand-derived
analytic gradients in ``arcface_backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidCount, LabelOutOfRange, NonFiniteInput, ValidationError

_SIN_FLOOR = 1e-12  # keeps d(cos(theta+m))/d(cos theta) finite at theta -> 0

# production training constants, recorded for reference; the toy trainer
# is full-batch and never touches images
REFERENCE_BATCH_SIZE = 112
REFERENCE_IMAGE_SIZE = 256


@dataclass(frozen=True)
class MarginPolicy:
    """Min-max normalized power-law map from class counts to margins."""

    m_min: float = 0.05
    m_max: float = 0.5
    exponent: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.m_min < self.m_max < math.pi / 2:
            raise ValidationError("need 0 < m_min < m_max < pi/2")
        if self.exponent <= 0.0:
            raise ValidationError("exponent must be positive")


def dynamic_margins(
    class_counts: Sequence[int] | np.ndarray, policy: MarginPolicy = MarginPolicy()
) -> np.ndarray:
    """Per-class margins: the rarest class gets m_max, the most frequent
    m_min, interpolated by count^(-exponent); all-equal counts get m_max."""
    counts = np.asarray(class_counts)
    for i, c in enumerate(counts.tolist()):
        if int(c) != c or c < 1:
            raise InvalidCount(i, c)
    counts = counts.astype(np.float64)
    n_min, n_max = counts.min(), counts.max()
    if n_min == n_max:
        return np.full(counts.shape, policy.m_max, dtype=np.float64)
    lam = policy.exponent
    a = counts**-lam
    scale = (a - n_max**-lam) / (n_min**-lam - n_max**-lam)
    return policy.m_min + (policy.m_max - policy.m_min) * scale


@dataclass
class ArcHead:
    """Classification head state: C classes x K sub-centers x D dims.

    Stored weights are unconstrained; normalization happens inside the
    forward pass. Margins live in (0, pi/2).
    """

    num_classes: int
    subcenters: int
    dim: int
    weights: np.ndarray  # (C, K, D)
    scale: float = 51.5
    margins: np.ndarray | None = None  # (C,)

    def __post_init__(self):
        if self.num_classes < 1 or self.subcenters < 1 or self.dim < 1:
            raise ValidationError("num_classes, subcenters, dim must be >= 1")
        if self.scale <= 0:
            raise ValidationError("scale must be positive")
        self.weights = np.asarray(self.weights)
        expected = (self.num_classes, self.subcenters, self.dim)
        if self.weights.shape != expected:
            raise ValidationError(f"weights shape {self.weights.shape} != {expected}")
        if self.margins is None:
            self.margins = np.full(self.num_classes, 0.5, dtype=np.float64)
        self.margins = np.asarray(self.margins, dtype=np.float64)
        if self.margins.shape != (self.num_classes,):
            raise ValidationError("margins must have one entry per class")
        # zero admitted so the margin-free reduction is expressible
        if np.any(self.margins < 0) or np.any(self.margins >= math.pi / 2):
            raise ValidationError("margins must lie in [0, pi/2)")

    @classmethod
    def initialize(
        cls,
        num_classes: int,
        dim: int,
        subcenters: int = 3,
        scale: float = 51.5,
        margins: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ) -> "ArcHead":
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.standard_normal((num_classes, subcenters, dim)).astype(dtype)
        return cls(
            num_classes=num_classes,
            subcenters=subcenters,
            dim=dim,
            weights=w,
            scale=scale,
            margins=margins,
        )


def _check_inputs(embeddings: np.ndarray, labels: np.ndarray, head: ArcHead):
    if embeddings.ndim != 2 or embeddings.shape[1] != head.dim:
        raise ValidationError(
            f"embeddings must be (B, {head.dim}), got {embeddings.shape}"
        )
    if embeddings.shape[0] < 1:
        raise ValidationError("batch must be non-empty")
    if not np.all(np.isfinite(embeddings)) or not np.all(np.isfinite(head.weights)):
        raise NonFiniteInput("non-finite embeddings or weights")
    if labels.shape != (embeddings.shape[0],):
        raise ValidationError("labels must be one id per batch row")
    if labels.min() < 0 or labels.max() >= head.num_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {head.num_classes})")


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("zero rows cannot be normalized")
    return x / norms, norms


def _forward_parts(embeddings: np.ndarray, labels: np.ndarray, head: ArcHead):
    """Shared forward computation; returns everything backward needs."""
    dtype = np.result_type(embeddings.dtype, head.weights.dtype, np.float32)
    x = np.asarray(embeddings, dtype=dtype)
    w = np.asarray(head.weights, dtype=dtype)
    labels = np.asarray(labels, dtype=np.int64)
    _check_inputs(x, labels, head)

    e, x_norms = _normalize_rows(x)
    wn, w_norms = _normalize_rows(w)
    # cosines to all sub-centers, then max per class (first index wins ties)
    u = np.einsum("bd,ckd->bck", e, wn)
    kstar = np.argmax(u, axis=2)
    cos_max = np.take_along_axis(u, kstar[:, :, None], axis=2)[:, :, 0]

    b_idx = np.arange(x.shape[0])
    margins = np.asarray(head.margins, dtype=dtype)[labels]
    cos_t = cos_max[b_idx, labels]
    sin_t = np.sqrt(np.maximum(1.0 - cos_t**2, 0.0))
    phi = cos_t * np.cos(margins) - sin_t * np.sin(margins)
    safe = cos_t > np.cos(math.pi - margins)
    target = np.where(safe, phi, cos_t - margins * np.sin(margins))

    logits_cos = cos_max.copy()
    logits_cos[b_idx, labels] = target
    logits = head.scale * logits_cos

    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    loss = float(np.mean(lse - logits[b_idx, labels]))
    softmax = np.exp(logits - lse[:, None])
    return {
        "loss": loss,
        "logits": logits,
        "softmax": softmax,
        "e": e,
        "x_norms": x_norms,
        "wn": wn,
        "w_norms": w_norms,
        "kstar": kstar,
        "cos_t": cos_t,
        "sin_t": sin_t,
        "safe": safe,
        "margins": margins,
        "labels": labels,
        "dtype": dtype,
    }


def arcface_forward(
    embeddings: np.ndarray, labels: Sequence[int] | np.ndarray, head: ArcHead
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy loss and the scaled (B, C) logits."""
    parts = _forward_parts(np.asarray(embeddings), np.asarray(labels), head)
    return parts["loss"], parts["logits"]


def arcface_backward(
    embeddings: np.ndarray, labels: Sequence[int] | np.ndarray, head: ArcHead
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the mean loss w.r.t. embeddings and weights.

    Gradient flows through each class's argmax sub-center only (lowest
    index on exact ties), and through the row normalizations.
    """
    p = _forward_parts(np.asarray(embeddings), np.asarray(labels), head)
    e, wn, kstar, labels_ = p["e"], p["wn"], p["kstar"], p["labels"]
    B, C = p["softmax"].shape
    b_idx = np.arange(B)

    g_logits = p["softmax"].copy()
    g_logits[b_idx, labels_] -= 1.0
    g_logits /= B

    # d logits / d cos_max: s off-target, s * f'(cos theta) on target
    sin_t = np.maximum(p["sin_t"], _SIN_FLOOR)
    fprime_safe = np.cos(p["margins"]) + p["cos_t"] * np.sin(p["margins"]) / sin_t
    fprime = np.where(p["safe"], fprime_safe, 1.0)
    coef = np.full((B, C), head.scale, dtype=p["dtype"])
    coef[b_idx, labels_] *= fprime
    d_cos = g_logits * coef

    # gather each class's winning sub-center direction: (B, C, D)
    w_sel = wn[np.arange(C)[None, :], kstar, :]
    d_e = np.einsum("bc,bcd->bd", d_cos, w_sel)
    d_x = (d_e - e * np.sum(e * d_e, axis=1, keepdims=True)) / p["x_norms"]

    # scatter-add per (class, winning sub-center), then undo normalization
    K = head.subcenters
    d_wn = np.zeros((C * K, e.shape[1]), dtype=p["dtype"])
    flat_idx = (np.arange(C)[None, :] * K + kstar).reshape(-1)
    contrib = (d_cos[:, :, None] * e[:, None, :]).reshape(B * C, -1)
    np.add.at(d_wn, flat_idx, contrib)
    d_wn = d_wn.reshape(C, K, -1)
    d_w = (d_wn - wn * np.sum(wn * d_wn, axis=2, keepdims=True)) / p["w_norms"]
    return d_x, d_w


@dataclass(frozen=True)
class GemPool:
    """Generalized-mean pooling: p=1 is average pooling, p -> inf is max."""

    p: float = 3.0
    learnable: bool = False
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.p <= 0:
            raise ValidationError("p must be positive")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")


def gem_pool(features: np.ndarray, pool: GemPool = GemPool()) -> np.ndarray:
    """Pool an (H, W, D) feature map to a length-D descriptor."""
    x = np.asarray(features)
    if x.ndim != 3:
        raise ValidationError(f"expected (H, W, D) feature map, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("non-finite feature map")
    x = np.maximum(x, pool.epsilon)
    return np.mean(x**pool.p, axis=(0, 1)) ** (1.0 / pool.p)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to the peak rate, then exponential per-epoch decay."""

    warmup_epochs: int = 15
    lr_start: float = 1.5e-5
    lr_peak: float = 1.5e-3
    decay: float = 0.8

    def __post_init__(self):
        if self.warmup_epochs < 0:
            raise ValidationError("warmup_epochs must be >= 0")
        if self.lr_start <= 0 or self.lr_peak <= 0 or not 0 < self.decay <= 1:
            raise ValidationError("rates must be positive and decay in (0, 1]")


def lr_at(epoch: int, sched: LrSchedule = LrSchedule()) -> float:
    """Learning rate at an epoch; continuous at the warmup boundary."""
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    if epoch < sched.warmup_epochs:
        frac = epoch / sched.warmup_epochs
        return sched.lr_start + (sched.lr_peak - sched.lr_start) * frac
    return sched.lr_peak * sched.decay ** (epoch - sched.warmup_epochs)
