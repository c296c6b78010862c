"""Linear-probe multi-label evaluation and dense similarity histograms."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .pairing import cosine_matrix

logger = logging.getLogger(__name__)


@dataclass
class MetricsRecord:
    per_class_ap: list[float]
    map: float
    f1: float
    threshold: float = 0.5
    excluded_classes: list[int] = field(default_factory=list)
    histogram: dict | None = None

    def as_dict(self) -> dict:
        out = {
            "map": self.map,
            "f1": self.f1,
            "threshold": self.threshold,
            "per_class_ap": list(self.per_class_ap),
            "excluded_classes": list(self.excluded_classes),
        }
        if self.histogram is not None:
            out["histogram"] = self.histogram
        return out


def average_precision(scores, labels) -> float:
    """Mean of precision@rank over the ranks of the positives.

    Ranking is by descending score, ties broken by lower index first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        raise ValueError("average precision undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def f1_score(scores, labels, threshold: float = 0.5) -> float:
    """Micro-averaged F1 over every (sample, class) decision; 0 when TP == 0."""
    pred = np.asarray(scores) >= threshold
    labels = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[float], list[int]]:
    """mAP over classes with at least one positive; returns (map, per-class AP, excluded)."""
    aps, excluded = [], []
    for k in range(labels.shape[1]):
        if labels[:, k].any():
            aps.append(average_precision(scores[:, k], labels[:, k]))
        else:
            excluded.append(k)
            aps.append(float("nan"))
    valid = [a for a in aps if a == a]
    return (float(np.mean(valid)) if valid else float("nan")), aps, excluded


# -- probe --------------------------------------------------------------------


@dataclass
class LinearProbe:
    weight: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)
    mean: np.ndarray  # feature standardisation
    std: np.ndarray
    history: list[float] = field(default_factory=list)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        z = (features - self.mean) / self.std @ self.weight + self.bias
        return 1.0 / (1.0 + np.exp(-z))


def probe_loss(x: np.ndarray, y: np.ndarray, weight: Tensor, bias: Tensor, weight_decay: float = 0.0) -> Tensor:
    """Mean binary cross-entropy of sigmoid(x @ W + b) plus an L2 penalty."""
    logits = ad.matmul(x, weight) + bias
    bce = (ad.softplus(logits) - logits * y).mean()
    if weight_decay:
        bce = bce + (weight * weight).sum() * (0.5 * weight_decay)
    return bce


def train_linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int = 500,
    lr: float = 0.5,
    weight_decay: float = 1e-4,
    seed: int = 0,
) -> LinearProbe:
    """Full-batch gradient descent on standardised features.

    The step size follows a cosine decay from ``lr`` towards zero.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mean = features.mean(axis=0)
    std = features.std(axis=0) + 1e-8
    x = (features - mean) / std
    D, K = x.shape[1], labels.shape[1]
    for k in np.flatnonzero(labels.sum(axis=0) == 0):
        logger.warning("class %d has no positives in the probe training split", k)
    rng = np.random.default_rng(seed)
    weight = Tensor(0.01 * rng.standard_normal((D, K)), requires_grad=True)
    bias = Tensor(np.zeros(K), requires_grad=True)
    history = []
    for epoch in range(epochs):
        loss = probe_loss(x, labels, weight, bias, weight_decay)
        ad.backward(loss)
        step = lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(epochs, 1)))
        weight.data = weight.data - step * weight.grad
        bias.data = bias.data - step * bias.grad
        history.append(loss.item())
    return LinearProbe(weight.data.copy(), bias.data.copy(), mean, std, history)


def split_indices(n: int, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def evaluate_probe(
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int = 500,
    lr: float = 0.5,
    weight_decay: float = 1e-4,
    threshold: float = 0.5,
    train_fraction: float = 0.8,
    seed: int = 0,
) -> MetricsRecord:
    """Train on a held-out split of the frozen features, report mAP and F1 on the rest."""
    train, test = split_indices(len(features), train_fraction, seed)
    probe = train_linear_probe(features[train], labels[train], epochs, lr, weight_decay, seed)
    scores = probe.predict_proba(features[test])
    y = labels[test]
    train_empty = np.flatnonzero(labels[train].sum(axis=0) == 0)
    m, aps, excluded = mean_average_precision(scores, y)
    excluded = sorted(set(excluded) | set(int(k) for k in train_empty))
    valid = [a for k, a in enumerate(aps) if k not in excluded]
    m = float(np.mean(valid)) if valid else float("nan")
    return MetricsRecord(aps, m, f1_score(scores, y, threshold), threshold, excluded)


# -- similarity histograms ----------------------------------------------------


def _bin_counts(values: np.ndarray, bins: int) -> np.ndarray:
    width = 2.0 / bins
    idx = np.floor((np.clip(values, -1.0, 1.0) + 1.0) / width).astype(np.int64)
    return np.bincount(np.clip(idx, 0, bins - 1).ravel(), minlength=bins)


def similarity_histograms(anchor: np.ndarray, partner: np.ndarray, bins: int = 20, other: np.ndarray | None = None) -> dict:
    """Intra-image and inter-image cosine-similarity histograms over [-1, 1].

    ``anchor`` and ``partner`` are (B, C, L) dense grids of the two views of
    each image. Intra-image pairs are every (anchor cell, partner cell) of the
    same image. Inter-image pairs are anchor cells of image b against every
    cell of both views of every other image (or against ``other`` (G, C, L)
    when given).
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    partner = np.asarray(partner, dtype=np.float64)
    B, C, L = anchor.shape
    intra = cosine_matrix(anchor, partner)  # (B, C, C)
    if other is None:
        views = np.stack([anchor, partner], axis=1).reshape(2 * B * C, L)
        sims = cosine_matrix(anchor.reshape(B * C, L), views).reshape(B, C, B, 2 * C)
        keep = ~np.eye(B, dtype=bool)
        inter = sims.transpose(0, 2, 1, 3)[keep]
    else:
        inter = cosine_matrix(anchor.reshape(B * C, L), np.asarray(other).reshape(-1, L))
    edges = np.linspace(-1.0, 1.0, bins + 1)
    return {
        "bin_edges": edges.tolist(),
        "intra_counts": _bin_counts(intra, bins).tolist(),
        "inter_counts": _bin_counts(inter, bins).tolist(),
    }
