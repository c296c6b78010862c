"""Contrastive and reconstruction losses.

Every contrastive loss is reduced to rows of positive and negative logits
and evaluated by :func:`contrastive_from_logits`. Features are expected to be
L2-normalised so dot products are cosine similarities; the temperature is
applied to every logit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import ConfigError
from .pairing import NoNegativesError


@dataclass
class LossParams:
    tau: float = 0.2
    lam: float = 0.9
    gamma: float = 0.0
    global_negatives: str = "all_views"  # or "partner_views" (B-1 per anchor)
    symmetric: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.global_negatives not in ("all_views", "partner_views"):
            raise ConfigError(f"unknown global_negatives {self.global_negatives!r}")


@dataclass
class LossBreakdown:
    global_loss: float
    dense_loss: float
    recon_loss: float
    total: float
    lam: float
    gamma: float

    def as_dict(self) -> dict:
        return asdict(self)


def contrastive_from_logits(pos: Tensor, neg: Tensor, pos_mask: np.ndarray | None = None) -> Tensor:
    """Mean over rows of the multi-positive InfoNCE loss.

    ``pos`` is (n, P) and ``neg`` is (n, Q). Each row contributes
    ``mean_p(-pos_p) + logsumexp(pos ∪ neg)``; with P == 1 this is the plain
    InfoNCE cross-entropy. ``pos_mask`` (n, P) drops repeated positives from
    the denominator.
    """
    if neg.shape[-1] == 0:
        raise NoNegativesError("empty negative set")
    logits = ad.concat([pos, neg], axis=1)
    if pos_mask is not None:
        offset = np.zeros(logits.shape)
        offset[:, : pos.shape[1]] = np.where(pos_mask, 0.0, -np.inf)
        logits = logits + offset
    per_row = ad.log_sum_exp(logits, axis=-1) - pos.mean(axis=1)
    return per_row.mean()


def _off_diagonal(B: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(B), B - 1).reshape(B, B - 1)
    cols = np.array([[j for j in range(B) if j != i] for i in range(B)], dtype=np.intp).reshape(B, B - 1)
    return rows, cols


def info_nce_global(
    anchors: Tensor, positives: Tensor, tau: float, negatives: str = "all_views"
) -> Tensor:
    """Global InfoNCE with in-batch negatives.

    Row i of ``anchors`` and ``positives`` are two views of image i. The
    negatives of anchor i are both views of every other image
    (``"all_views"``, 2B-2 terms) or only the partner views
    (``"partner_views"``, B-1 terms).
    """
    B = anchors.shape[0]
    if B < 2:
        raise NoNegativesError("no negatives: global InfoNCE needs at least 2 images")
    ap = ad.matmul(anchors, positives.transpose()) * (1.0 / tau)
    idx = np.arange(B)
    pos = ap[idx, idx].reshape(B, 1)
    rows, cols = _off_diagonal(B)
    negs = [ap[rows, cols]]
    if negatives == "all_views":
        aa = ad.matmul(anchors, anchors.transpose()) * (1.0 / tau)
        negs.append(aa[rows, cols])
    return contrastive_from_logits(pos, ad.concat(negs, axis=1))


def _gather_cells(grid: Tensor, index: np.ndarray) -> Tensor:
    """grid (B, C, L); index (B, ...) of cell ids -> (B, ..., L)."""
    B, C, L = grid.shape
    index = np.asarray(index, dtype=np.intp)
    offset = (np.arange(B) * C).reshape((B,) + (1,) * (index.ndim - 1))
    return ad.take(grid.reshape(B * C, L), index + offset, axis=0)


def _gather_bank(bank: Tensor, selections: np.ndarray) -> Tensor:
    """bank (V, C, L); selections (..., 2) of (view, cell) -> (..., L)."""
    V, C, L = bank.shape
    selections = np.asarray(selections, dtype=np.intp)
    return ad.take(bank.reshape(V * C, L), selections[..., 0] * C + selections[..., 1], axis=0)


def _row_dot(a: Tensor, b: Tensor) -> Tensor:
    """a (B, C, L) against b (B, C, K, L) -> (B, C, K)."""
    B, C, L = a.shape
    return (a.reshape(B, C, 1, L) * b).sum(axis=-1)


def _duplicate_mask(index: np.ndarray) -> np.ndarray:
    """True for the first occurrence of each id along the last axis."""
    index = np.asarray(index)
    keep = np.ones(index.shape, dtype=bool)
    for j in range(1, index.shape[-1]):
        keep[..., j] = ~np.any(index[..., :j] == index[..., j : j + 1], axis=-1)
    return keep


def _dense_loss(anchor: Tensor, pos_logits: Tensor, neg_parts: list[Tensor], tau: float, pos_mask=None) -> Tensor:
    B, C, _ = anchor.shape
    neg = ad.concat(neg_parts, axis=-1) if len(neg_parts) > 1 else neg_parts[0]
    Q = neg.shape[-1]
    if Q == 0:
        raise NoNegativesError("empty negative set for dense loss")
    P = pos_logits.shape[-1]
    mask = None if pos_mask is None else pos_mask.reshape(B * C, P)
    return contrastive_from_logits(
        pos_logits.reshape(B * C, P) * (1.0 / tau), neg.reshape(B * C, Q) * (1.0 / tau), mask
    )


def densecl_dense_loss(
    anchor: Tensor, partner: Tensor, global_negatives: Tensor, positive_index: np.ndarray, tau: float
) -> Tensor:
    """Dense loss with dense positives and global negatives.

    anchor, partner: (B, C, L) normalised cell features; global_negatives:
    (B, Q, L) other-image global features per sample; positive_index: (B, C).
    """
    if global_negatives.shape[1] == 0:
        raise NoNegativesError("empty global negative set")
    pos_feat = _gather_cells(partner, positive_index)
    pos_logits = (anchor * pos_feat).sum(axis=-1).reshape(anchor.shape[0], anchor.shape[1], 1)
    neg = ad.matmul(anchor, global_negatives.transpose(0, 2, 1))
    return _dense_loss(anchor, pos_logits, [neg], tau)


def _dense_negative_logits(anchor, partner, bank, selections, cross_view) -> list[Tensor]:
    parts = []
    selections = np.asarray(selections)
    if selections.size:
        negs = _gather_bank(bank, selections)  # (B, Q, L)
        parts.append(ad.matmul(anchor, negs.transpose(0, 2, 1)))
    if cross_view is not None and np.asarray(cross_view).size:
        parts.append(_row_dot(anchor, _gather_cells(partner, cross_view)))
    if not parts:
        raise NoNegativesError("empty negative set for dense loss")
    return parts


def denseclpp_dense_loss(
    anchor: Tensor,
    partner: Tensor,
    bank: Tensor,
    selections: np.ndarray,
    positive_index: np.ndarray,
    tau: float,
    cross_view: np.ndarray | None = None,
) -> Tensor:
    """Dense loss with dense negatives drawn from other-image views.

    ``bank`` (V, C, L) holds the dense features of every view and
    ``selections`` (B, Q, 2) lists the (view, cell) negatives per sample.
    ``cross_view`` (B, C, N) adds partner-view cells as per-cell negatives.
    """
    positive_index = np.asarray(positive_index)
    if positive_index.ndim == 3:
        positive_index = positive_index[..., 0]
    pos_feat = _gather_cells(partner, positive_index)
    pos_logits = (anchor * pos_feat).sum(axis=-1).reshape(anchor.shape[0], anchor.shape[1], 1)
    parts = _dense_negative_logits(anchor, partner, bank, selections, cross_view)
    return _dense_loss(anchor, pos_logits, parts, tau)


def multi_positive_dense_loss(
    anchor: Tensor,
    partner: Tensor,
    topk_positives: np.ndarray,
    bank: Tensor,
    selections: np.ndarray,
    tau: float,
    cross_view: np.ndarray | None = None,
) -> Tensor:
    """Dense loss with several positives per anchor cell.

    Supervised-contrastive "out" form: the per-positive losses are averaged,
    each against the shared denominator of distinct positives plus negatives.
    """
    topk_positives = np.asarray(topk_positives)
    if topk_positives.ndim == 2:
        topk_positives = topk_positives[..., None]
    if topk_positives.shape[-1] < 1:
        raise ValueError("multi-positive loss needs k_pos >= 1")
    pos_logits = _row_dot(anchor, _gather_cells(partner, topk_positives))
    parts = _dense_negative_logits(anchor, partner, bank, selections, cross_view)
    return _dense_loss(anchor, pos_logits, parts, tau, pos_mask=_duplicate_mask(topk_positives))


def reconstruction_loss(x, x_hat) -> Tensor:
    """Mean absolute error over all elements."""
    x, x_hat = ad.as_tensor(x), ad.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"reconstruction shape mismatch: {x.shape} vs {x_hat.shape}")
    return (x - x_hat).abs().mean()


def mix(global_loss, dense_loss, recon_loss, lam: float, gamma: float):
    """(1 - lam) * global + lam * dense + gamma * recon, for floats or Tensors."""
    total = global_loss * (1.0 - lam) + dense_loss * lam
    if recon_loss is not None:
        total = total + recon_loss * gamma
    return total


def combine(global_loss: float, dense_loss: float, recon_loss: float, params: LossParams) -> LossBreakdown:
    g, d, r = float(global_loss), float(dense_loss), float(recon_loss)
    return LossBreakdown(g, d, r, float(mix(g, d, r, params.lam, params.gamma)), params.lam, params.gamma)
