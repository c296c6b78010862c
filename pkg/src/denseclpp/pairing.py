"""Positive and negative pair formation for dense contrastive losses.

All functions work on plain numpy arrays of dense features. A single view is
an ``(S*S, L)`` array; a batch of views is ``(V, S*S, L)`` where views ``2i``
and ``2i + 1`` are the two augmentations of image ``i``. Ties are always
broken towards the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import ConfigError


class NoNegativesError(ValueError):
    pass


@dataclass
class PairingParams:
    M: int = 1
    beta: float = -1.0
    N: int = 0
    k_pos: int = 1
    pair_feature: str = "backbone"  # or "proj_head"
    rng_seed: int = 0
    full_sum: bool = False  # use every cell of every other-image view as a negative

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if not -1.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [-1, 1], got {self.beta}")
        if self.N < 0 or self.k_pos < 1:
            raise ConfigError("need N >= 0 and k_pos >= 1")
        if self.pair_feature not in ("backbone", "proj_head"):
            raise ConfigError(f"unknown pair_feature {self.pair_feature!r}")

    def check_grid(self, cells: int) -> None:
        if self.N > cells - self.k_pos:
            raise ConfigError(f"N={self.N} exceeds the {cells - self.k_pos} non-positive cells of a view")
        if self.k_pos > cells:
            raise ConfigError(f"k_pos={self.k_pos} exceeds the {cells} cells of a view")


@dataclass
class PairAssignment:
    positive_index: np.ndarray  # (B, S*S) or (B, S*S, k)
    other_view_negatives: np.ndarray  # (B, Q, 2) rows of (view, cell)
    cross_view_negatives: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0), dtype=np.intp))

    def to_json(self) -> dict:
        return {
            "positive_index": self.positive_index.tolist(),
            "other_view_negatives": self.other_view_negatives.tolist(),
            "cross_view_negatives": self.cross_view_negatives.tolist(),
        }


def normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarities (..., P, Q) between rows; zero rows give 0."""
    return normalize_rows(a) @ np.swapaxes(normalize_rows(b), -1, -2)


def match_positives(anchor: np.ndarray, partner: np.ndarray) -> np.ndarray:
    """Index of the most similar partner cell for every anchor cell."""
    return np.argmax(cosine_matrix(anchor, partner), axis=-1)


def select_topk_positives(anchor: np.ndarray, partner: np.ndarray, k_pos: int) -> np.ndarray:
    """The ``k_pos`` most similar partner cells per anchor cell, most similar first."""
    sims = cosine_matrix(anchor, partner)
    if not 1 <= k_pos <= sims.shape[-1]:
        raise ConfigError(f"k_pos={k_pos} outside [1, {sims.shape[-1]}]")
    order = np.argsort(-sims, axis=-1, kind="stable")
    return order[..., :k_pos]


def select_cross_view_negatives(
    anchor: np.ndarray, partner: np.ndarray, positive_index: np.ndarray, N: int
) -> np.ndarray:
    """The ``N`` least similar partner cells per anchor cell, excluding its positive(s).

    Sorted by ascending similarity; output shape ``(..., S*S, N)``.
    ``positive_index`` may carry a trailing top-k axis.
    """
    sims = cosine_matrix(anchor, partner)
    cells = sims.shape[-1]
    pos = np.asarray(positive_index)
    if pos.ndim == sims.ndim - 1:
        pos = pos[..., None]
    if N > cells - pos.shape[-1]:
        raise ConfigError(f"N={N} exceeds the {cells - pos.shape[-1]} non-positive partner cells")
    np.put_along_axis(sims, pos, np.inf, axis=-1)
    order = np.argsort(sims, axis=-1, kind="stable")
    return order[..., :N]


def negative_views(num_views: int, anchor_view: int, views_per_image: int = 2) -> np.ndarray:
    image = anchor_view // views_per_image
    views = np.arange(num_views)
    return views[views // views_per_image != image]


def sample_random_dense_negatives(
    num_views: int, cells: int, anchor_view: int, rng: np.random.Generator, views_per_image: int = 2
) -> np.ndarray:
    """One uniformly drawn cell from every view of every other image.

    Returns an int array of ``(view, cell)`` rows ordered by view.
    """
    views = negative_views(num_views, anchor_view, views_per_image)
    if views.size == 0:
        raise NoNegativesError("no negative views available")
    picks = rng.integers(0, cells, size=views.size)
    return np.stack([views, picks], axis=1)


def threshold_similarity(q, beta: float):
    """Similarities at or below ``beta`` become -1; others pass through."""
    out = np.where(np.asarray(q) <= beta, -1.0, q)
    return float(out) if out.ndim == 0 else out


def score_candidate_set(set_features: np.ndarray, anchor: np.ndarray, beta: float) -> float:
    """Mean thresholded cosine similarity over all (member, anchor cell) pairs."""
    set_features = np.atleast_2d(set_features)
    if set_features.shape[0] == 0:
        raise ValueError("empty candidate set")
    return float(threshold_similarity(cosine_matrix(set_features, anchor), beta).mean())


def select_guided_negative_set(
    bank: np.ndarray,
    anchor_view: int,
    M: int,
    beta: float,
    rng: np.random.Generator,
    views_per_image: int = 2,
) -> np.ndarray:
    """Draw ``M`` random candidate sets and keep the one scoring highest.

    ``bank`` holds the similarity features of every view, ``(V, S*S, L)``.
    Earliest-drawn set wins ties; ``M == 1`` reproduces random sampling.
    """
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    V, cells, _ = bank.shape
    draws = [sample_random_dense_negatives(V, cells, anchor_view, rng, views_per_image) for _ in range(M)]
    if M == 1:
        return draws[0]
    # each member contributes its mean thresholded similarity to the anchor cells;
    # every set has the same size, so the set score is the mean of member scores
    sims = cosine_matrix(bank.reshape(V * cells, -1), bank[anchor_view])
    member_score = threshold_similarity(sims, beta).mean(axis=1)
    flat = np.stack([d[:, 0] * cells + d[:, 1] for d in draws])
    scores = member_score[flat].mean(axis=1)
    return draws[int(np.argmax(scores))]


def all_dense_negatives(num_views: int, cells: int, anchor_view: int, views_per_image: int = 2) -> np.ndarray:
    """Every cell of every other-image view (full-sum negative mode)."""
    views = negative_views(num_views, anchor_view, views_per_image)
    if views.size == 0:
        raise NoNegativesError("no negative views available")
    vv, cc = np.meshgrid(views, np.arange(cells), indexing="ij")
    return np.stack([vv.ravel(), cc.ravel()], axis=1)


def assign_pairs(
    bank: np.ndarray,
    params: PairingParams,
    rng: np.random.Generator,
    guided: bool = False,
    anchor_views: np.ndarray | None = None,
) -> PairAssignment:
    """Form positives and negatives for every anchor view of a batch.

    ``bank`` is ``(V, S*S, L)`` with views ``2i`` (anchor) and ``2i+1``
    (partner) by default.
    """
    V, cells, _ = bank.shape
    params.check_grid(cells)
    if anchor_views is None:
        anchor_views = np.arange(0, V, 2)
    partner_views = anchor_views ^ 1
    anchors, partners = bank[anchor_views], bank[partner_views]
    if params.k_pos > 1:
        pos = select_topk_positives(anchors, partners, params.k_pos)
    else:
        pos = match_positives(anchors, partners)
    negs = []
    for a in anchor_views:
        if params.full_sum:
            negs.append(all_dense_negatives(V, cells, int(a)))
        elif guided:
            negs.append(select_guided_negative_set(bank, int(a), params.M, params.beta, rng))
        else:
            negs.append(sample_random_dense_negatives(V, cells, int(a), rng))
    if params.N > 0:
        cross = select_cross_view_negatives(anchors, partners, pos, params.N)
    else:
        cross = np.zeros((len(anchor_views), cells, 0), dtype=np.intp)
    return PairAssignment(pos, np.stack(negs), cross)
