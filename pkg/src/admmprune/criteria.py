"""Filter-importance criteria and prune-set selection.

Five rankings are provided: kernel-weight l1 norm ("min_weight", also the
ranking applied after sparsity training), mean l1 of the post-activation maps
("mean_activation"), the first-order saliency |activation x gradient|
("taylor"), and a seeded random permutation ("random"). Every criterion
returns one non-negative score per filter; low scores get pruned.

``batches`` arguments must be reusable sequences of (x, y) pairs, not
one-shot generators: data-driven criteria make one pass per scored layer.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .admm import filter_norms
from .errors import NumericError, PruneSpecError
from .network import Network

CRITERIA = ("min_weight", "mean_activation", "taylor", "random", "admm_l1")

TAYLOR_NORM_GUARD = 1e-12


@dataclass(frozen=True)
class PruneDecision:
    """Scores and the selected prune set for one conv layer."""

    layer_id: str
    criterion: str
    scores: np.ndarray
    prune_indices: np.ndarray

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        idx = np.asarray(self.prune_indices)
        if len(np.unique(idx)) != len(idx):
            raise PruneSpecError(f"{self.layer_id}: duplicate prune indices")
        if len(idx) and (idx.min() < 0 or idx.max() >= len(self.scores)):
            raise PruneSpecError(f"{self.layer_id}: prune index out of range")

    def to_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "criterion": self.criterion,
            "scores": [float(s) for s in self.scores],
            "prune_indices": [int(i) for i in self.prune_indices],
        }


def score_min_weight(model: Network, layer_id: str) -> np.ndarray:
    """l1 norm of each filter's kernel weights (bias excluded)."""
    return filter_norms(model.conv_layer(layer_id).w, "l1")


def score_mean_activation(model: Network, layer_id: str, batches) -> np.ndarray:
    """Mean over samples of the spatial l1 norm of the post-ReLU maps."""
    model.conv_layer(layer_id)  # raises UnknownLayerError early
    total = None
    count = 0
    for x, _y in batches:
        act, _ = model.conv_stats(x)[layer_id]
        per_sample = np.abs(act).sum(axis=(2, 3), dtype=np.float64)
        total = per_sample.sum(axis=0) if total is None else total + per_sample.sum(axis=0)
        count += len(x)
    if count == 0:
        raise ValueError("score_mean_activation: empty batches")
    return total / count


def score_taylor(model: Network, layer_id: str, batches) -> np.ndarray:
    """First-order saliency: mean_i |sum_spatial a_i * dLoss_i/da_i|.

    The per-sample loss gradient is recovered from the mean-reduced backward
    pass by undoing the 1/batch factor. Raw scores are rescaled by the
    layer's l2 norm so they are comparable across layers.
    """
    model.conv_layer(layer_id)
    total = None
    count = 0
    for x, y in batches:
        act, grad = model.conv_stats(x, y)[layer_id]
        if not np.isfinite(grad).all():
            raise NumericError(f"{layer_id}: non-finite activation gradient",
                               layer_id=layer_id)
        inner = (act.astype(np.float64) * grad).sum(axis=(2, 3)) * len(x)
        per_sample = np.abs(inner)
        total = per_sample.sum(axis=0) if total is None else total + per_sample.sum(axis=0)
        count += len(x)
    if count == 0:
        raise ValueError("score_taylor: empty batches")
    raw = total / count
    return raw / (np.linalg.norm(raw) + TAYLOR_NORM_GUARD)


def score_random(layer_id: str, n_filters: int, seed: int) -> np.ndarray:
    """Seed-determined permutation of ranks 0..n-1 (layer-id salted)."""
    if n_filters < 1:
        raise ValueError("n_filters must be >= 1")
    salt = zlib.crc32(layer_id.encode())
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 29, salt]))
    return rng.permutation(n_filters).astype(np.float64)


def select_prune_set(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` smallest scores, sorted ascending.

    Ties prune the smaller index first. At least one filter must survive.
    """
    scores = np.asarray(scores)
    if count < 0:
        raise PruneSpecError(f"negative prune count {count}")
    if count >= len(scores):
        raise PruneSpecError(
            f"cannot prune {count} of {len(scores)} filters; at least one must survive")
    order = np.argsort(scores, kind="stable")
    return np.sort(order[:count]).astype(np.int64)


def score_filters(model: Network, layer_id: str, criterion: str,
                  batches=None, seed: int | None = None) -> np.ndarray:
    """Dispatch to the named criterion. admm_l1 ranks by kernel l1 norm."""
    if criterion in ("min_weight", "admm_l1"):
        return score_min_weight(model, layer_id)
    if criterion == "mean_activation":
        if batches is None:
            raise ValueError("mean_activation needs batches")
        return score_mean_activation(model, layer_id, batches)
    if criterion == "taylor":
        if batches is None:
            raise ValueError("taylor needs batches")
        return score_taylor(model, layer_id, batches)
    if criterion == "random":
        if seed is None:
            raise ValueError("random needs a seed")
        return score_random(layer_id, model.conv_layer(layer_id).w.shape[0], seed)
    raise ValueError(f"unknown criterion {criterion!r}")


def make_decision(model: Network, layer_id: str, criterion: str, count: int,
                  batches=None, seed: int | None = None) -> PruneDecision:
    scores = score_filters(model, layer_id, criterion, batches=batches, seed=seed)
    return PruneDecision(layer_id=layer_id, criterion=criterion, scores=scores,
                         prune_indices=select_prune_set(scores, count))
