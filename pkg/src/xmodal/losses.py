"""Cross-modal and diversity losses over feature tuple batches.

A tuple pairs two distinct clips (i, j).  ``f_i``/``f_j`` are rgb-stream
features, ``g_i``/``g_j`` the paired sod-stream features, one row per tuple.
``loss_cross`` pulls same-clip features of different modalities together,
``loss_div`` pushes different-clip features of the same modality apart, and
minimizing their weighted sum trades the two off.  All distances are the
bounded epsilon-softened cosine distance unless ``distance="euclidean"`` is
requested, so 0 <= loss_cross <= 2 and -2 <= loss_div <= 0 always hold.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor,
    add,
    cosine_distance_rows,
    euclidean_distance_rows,
    scale,
    tmean,
)

# fixed epsilon for diagnostics (metrics, retrieval); the training epsilon
# is a config value and defaults to 1e-5
MEASUREMENT_EPSILON = 1e-10

_DISTANCES = {
    "cosine": cosine_distance_rows,
    "euclidean": euclidean_distance_rows,
}


@dataclass
class TupleBatch:
    """Features of B clip tuples, each member seen by both streams."""

    f_i: Tensor
    f_j: Tensor
    g_i: Tensor
    g_j: Tensor

    def __post_init__(self):
        shapes = {t.data.shape for t in (self.f_i, self.f_j, self.g_i, self.g_j)}
        if len(shapes) != 1 or self.f_i.ndim != 2:
            raise DimensionError(
                f"tuple batch needs four equal (B, D) blocks, got "
                f"{[t.data.shape for t in (self.f_i, self.f_j, self.g_i, self.g_j)]}"
            )

    @property
    def size(self) -> int:
        return self.f_i.data.shape[0]


def _distance_fn(distance: str):
    try:
        return _DISTANCES[distance]
    except KeyError:
        raise ConfigError(
            f"unknown distance {distance!r}, expected one of {sorted(_DISTANCES)}"
        ) from None


def loss_cross(batch: TupleBatch, epsilon: float = 1e-5,
               distance: str = "cosine") -> Tensor:
    """Mean over tuples of 0.5 * [d(f_i, g_i) + d(f_j, g_j)]."""
    d = _distance_fn(distance)
    per_i = tmean(d(batch.f_i, batch.g_i, epsilon))
    per_j = tmean(d(batch.f_j, batch.g_j, epsilon))
    return scale(add(per_i, per_j), 0.5)


def loss_div(batch: TupleBatch, epsilon: float = 1e-5,
             distance: str = "cosine") -> Tensor:
    """Mean over tuples of -0.5 * [d(f_i, f_j) + d(g_i, g_j)].

    Negative so that minimizing it maximizes same-modality spread.
    """
    d = _distance_fn(distance)
    per_f = tmean(d(batch.f_i, batch.f_j, epsilon))
    per_g = tmean(d(batch.g_i, batch.g_j, epsilon))
    return scale(add(per_f, per_g), -0.5)


def loss_combined(
    batch: TupleBatch,
    weights: tuple = (1.0, 1.0),
    epsilon: float = 1e-5,
    distance: str = "cosine",
) -> Tensor:
    """w_cross * loss_cross + w_div * loss_div.

    A zero weight skips that term entirely, so its gradient contribution is
    exactly zero, not merely small.
    """
    w_cross, w_div = float(weights[0]), float(weights[1])
    if w_cross < 0 or w_div < 0 or (w_cross == 0 and w_div == 0):
        raise ConfigError(f"loss weights must be >= 0 and not both zero, got {weights}")
    if w_div == 0:
        return scale(loss_cross(batch, epsilon, distance), w_cross)
    if w_cross == 0:
        return scale(loss_div(batch, epsilon, distance), w_div)
    return add(
        scale(loss_cross(batch, epsilon, distance), w_cross),
        scale(loss_div(batch, epsilon, distance), w_div),
    )


def loss_concat(logits: Tensor, labels) -> Tensor:
    """Cross-entropy for the pair-alignment baseline head (2 classes)."""
    from .tensor import softmax_cross_entropy

    if logits.ndim != 2 or logits.data.shape[1] != 2:
        raise DimensionError(f"alignment logits must be (N, 2), got {logits.data.shape}")
    return softmax_cross_entropy(logits, labels)
