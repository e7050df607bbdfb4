"""Spatial mask decoder: binary subject/object layouts in the union-box frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nc
from .geometry import Box, union_box
from .numeric import LinearLayer, Tensor

DEFAULT_POOL = 7


def _box_mask(box: Box, frame: Box, lp: int) -> np.ndarray:
    # map into [0, lp]^2 relative to the frame, then test cell centres;
    # one division per coordinate so a joint rescale rounds the same way
    x1, x2 = (box.x1 - frame.x1) * lp / frame.width, (box.x2 - frame.x1) * lp / frame.width
    y1, y2 = (box.y1 - frame.y1) * lp / frame.height, (box.y2 - frame.y1) * lp / frame.height
    centres = np.arange(lp) + 0.5
    cols = (centres >= x1) & (centres < x2)
    rows = (centres >= y1) & (centres < y2)
    mask = np.outer(rows, cols).astype(np.uint8)
    if not mask.any():
        # box too thin to cover any centre: mark the cell holding its centre
        cx = min(int(0.5 * (x1 + x2)), lp - 1)
        cy = min(int(0.5 * (y1 + y2)), lp - 1)
        mask[cy, cx] = 1
    return mask


def mask_target(subject: Box, obj: Box, lp: int = DEFAULT_POOL) -> np.ndarray:
    """``(2, lp, lp)`` uint8 grid: channel 0 subject, channel 1 object.

    Rows run along y, columns along x. A cell is on when its centre lies in
    the box mapped into the union frame (low edges inclusive, high edges
    exclusive). A box that covers no centre at all still lights the cell
    containing its own centre, so neither channel is ever empty.
    """
    if lp < 1:
        raise ValueError("pool size must be >= 1")
    frame = union_box(subject, obj)
    return np.stack([_box_mask(subject, frame, lp), _box_mask(obj, frame, lp)])


@dataclass
class SMDHead:
    """Two-layer perceptron from a relationship feature to ``2*lp*lp`` logits."""

    hidden: LinearLayer
    out: LinearLayer
    lp: int

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim: int, hidden_dim: int = 64,
             lp: int = DEFAULT_POOL) -> "SMDHead":
        return cls(LinearLayer.init(rng, feature_dim, hidden_dim),
                   LinearLayer.init(rng, hidden_dim, 2 * lp * lp), lp)

    def params(self, prefix: str = "smd") -> dict[str, Tensor]:
        return {**self.hidden.params(f"{prefix}.hidden"), **self.out.params(f"{prefix}.out")}


def predict_mask(head: SMDHead, feature) -> Tensor:
    """Sigmoid mask probabilities, ``(2, lp, lp)`` for one feature vector or
    ``(B, 2, lp, lp)`` for a batch."""
    feature = nc.as_tensor(feature)
    single = feature.data.ndim == 1
    if single:
        feature = nc.reshape(feature, (1, -1))
    h = nc.relu(head.hidden(feature))
    probs = nc.sigmoid(head.out(h))
    shape = (2, head.lp, head.lp) if single else (feature.shape[0], 2, head.lp, head.lp)
    return nc.reshape(probs, shape)


def mask_loss(predicted, target) -> Tensor:
    """Mean BCE over every mask cell."""
    return nc.bce_loss(predicted, np.asarray(target, dtype=np.float64))
