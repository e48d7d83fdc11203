"""Cross-entropy and Lovasz-softmax losses plus the per-task composites.

All losses take probability maps (post-softmax) of shape (H, W, K) and integer
label maps (H, W). Pixels equal to ``ignore`` are dropped before reduction.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-12


def _flatten_valid(p: Tensor, y: np.ndarray, ignore: int):
    k = p.shape[-1]
    if p.shape[:-1] != y.shape:
        raise ad.ShapeMismatch(f"loss: probability map {p.shape} vs labels {y.shape}")
    p2 = ad.reshape(p, (y.size, k))
    yflat = y.reshape(-1)
    valid = np.flatnonzero(yflat != ignore)
    return p2, yflat, valid


def cross_entropy(p: Tensor, y: np.ndarray, ignore: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log p(y), log input clamped at 1e-12."""
    p2, yflat, valid = _flatten_valid(p, y, ignore)
    if valid.size == 0:
        raise ValueError("cross_entropy: every pixel is ignored, mean undefined")
    labels = yflat[valid]
    if labels.min() < 0 or labels.max() >= p.shape[-1]:
        raise ValueError(
            f"cross_entropy: label outside [0, {p.shape[-1]}): {labels.min()}..{labels.max()}"
        )
    picked = ad.select_class(ad.gather_rows(p2, valid), labels)
    return ad.scale(ad.reduce_mean(ad.log(picked, floor=LOG_FLOOR)), -1.0)


def _lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss at a sorted margin."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(p: Tensor, y: np.ndarray, ignore: int = 255) -> Tensor:
    """Average over classes present in the ground truth of the sorted-error
    Lovasz extension; exact Jaccard loss at hard predictions.

    Per class c: errors are 1 - p(c) on pixels of class c and p(c) elsewhere,
    which is the affine form fg + (1 - 2 fg) * p(c). The descending sort order
    is frozen at record time, so gradients live on that linear piece.
    """
    p2, yflat, valid = _flatten_valid(p, y, ignore)
    labels = yflat[valid]
    present = np.unique(labels)
    if present.size == 0:
        raise ValueError("lovasz_softmax: no classes present in the ground truth")
    pv = ad.gather_rows(p2, valid)
    terms = []
    for c in present:
        fg = (labels == c).astype(np.float64)
        pc = ad.select_class(pv, np.full(labels.shape, c, dtype=np.int64))
        errors = Tensor(fg) + ad.mul(Tensor(1.0 - 2.0 * fg), pc)
        order = np.argsort(-errors.data, kind="stable")
        weights = _lovasz_grad(fg[order])
        terms.append(ad.reduce_sum(ad.mul(ad.gather_rows(errors, order), Tensor(weights))))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.scale(total, 1.0 / len(terms))


def bcd_loss(p_bcd: Tensor, y_bcd: np.ndarray, ignore: int = 255) -> Tensor:
    return cross_entropy(p_bcd, y_bcd, ignore) + lovasz_softmax(p_bcd, y_bcd, ignore)


def scd_loss(
    p_t1: Tensor,
    p_t2: Tensor,
    p_bcd: Tensor,
    y_t1: np.ndarray,
    y_t2: np.ndarray,
    y_bcd: np.ndarray,
    ignore: int = 255,
) -> Tensor:
    """Change terms plus the four semantic terms weighted one half."""
    semantic = (
        cross_entropy(p_t1, y_t1, ignore)
        + cross_entropy(p_t2, y_t2, ignore)
        + lovasz_softmax(p_t1, y_t1, ignore)
        + lovasz_softmax(p_t2, y_t2, ignore)
    )
    return bcd_loss(p_bcd, y_bcd, ignore) + ad.scale(semantic, 0.5)


def bda_loss(
    p_loc: Tensor,
    p_clf: Tensor,
    y_loc: np.ndarray,
    y_clf: np.ndarray,
    ignore: int = 255,
) -> Tensor:
    """Localization and damage-classification terms, each cross-entropy plus Lovasz."""
    return (
        cross_entropy(p_loc, y_loc, ignore)
        + lovasz_softmax(p_loc, y_loc, ignore)
        + cross_entropy(p_clf, y_clf, ignore)
        + lovasz_softmax(p_clf, y_clf, ignore)
    )
