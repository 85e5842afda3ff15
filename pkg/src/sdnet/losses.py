"""Composite segmentation loss and per-class weighting schemes.

The training objective combines a pixel-weighted logistic (cross-entropy)
term with a soft Dice term averaged over classes:

    loss = -sum_x w(x) * log p[label(x)](x)  -  mean_l dice_l

Pixel weights come from median frequency balancing (optionally with an
extra bump on label boundaries) during pretraining, or from validation
Dice scores during error-corrective fine-tuning, where classes the model
currently segments worst receive the largest weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import ShapeError, Tensor

# Probabilities are clamped here before the log; gradients through
# clamped pixels are zero.
LOG_CLAMP = 1e-12


@dataclass
class LossConfig:
    """Knobs for the composite loss and the weighting schemes."""

    boundary_weight: float = 5.0     # extra weight on label-boundary pixels
    use_dice: bool = True            # include the soft Dice term
    dice_epsilon: float = 1e-6       # smoothing in the Dice ratio
    ecb_margin: float = 0.05         # q in the fine-tuning weight formula

    def __post_init__(self):
        if self.boundary_weight < 0:
            raise ValueError(f"boundary_weight must be >= 0, got {self.boundary_weight}")
        if not 0 < self.ecb_margin < 1:
            raise ValueError(f"ecb_margin must be in (0, 1), got {self.ecb_margin}")
        if self.dice_epsilon <= 0:
            raise ValueError(f"dice_epsilon must be > 0, got {self.dice_epsilon}")


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    return labels


def class_frequencies(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Fraction of pixels per class over the whole label array (float64)."""
    labels = _check_labels(labels, num_classes)
    if labels.size == 0:
        raise ValueError("cannot compute class frequencies of an empty label corpus")
    counts = np.bincount(labels.ravel(), minlength=num_classes)
    return counts.astype(np.float64) / labels.size


def mfb_weights(frequencies: np.ndarray) -> np.ndarray:
    """Median frequency balancing: weight_l = median(f) / f_l."""
    f = np.asarray(frequencies, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("frequencies must be a non-empty 1-D array")
    if np.any(f <= 0):
        missing = np.flatnonzero(f <= 0).tolist()
        raise ValueError(
            f"median frequency balancing undefined for absent classes {missing}")
    return np.median(f) / f


def ecb_weights(dice_scores: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Error-corrective weights from validation Dice scores.

    With m = min(a) - margin, weight_l = (median(a) - m) / (a_l - m): the
    worst class always gets median(a - min + margin) / margin, the median
    class gets 1.
    """
    a = np.asarray(dice_scores, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("dice_scores must be a non-empty 1-D array")
    if not np.all(np.isfinite(a)):
        raise ValueError("dice_scores must be finite")
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    m = a.min() - margin
    return (np.median(a) - m) / (a - m)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """True where a pixel has a 4-neighbor with a different label.

    Operates on the trailing two axes, so both single slices (H,W) and
    batches (B,H,W) work. Neighbors outside the image do not count.
    """
    labels = np.asarray(labels)
    if labels.ndim < 2:
        raise ShapeError(f"boundary_mask needs at least 2-D labels, got {labels.shape}")
    mask = np.zeros(labels.shape, dtype=bool)
    vdiff = labels[..., 1:, :] != labels[..., :-1, :]
    mask[..., 1:, :] |= vdiff
    mask[..., :-1, :] |= vdiff
    hdiff = labels[..., :, 1:] != labels[..., :, :-1]
    mask[..., :, 1:] |= hdiff
    mask[..., :, :-1] |= hdiff
    return mask


def class_weight_map(labels: np.ndarray, class_weights: np.ndarray,
                     boundary_weight: float = 0.0) -> np.ndarray:
    """Per-pixel weights: class weight of the true label plus an optional
    constant bump on label-boundary pixels."""
    class_weights = np.asarray(class_weights, dtype=np.float64)
    labels = _check_labels(labels, class_weights.shape[0])
    wmap = class_weights[labels]
    if boundary_weight:
        wmap = wmap + boundary_weight * boundary_mask(labels)
    return wmap


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(B,H,W) int labels -> (B,N,H,W) one-hot floats."""
    labels = _check_labels(labels, num_classes)
    if labels.ndim != 3:
        raise ShapeError(f"one_hot expects (B,H,W) labels, got {labels.shape}")
    chans = np.arange(num_classes).reshape(1, num_classes, 1, 1)
    return (labels[:, None] == chans).astype(dtype)


def soft_dice_per_class(probs: np.ndarray, labels: np.ndarray,
                        epsilon: float = 1e-6) -> np.ndarray:
    """Soft Dice per class between predicted probabilities and labels.

    dice_l = (2 * sum(p_l * g_l) + eps) / (sum(p_l^2) + sum(g_l^2) + eps),
    summed over every pixel of the batch. Returns float64 (N,).
    """
    p = np.asarray(probs)
    if p.ndim != 4:
        raise ShapeError(f"probs must be (B,N,H,W), got {p.shape}")
    g = one_hot(labels, p.shape[1], dtype=p.dtype)
    inter = np.sum(p * g, axis=(0, 2, 3), dtype=np.float64)
    psq = np.sum(p * p, axis=(0, 2, 3), dtype=np.float64)
    gsq = np.sum(g, axis=(0, 2, 3), dtype=np.float64)  # g is 0/1 so g^2 == g
    return (2.0 * inter + epsilon) / (psq + gsq + epsilon)


def composite_loss(probs: Tensor, labels: np.ndarray,
                   weight_map: np.ndarray | None = None, *,
                   config: LossConfig | None = None,
                   reduction: str = "sum") -> Tensor:
    """Weighted logistic loss minus mean soft Dice, as a scalar tensor.

    ``reduction`` applies to the logistic term only: "sum" keeps the plain
    sum over pixels, "pixel_mean" divides it by the pixel count so the
    gradient scale is independent of batch and image size (the Dice term
    is already a mean over classes and stays untouched).

    ``probs`` must be normalized: any pixel whose channel sum strays from
    1 by more than 1e-4 is rejected (catches models whose output skipped
    the softmax).
    """
    if reduction not in ("sum", "pixel_mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if config is None:
        config = LossConfig()
    use_dice, dice_epsilon = config.use_dice, config.dice_epsilon
    p = probs.data
    if p.ndim != 4:
        raise ShapeError(f"probs must be (B,N,H,W), got {p.shape}")
    sums = p.sum(axis=1, dtype=np.float64)
    worst = float(np.abs(sums - 1.0).max()) if sums.size else 0.0
    if worst > 1e-4:
        raise ValueError(
            f"probs are not normalized: pixel channel sums stray from 1 "
            f"by up to {worst:.3g}")
    B, N, H, W = p.shape
    labels = _check_labels(labels, N)
    if labels.shape != (B, H, W):
        raise ShapeError(f"labels shape {labels.shape} does not match probs {p.shape}")
    if weight_map is None:
        weight_map = np.ones((B, H, W), dtype=np.float64)
    else:
        weight_map = np.asarray(weight_map, dtype=np.float64)
        if weight_map.shape != (B, H, W):
            raise ShapeError(
                f"weight_map shape {weight_map.shape} does not match labels {labels.shape}")

    picked = np.take_along_axis(p, labels[:, None], axis=1)[:, 0]
    picked_safe = np.maximum(picked, LOG_CLAMP)
    logistic = -np.sum(weight_map * np.log(picked_safe), dtype=np.float64)
    scale = 1.0 / labels.size if reduction == "pixel_mean" else 1.0
    total = logistic * scale

    if use_dice:
        onehot = one_hot(labels, N, dtype=p.dtype)
        inter = np.sum(p * onehot, axis=(0, 2, 3), dtype=np.float64)
        psq = np.sum(p * p, axis=(0, 2, 3), dtype=np.float64)
        gsq = np.sum(onehot, axis=(0, 2, 3), dtype=np.float64)
        num = 2.0 * inter + dice_epsilon
        den = psq + gsq + dice_epsilon
        total -= np.mean(num / den)

    out = Tensor(np.asarray(total, dtype=p.dtype), parents=(probs,))

    def _backward():
        if not probs.needs_grad():
            return
        gout = float(out.grad)
        grad = np.zeros_like(p, dtype=np.float64)
        # logistic: -w / p at the true-label channel; zero where clamped
        dlog = np.where(picked >= LOG_CLAMP, -weight_map / picked_safe, 0.0) * scale
        np.put_along_axis(grad, labels[:, None], dlog[:, None], axis=1)
        if use_dice:
            # d dice_l / d p_l = (2 g_l * den_l - num_l * 2 p_l) / den_l^2
            den_c = den.reshape(1, N, 1, 1)
            num_c = num.reshape(1, N, 1, 1)
            ddice = (2.0 * onehot * den_c - num_c * 2.0 * p) / (den_c * den_c)
            grad -= ddice / N
        probs.accumulate((gout * grad).astype(p.dtype))

    out._backward = _backward
    return out
