"""Hard Dice evaluation and CSV reporting.

Dice is computed per volume and per class on argmax predictions; a class
absent from both prediction and ground truth counts as a perfect 1.0.
Reports aggregate with mean and standard deviation across volumes.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass

import numpy as np

from .model import SDNetParameters, predict_labels
from .serialize import atomic_write_text

AGG_MEAN = "AGG_MEAN"
AGG_STD = "AGG_STD"


def dice_per_class(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Hard Dice per class: 2|P∩T| / (|P|+|T|); both-empty classes give 1.0."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    pred = pred.ravel()
    truth = truth.ravel()
    if pred.size and max(int(pred.max()), int(truth.max())) >= num_classes:
        raise ValueError("labels exceed num_classes")
    p_counts = np.bincount(pred, minlength=num_classes).astype(np.float64)
    t_counts = np.bincount(truth, minlength=num_classes).astype(np.float64)
    agree = pred == truth
    inter = np.bincount(truth[agree], minlength=num_classes).astype(np.float64)
    denom = p_counts + t_counts
    with np.errstate(invalid="ignore", divide="ignore"):
        dice = 2.0 * inter / denom
    dice[denom == 0] = 1.0
    return dice


@dataclass
class DiceReport:
    volume_ids: "list[str]"
    dice: np.ndarray      # (V, N) per volume, per class
    freq: np.ndarray      # (V, N) ground-truth class frequency per volume
    seconds: np.ndarray   # (V,) segmentation wall time per volume

    @property
    def mean_dice(self) -> np.ndarray:
        return self.dice.mean(axis=0)

    @property
    def std_dice(self) -> np.ndarray:
        return self.dice.std(axis=0)

    def overall_mean(self) -> float:
        """Mean Dice over classes of the across-volume means."""
        return float(self.mean_dice.mean())


def evaluate_model(params: SDNetParameters, volumes, batch_size: int = 4) -> DiceReport:
    """Segment each volume slice-wise and score against its clean labels."""
    num_classes = params.config.num_classes
    ids, dices, freqs, secs = [], [], [], []
    for vol in volumes:
        images = vol.image[:, None]  # (D,1,H,W)
        start = time.perf_counter()
        pred = predict_labels(params, images, batch_size=batch_size)
        secs.append(time.perf_counter() - start)
        truth = vol.labels_manual
        ids.append(vol.volume_id)
        dices.append(dice_per_class(pred, truth, num_classes))
        counts = np.bincount(truth.ravel(), minlength=num_classes)
        freqs.append(counts.astype(np.float64) / truth.size)
    return DiceReport(ids, np.asarray(dices), np.asarray(freqs),
                      np.asarray(secs, dtype=np.float64))


def write_report_csv(report: DiceReport, path) -> None:
    """Write per-volume rows plus AGG_MEAN / AGG_STD aggregate rows."""
    buf = io.StringIO()
    buf.write("volume,class,dice,freq\n")
    num_classes = report.dice.shape[1]
    # 12 significant digits so aggregates recomputed from the emitted rows
    # agree with the emitted AGG rows to well under 1e-9
    for i, vid in enumerate(report.volume_ids):
        for c in range(num_classes):
            buf.write(f"{vid},{c},{report.dice[i, c]:.12g},{report.freq[i, c]:.12g}\n")
    mean_freq = report.freq.mean(axis=0)
    std_freq = report.freq.std(axis=0)
    for c in range(num_classes):
        buf.write(f"{AGG_MEAN},{c},{report.mean_dice[c]:.12g},{mean_freq[c]:.12g}\n")
    for c in range(num_classes):
        buf.write(f"{AGG_STD},{c},{report.std_dice[c]:.12g},{std_freq[c]:.12g}\n")
    atomic_write_text(path, buf.getvalue())
