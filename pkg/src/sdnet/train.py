"""Training loops: pretraining on weak labels, fine-tuning on clean ones.

Optimization is SGD with momentum 0.9, weight decay 1e-4, batch size 10,
and a learning rate that starts at 0.1 and drops by 10x every 20 epochs.
Pretraining weights the logistic term with median frequency balancing
plus a boundary bump, computed from the weak training labels. Fine-tuning
starts from those same standard weights; in error-corrective mode the
per-class weights are recomputed after every epoch from validation Dice,
so whatever the model currently segments worst is emphasized next.

Checkpoints store every learnable tensor plus batch-norm running
statistics (and the model configuration) in the SDCK container; the best
validation snapshot is what training returns.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .autograd import NonFiniteError, SGDState, Tensor, sgd_step
from .data import AugmentationConfig, SegDataset, augment, slice_dataset
from .losses import (LossConfig, class_frequencies, class_weight_map,
                     composite_loss, ecb_weights, mfb_weights)
from .metrics import dice_per_class
from .model import ModelConfig, SDNetParameters, forward, init_parameters, predict_labels
from .seeding import generator
from .serialize import atomic_write_text, read_sdck, write_sdck

META_CONFIG = "meta.config"


class TrainingDivergedError(RuntimeError):
    """Loss or gradients went non-finite; nothing was updated past that point."""


class CheckpointError(ValueError):
    """Checkpoint content does not describe a loadable model."""


class FineTuneMode(enum.Enum):
    NORMAL = "normal"
    ECB = "ecb"


@dataclass
class TrainConfig:
    initial_lr: float = 0.1
    lr_decay_factor: float = 0.1
    lr_step: int = 20           # epochs between decays
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 10
    max_epochs: int = 60
    patience: int = 10          # epochs without val improvement; <=0 disables
    seed: int = 0
    use_dice: bool = True
    boundary_weight: float = 5.0
    dice_epsilon: float = 1e-6
    ecb_margin: float = 0.05
    ecb_keep_boundary: bool = False  # keep the boundary bump in ECB epochs >= 2

    def __post_init__(self):
        if self.initial_lr <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_step < 1 or self.max_epochs < 1:
            raise ValueError("lr_step and max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class EpochLog:
    epoch: int
    phase: str
    loss: float
    mean_dice: float
    lr: float
    accuracy: np.ndarray       # a^t: per-class validation Dice after this epoch
    class_weights: np.ndarray  # per-class logistic weights used during this epoch


def epoch_lr(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: lr * factor^((epoch-1) // step)."""
    if epoch < 1:
        raise ValueError(f"epoch is 1-based, got {epoch}")
    return config.initial_lr * config.lr_decay_factor ** ((epoch - 1) // config.lr_step)


def write_epoch_log_csv(logs: "list[EpochLog]", path) -> None:
    """Fixed-order CSV: epoch,phase,loss,mean_dice,lr,a_0..,w_0.."""
    if not logs:
        raise ValueError("no epoch logs to write")
    n = len(logs[0].accuracy)
    header = (["epoch", "phase", "loss", "mean_dice", "lr"]
              + [f"a_{i}" for i in range(n)] + [f"w_{i}" for i in range(n)])
    lines = [",".join(header)]
    for log in logs:
        row = [str(log.epoch), log.phase, f"{log.loss:.8f}", f"{log.mean_dice:.6f}",
               f"{log.lr:.6g}"]
        row += [f"{a:.6f}" for a in log.accuracy]
        row += [f"{w:.6f}" for w in log.class_weights]
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def validate(params: SDNetParameters, val_volumes,
             tier: str = "manual") -> tuple[np.ndarray, float]:
    """Per-class Dice pooled over every validation pixel, plus its mean.

    Runs eval-mode forward passes (frozen batch statistics) against the
    given annotation tier. Classes absent from both prediction and
    ground truth score 1.
    """
    if not val_volumes:
        raise ValueError("validation set is empty")
    num_classes = params.config.num_classes
    p_counts = np.zeros(num_classes, dtype=np.float64)
    t_counts = np.zeros(num_classes, dtype=np.float64)
    inter = np.zeros(num_classes, dtype=np.float64)
    for vol in val_volumes:
        pred = predict_labels(params, vol.image[:, None])
        truth = vol.labels(tier).astype(np.int64)
        p_counts += np.bincount(pred.ravel(), minlength=num_classes)[:num_classes]
        t_counts += np.bincount(truth.ravel(), minlength=num_classes)[:num_classes]
        agree = pred == truth
        inter += np.bincount(truth[agree].ravel(), minlength=num_classes)[:num_classes]
    denom = p_counts + t_counts
    with np.errstate(invalid="ignore", divide="ignore"):
        accuracy = 2.0 * inter / denom
    accuracy[denom == 0] = 1.0
    return accuracy, float(accuracy.mean())


def _assemble_batch(samples, order, aug_config, seed: int, epoch: int):
    """Stack (possibly augmented) slices into (B,1,H,W) images and (B,H,W) labels."""
    images, labels = [], []
    for ds_idx in order:
        s = samples[int(ds_idx)]
        img, lab = s.image, s.labels
        if aug_config is not None:
            img, lab = augment(img, lab, aug_config, seed, epoch, int(ds_idx))
        images.append(img)
        labels.append(lab)
    x = np.stack(images).astype(np.float32)[:, None]
    y = np.stack(labels).astype(np.int64)
    return x, y


def _train_epochs(params: SDNetParameters, train_samples, val_volumes,
                  config: TrainConfig, phase: str, weights_for_epoch,
                  aug_config: AugmentationConfig | None,
                  log_path=None, checkpoint_path=None, val_tier="manual"):
    """Shared epoch loop. ``weights_for_epoch(epoch, prev_accuracy)`` returns
    (per-class weights, boundary weight) for that epoch. Returns the best
    validation-Dice parameter snapshot and the epoch logs."""
    if not train_samples:
        raise ValueError("training set is empty")
    learnables = params.learnables()
    sgd = SGDState(learnables)
    loss_config = LossConfig(boundary_weight=config.boundary_weight,
                             use_dice=config.use_dice,
                             dice_epsilon=config.dice_epsilon,
                             ecb_margin=config.ecb_margin)
    logs: list[EpochLog] = []
    best_params = None
    best_dice = -np.inf
    stale_epochs = 0
    accuracy = None
    for epoch in range(1, config.max_epochs + 1):
        lr = epoch_lr(config, epoch)
        class_weights, boundary_w = weights_for_epoch(epoch, accuracy)
        params.set_training(True)
        perm = generator(config.seed, "batch", epoch).permutation(len(train_samples))
        losses = []
        for step, start in enumerate(range(0, len(perm), config.batch_size)):
            order = perm[start:start + config.batch_size]
            x, y = _assemble_batch(train_samples, order, aug_config, config.seed, epoch)
            wmap = class_weight_map(y, class_weights, boundary_w)
            probs = forward(params, Tensor(x))
            loss = composite_loss(probs, y, wmap, config=loss_config,
                                  reduction="pixel_mean")
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(
                    f"non-finite loss at {phase} epoch {epoch} step {step} "
                    f"(batch of {len(order)} starting at permutation offset {start})")
            for p in learnables:
                p.grad = None
            loss.backward()
            try:
                sgd_step(learnables, [p.grad for p in learnables], sgd,
                         lr, config.momentum, config.weight_decay)
            except NonFiniteError as err:
                raise TrainingDivergedError(
                    f"non-finite gradient at {phase} epoch {epoch} step {step}: {err}"
                ) from err
            losses.append(float(loss.data))
        params.set_training(False)
        accuracy, mean_dice = validate(params, val_volumes, val_tier)
        logs.append(EpochLog(epoch, phase, float(np.mean(losses)), mean_dice, lr,
                             accuracy.copy(), np.asarray(class_weights, dtype=np.float64)))
        if log_path is not None:
            write_epoch_log_csv(logs, log_path)
        if mean_dice > best_dice:
            best_dice = mean_dice
            best_params = params.copy()
            stale_epochs = 0
            if checkpoint_path is not None:
                save_checkpoint(best_params, checkpoint_path)
        else:
            stale_epochs += 1
            if config.patience > 0 and stale_epochs >= config.patience:
                break
    return best_params, logs


def pretrain(config: TrainConfig, model_config: ModelConfig, dataset: SegDataset,
             aug_config: AugmentationConfig | None = None,
             log_path=None, checkpoint_path=None):
    """Train a fresh network on the weakly labeled tier.

    Logistic weights are median-frequency-balanced over the aux training
    labels with the boundary bump, fixed for the whole run. Returns the
    best-validation parameters and per-epoch logs.
    """
    if dataset.n_classes != model_config.num_classes:
        raise ValueError(
            f"model expects {model_config.num_classes} classes, "
            f"dataset has {dataset.n_classes}")
    train_vols = dataset.split("aux_train")
    val_vols = dataset.split("aux_val")
    samples = slice_dataset(train_vols, tier="aux")
    freqs = class_frequencies(
        np.concatenate([v.labels_aux.ravel() for v in train_vols]),
        dataset.n_classes)
    weights = mfb_weights(freqs)
    params = init_parameters(model_config, config.seed)

    def weights_for_epoch(epoch, prev_accuracy):
        return weights, config.boundary_weight

    return _train_epochs(params, samples, val_vols, config, "pretrain",
                         weights_for_epoch, aug_config, log_path,
                         checkpoint_path, val_tier="aux")


def train_from_scratch(config: TrainConfig, model_config: ModelConfig,
                       dataset: SegDataset,
                       aug_config: AugmentationConfig | None = None,
                       log_path=None, checkpoint_path=None):
    """No-pretraining baseline: random init, manual train/val splits only.

    Same recipe as pretraining (median-frequency weights from the training
    labels, boundary bump) but it never touches the auxiliary tier.
    """
    if dataset.n_classes != model_config.num_classes:
        raise ValueError(
            f"model expects {model_config.num_classes} classes, "
            f"dataset has {dataset.n_classes}")
    train_vols = dataset.split("train")
    val_vols = dataset.split("val")
    samples = slice_dataset(train_vols, tier="manual")
    freqs = class_frequencies(
        np.concatenate([v.labels_manual.ravel() for v in train_vols]),
        dataset.n_classes)
    weights = mfb_weights(freqs)
    params = init_parameters(model_config, config.seed)

    def weights_for_epoch(epoch, prev_accuracy):
        return weights, config.boundary_weight

    return _train_epochs(params, samples, val_vols, config, "scratch",
                         weights_for_epoch, aug_config, log_path, checkpoint_path)


def finetune(config: TrainConfig, pretrained: SDNetParameters, dataset: SegDataset,
             mode: FineTuneMode, aug_config: AugmentationConfig | None = None,
             log_path=None, checkpoint_path=None):
    """Fine-tune a pretrained network on the manually labeled tier.

    Epoch 1 always uses the standard median-frequency weights computed
    from the manual training labels (with boundary bump). NORMAL mode
    keeps them throughout. ECB mode replaces them from epoch 2 on with
    error-corrective weights from the previous epoch's validation Dice;
    the boundary bump is dropped in those epochs unless
    ``config.ecb_keep_boundary`` is set. The Dice term is unaffected.
    The pretrained parameters are copied, not mutated.
    """
    if not isinstance(mode, FineTuneMode):
        raise ValueError(f"mode must be a FineTuneMode, got {mode!r}")
    if pretrained.config.num_classes != dataset.n_classes:
        raise CheckpointError(
            f"checkpoint has {pretrained.config.num_classes} classes, "
            f"dataset has {dataset.n_classes}")
    train_vols = dataset.split("train")
    val_vols = dataset.split("val")
    samples = slice_dataset(train_vols, tier="manual")
    freqs = class_frequencies(
        np.concatenate([v.labels_manual.ravel() for v in train_vols]),
        dataset.n_classes)
    standard = mfb_weights(freqs)
    params = pretrained.copy()

    def weights_for_epoch(epoch, prev_accuracy):
        if mode is FineTuneMode.NORMAL or epoch == 1:
            return standard, config.boundary_weight
        bw = config.boundary_weight if config.ecb_keep_boundary else 0.0
        return ecb_weights(prev_accuracy, margin=config.ecb_margin), bw

    return _train_epochs(params, samples, val_vols, config,
                         f"finetune_{mode.value}", weights_for_epoch,
                         aug_config, log_path, checkpoint_path)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: SDNetParameters, path) -> None:
    """Write model config, learnables, and batch-norm stats as one SDCK file."""
    cfg = params.config
    meta = np.array([cfg.num_classes, cfg.channels, cfg.kernel_size,
                     cfg.depth, cfg.input_channels], dtype=np.float32)
    entries = [(META_CONFIG, meta)]
    entries += [(name, t.data) for name, t in params.named_learnables()]
    entries += [(name, arr.astype(np.float32)) for name, arr in params.state_arrays()]
    write_sdck(path, entries)


def load_checkpoint(path) -> SDNetParameters:
    """Rebuild a model from ``save_checkpoint`` output, bit-exactly.

    Raises CheckpointError for missing/unknown tensor names or shape
    mismatches; container-level corruption surfaces as FormatError from
    the SDCK reader.
    """
    entries = read_sdck(path)
    if META_CONFIG not in entries:
        raise CheckpointError(f"not a model checkpoint: missing {META_CONFIG!r} entry")
    meta = entries.pop(META_CONFIG)
    if meta.shape != (5,):
        raise CheckpointError(f"malformed {META_CONFIG!r} entry of shape {meta.shape}")
    config = ModelConfig(num_classes=int(meta[0]), channels=int(meta[1]),
                         kernel_size=int(meta[2]), depth=int(meta[3]),
                         input_channels=int(meta[4]))
    params = model_mod.init_parameters(config, seed=0)
    for name, tensor in params.named_learnables():
        if name not in entries:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = entries.pop(name)
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = arr
    for prefix, blk in params._named_blocks():
        for stat in ("running_mean", "running_var"):
            name = f"{prefix}.bn.{stat}"
            if name not in entries:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            arr = entries.pop(name)
            if arr.shape != getattr(blk.bn, stat).shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {arr.shape}, "
                    f"expected {getattr(blk.bn, stat).shape}")
            setattr(blk.bn, stat, arr)
    if entries:
        raise CheckpointError(
            f"checkpoint contains unknown tensor {next(iter(entries))!r}")
    return params
