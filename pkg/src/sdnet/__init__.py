"""Desk-scale encoder-decoder segmentation on synthetic imbalanced volumes.

Pure numpy/scipy: a small reverse-mode autodiff core, the network, a
composite weighted-logistic + Dice loss with median-frequency and
error-corrective class weighting, phantom data generation with a weak
and a manual annotation tier, SGD training with pretrain/fine-tune
stages, and Dice evaluation. See ``sdnet.cli`` for the command line.
"""

from .autograd import (BatchNormState, NonFiniteError, PoolIndices, SGDState,
                       ShapeError, Tensor, batchnorm2d, concat_channels, conv2d,
                       maxpool2x2, relu, sgd_step, softmax_channels, unpool2x2)
from .config import ConfigError, RunConfig, build_run_config, load_run_config
from .data import (AugmentationConfig, CorruptionConfig, DataConfig, Sample,
                   SegDataset, VolumeRecord, augment, corrupt_labels,
                   generate_dataset, generate_phantom, load_dataset,
                   slice_dataset, write_dataset)
from .gradcheck import run_gradcheck
from .losses import (LossConfig, boundary_mask, class_frequencies,
                     class_weight_map, composite_loss, ecb_weights,
                     mfb_weights, one_hot, soft_dice_per_class)
from .metrics import DiceReport, dice_per_class, evaluate_model, write_report_csv
from .model import (ModelConfig, SDNetParameters, forward, influence_interval,
                    init_parameters, predict_labels)
from .serialize import FormatError, read_sdck, read_sdt1, write_sdck, write_sdt1
from .train import (CheckpointError, EpochLog, FineTuneMode, TrainConfig,
                    TrainingDivergedError, epoch_lr, finetune, load_checkpoint,
                    pretrain, save_checkpoint, train_from_scratch, validate)

__version__ = "0.1.0"
