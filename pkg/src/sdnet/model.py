"""Encoder-decoder segmentation network with index-preserving unpooling.

Three encoder blocks (7x7 conv -> batch norm -> ReLU -> 2x2 max pool,
keeping the argmax indices) mirror three decoder blocks (2x2 unpool into
the saved positions -> concatenation with the matching encoder feature
map -> 7x7 conv -> batch norm -> ReLU). A 1x1 convolution then maps to
per-class logits and a channel softmax produces probabilities. All convs
use stride 1 with zero same-padding, so spatial extents only change at
pool/unpool; inputs must be divisible by 2**depth in both extents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd
from .autograd import BatchNormState, ShapeError, Tensor
from .seeding import generator


@dataclass
class ModelConfig:
    num_classes: int
    channels: int = 64
    kernel_size: int = 7
    depth: int = 3
    input_channels: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.channels < 1 or self.input_channels < 1:
            raise ValueError("channels and input_channels must be >= 1")


class ConvBlock:
    """conv -> batch norm -> ReLU, with its own parameters."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        k = kernel_size
        limit = np.sqrt(6.0 / (in_channels * k * k))
        w = rng.uniform(-limit, limit, size=(out_channels, in_channels, k, k))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.bn = BatchNormState(out_channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return autograd.relu(autograd.batchnorm2d(autograd.conv2d(x, self.weight, self.bias),
                                                  self.bn))


class SDNetParameters:
    """All learnable tensors and batch-norm state for one network.

    Decoder blocks are indexed in execution order: ``dec0`` runs first and
    pairs with the deepest encoder ``enc{depth-1}``.
    """

    def __init__(self, config: ModelConfig, encoders: list, decoders: list,
                 cls_weight: Tensor, cls_bias: Tensor):
        self.config = config
        self.encoders = encoders
        self.decoders = decoders
        self.cls_weight = cls_weight
        self.cls_bias = cls_bias

    def _named_blocks(self):
        for i, blk in enumerate(self.encoders):
            yield f"enc{i}", blk
        for i, blk in enumerate(self.decoders):
            yield f"dec{i}", blk

    def named_learnables(self) -> "list[tuple[str, Tensor]]":
        """(name, tensor) pairs in a fixed, checkpoint-stable order."""
        named = []
        for prefix, blk in self._named_blocks():
            named.append((f"{prefix}.conv.weight", blk.weight))
            named.append((f"{prefix}.conv.bias", blk.bias))
            named.append((f"{prefix}.bn.gamma", blk.bn.gamma))
            named.append((f"{prefix}.bn.beta", blk.bn.beta))
        named.append(("classifier.weight", self.cls_weight))
        named.append(("classifier.bias", self.cls_bias))
        return named

    def learnables(self) -> "list[Tensor]":
        return [t for _, t in self.named_learnables()]

    def state_arrays(self) -> "list[tuple[str, np.ndarray]]":
        """Non-learnable state (batch-norm running statistics)."""
        named = []
        for prefix, blk in self._named_blocks():
            named.append((f"{prefix}.bn.running_mean", blk.bn.running_mean))
            named.append((f"{prefix}.bn.running_var", blk.bn.running_var))
        return named

    def set_training(self, training: bool) -> None:
        for _, blk in self._named_blocks():
            blk.bn.training = training

    def is_training(self) -> bool:
        return self.encoders[0].bn.training

    def copy(self) -> "SDNetParameters":
        dup = init_parameters(self.config, seed=0)
        for (_, src), (_, dst) in zip(self.named_learnables(), dup.named_learnables()):
            dst.data = src.data.copy()
        for (_, blk), (_, dblk) in zip(self._named_blocks(), dup._named_blocks()):
            dblk.bn.running_mean = blk.bn.running_mean.copy()
            dblk.bn.running_var = blk.bn.running_var.copy()
        dup.set_training(self.is_training())
        return dup


def init_parameters(config: ModelConfig, seed: int, dtype=np.float32) -> SDNetParameters:
    """He-uniform conv weights (limit sqrt(6/fan_in)), zero biases, identity
    batch norm. Weight draws consume the "init" stream of ``seed`` in block
    order, so the same seed always gives the same network."""
    rng = generator(seed, "init")
    C, k = config.channels, config.kernel_size
    encoders = []
    in_ch = config.input_channels
    for _ in range(config.depth):
        encoders.append(ConvBlock(in_ch, C, k, rng, dtype=dtype))
        in_ch = C
    decoders = [ConvBlock(2 * C, C, k, rng, dtype=dtype) for _ in range(config.depth)]
    limit = np.sqrt(6.0 / C)
    cls_w = Tensor(rng.uniform(-limit, limit,
                               size=(config.num_classes, C, 1, 1)).astype(dtype),
                   requires_grad=True)
    cls_b = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True)
    return SDNetParameters(config, encoders, decoders, cls_w, cls_b)


def forward(params: SDNetParameters, x: Tensor, capture: dict | None = None) -> Tensor:
    """Run the network; returns per-pixel class probabilities (B,N,H,W).

    ``capture``, if given, collects intermediate activations under keys
    like "enc0.act", "enc0.pooled", "dec1.act", "logits", "probs".
    """
    cfg = params.config
    if x.data.ndim != 4:
        raise ShapeError(f"input must be 4-D (B,C,H,W), got {x.data.shape}")
    B, C, H, W = x.data.shape
    if C != cfg.input_channels:
        raise ShapeError(f"input has {C} channels, model expects {cfg.input_channels}")
    div = 2 ** cfg.depth
    if H % div or W % div:
        raise ShapeError(
            f"spatial extents must be divisible by {div} for depth {cfg.depth}, got {H}x{W}")

    skips, indices = [], []
    h = x
    for i, blk in enumerate(params.encoders):
        act = blk(h)
        skips.append(act)
        h, idx = autograd.maxpool2x2(act)
        indices.append(idx)
        if capture is not None:
            capture[f"enc{i}.act"] = act
            capture[f"enc{i}.pooled"] = h
    for i, blk in enumerate(params.decoders):
        j = cfg.depth - 1 - i
        h = autograd.unpool2x2(h, indices[j])
        if capture is not None:
            capture[f"dec{i}.unpooled"] = h
        h = blk(autograd.concat_channels(h, skips[j]))
        if capture is not None:
            capture[f"dec{i}.act"] = h
    logits = autograd.conv2d(h, params.cls_weight, params.cls_bias)
    probs = autograd.softmax_channels(logits)
    if capture is not None:
        capture["logits"] = logits
        capture["probs"] = probs
    return probs


def predict_labels(params: SDNetParameters, images: np.ndarray,
                   batch_size: int = 4) -> np.ndarray:
    """Argmax segmentation of ``images`` (B,C,H,W) in eval mode -> (B,H,W).

    Batch-norm uses running statistics; the training flag is restored
    afterwards.
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"images must be 4-D (B,C,H,W), got {images.shape}")
    was_training = params.is_training()
    params.set_training(False)
    try:
        parts = []
        for start in range(0, images.shape[0], batch_size):
            probs = forward(params, Tensor(images[start:start + batch_size]))
            parts.append(np.argmax(probs.data, axis=1).astype(np.int64))
        return np.concatenate(parts, axis=0) if parts else np.zeros((0,) + images.shape[2:],
                                                                    dtype=np.int64)
    finally:
        params.set_training(was_training)


def influence_interval(config: ModelConfig) -> tuple[int, int]:
    """Input-offset interval (inclusive) that can influence one output pixel.

    Walks the op sequence backwards from the classifier, applying exact
    interval rules per op: a k-conv widens by (k-1)/2 on each side, going
    back through an unpool maps [a,b] to [a//2, b//2], and going back
    through a pool maps [a,b] to [2a, 2b+1]. Skip connections are subsets
    of the deeper path, so they never widen the interval. Symmetric in the
    two spatial axes; for kernel 7 and depth 3 this gives (-45, 44).
    """
    half = (config.kernel_size - 1) // 2
    lo = hi = 0
    # classifier 1x1 conv changes nothing
    for _ in range(config.depth):          # decoder blocks, reversed
        lo, hi = lo - half, hi + half      # conv k
        lo, hi = lo // 2, hi // 2          # back through unpool (floor)
    for _ in range(config.depth):          # encoder blocks, reversed
        lo, hi = 2 * lo, 2 * hi + 1        # back through pool
        lo, hi = lo - half, hi + half      # conv k
    return lo, hi
