"""Minimal reverse-mode autodiff over dense numpy arrays.

Implements exactly the operations the segmentation network needs: 2-D
convolution (odd kernel, same padding, stride 1), batch normalization,
ReLU, 2x2 max pooling with saved argmax indices, the matching unpooling,
channel concatenation, channel softmax, and the SGD-with-momentum update.

Forward values live in ``Tensor.data``. Every op attaches a backward
closure to its output tensor; ``Tensor.backward`` replays the closures in
reverse topological order, accumulating into ``Tensor.grad``. float32 is
the training dtype; float64 inputs are carried through unchanged so
gradient checks can run at full precision. All operations are
deterministic: identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf surfaced where only finite values are allowed."""


class Tensor:
    """Dense float array with a gradient slot and tape hooks.

    Tensors produced by ops are treated as immutable; parameters (leaves
    with ``requires_grad=True``) are mutated only by ``sgd_step`` between
    passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = ()):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def needs_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def accumulate(self, grad: np.ndarray) -> None:
        # Backward closures hand over freshly allocated arrays, so the
        # first contribution can be adopted without copying.
        if self.grad is None:
            self.grad = grad
        else:
            self.grad += grad

    def backward(self, grad=None) -> None:
        """Backpropagate ``grad`` (default: all-ones) from this tensor."""
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.array(grad, dtype=self.data.dtype)
        if self.grad.shape != self.data.shape:
            raise ShapeError("seed gradient shape must match tensor shape")
        for node in reversed(_topo_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _topo_order(root: Tensor) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what}: {bad} non-finite element(s)")


@dataclass
class PoolIndices:
    """Argmax positions saved by maxpool2x2.

    ``indices`` holds, per pooled output element, the flat position
    (0..3, row-major) of the maximum inside its source 2x2 window.
    """

    indices: np.ndarray

    @property
    def shape(self):
        return self.indices.shape


class BatchNormState:
    """Per-channel scale/shift plus running statistics for batch norm.

    Running stats start at mean 0 / variance 1 so eval mode is defined
    even before any training step.
    """

    def __init__(self, num_channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        if not 0 < momentum <= 1:
            raise ValueError(f"momentum must be in (0, 1], got {momentum}")
        self.gamma = Tensor(np.ones(num_channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.training = True

    @property
    def num_channels(self) -> int:
        return self.gamma.data.shape[0]

    def copy(self) -> "BatchNormState":
        dup = BatchNormState(self.num_channels, self.eps, self.momentum,
                             dtype=self.gamma.data.dtype)
        dup.gamma.data = self.gamma.data.copy()
        dup.beta.data = self.beta.data.copy()
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        dup.training = self.training
        return dup


# ---------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Unfold (B,C,H,W) into (B*H*W, C*k*k) patch rows for stride-1 conv."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sB, sC, sH, sW = xp.strides
    windows = as_strided(
        xp,
        shape=(B, H, W, C, k, k),
        strides=(sB, sH, sW, sC, sH, sW),
        writeable=False,
    )
    return windows.reshape(B * H * W, C * k * k)


def _col2im_add(gcol: np.ndarray, B: int, C: int, H: int, W: int,
                k: int, pad: int) -> np.ndarray:
    """Scatter-add patch-row gradients back onto the (B,C,H,W) input grid."""
    g6 = gcol.reshape(B, H, W, C, k, k)
    gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=gcol.dtype)
    for di in range(k):
        for dj in range(k):
            gxp[:, :, di:di + H, dj:dj + W] += g6[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gxp[:, :, pad:pad + H, pad:pad + W])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with zero same-padding; odd square kernels only."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (B,C,H,W), got {x.data.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D (Cout,Cin,k,k), got {weight.data.shape}")
    B, Cin, H, W = x.data.shape
    Cout, Ck, kh, kw = weight.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd extent, got {kh}x{kw}")
    if Ck != Cin:
        raise ShapeError(f"conv2d channel mismatch: input has {Cin}, kernel expects {Ck}")
    if bias.data.shape != (Cout,):
        raise ShapeError(f"conv2d bias must have shape ({Cout},), got {bias.data.shape}")
    k, pad = kh, (kh - 1) // 2

    col = _im2col(x.data, k, pad)
    w2 = weight.data.reshape(Cout, Cin * k * k)
    out2 = col @ w2.T
    out2 += bias.data
    del col  # rebuilt on demand in backward; holding every layer's copy is too costly
    out_data = np.ascontiguousarray(out2.reshape(B, H, W, Cout).transpose(0, 3, 1, 2))
    out = Tensor(out_data, parents=(x, weight, bias))

    def _backward():
        g2 = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(B * H * W, Cout)
        if bias.needs_grad():
            bias.accumulate(g2.sum(axis=0))
        if weight.needs_grad():
            weight.accumulate((g2.T @ _im2col(x.data, k, pad)).reshape(Cout, Cin, k, k))
        if x.needs_grad():
            x.accumulate(_col2im_add(g2 @ w2, B, Cin, H, W, k, pad))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm2d(x: Tensor, state: BatchNormState) -> Tensor:
    """Channel-wise batch norm; batch stats in train mode, running stats in eval.

    Train mode updates the running statistics in place with the state's
    momentum (biased batch variance, matching the normalization path).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d input must be 4-D, got {x.data.shape}")
    B, C, H, W = x.data.shape
    if C != state.num_channels:
        raise ShapeError(f"batchnorm2d: input has {C} channels, state has {state.num_channels}")
    gamma, beta = state.gamma, state.beta
    g4 = gamma.data.reshape(1, C, 1, 1)

    if state.training:
        m = B * H * W
        if m < 2:
            raise ShapeError("batchnorm2d train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(
            state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var).astype(
            state.running_var.dtype)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)

    out = Tensor(g4 * xhat + beta.data.reshape(1, C, 1, 1), parents=(x, gamma, beta))
    training = state.training

    def _backward():
        g = out.grad
        if beta.needs_grad():
            beta.accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.needs_grad():
            gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.needs_grad():
            scale = (gamma.data * inv_std).reshape(1, C, 1, 1)
            if training:
                m = B * H * W
                gsum = g.sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
                gx_sum = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
                x.accumulate(scale * (g - gsum / m - xhat * gx_sum / m))
            else:
                x.accumulate(scale * g)

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops

def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0), parents=(x,))

    def _backward():
        if x.needs_grad():
            x.accumulate(out.grad * (x.data > 0))

    out._backward = _backward
    return out


def _to_windows(x: np.ndarray) -> np.ndarray:
    """(B,C,H,W) -> (B,C,H/2,W/2,4) with each 2x2 window flattened row-major."""
    B, C, H, W = x.shape
    return (x.reshape(B, C, H // 2, 2, W // 2, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(B, C, H // 2, W // 2, 4))


def _from_windows(w5: np.ndarray) -> np.ndarray:
    """Inverse of _to_windows."""
    B, C, h, w, _ = w5.shape
    return (w5.reshape(B, C, h, w, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(B, C, 2 * h, 2 * w))


def maxpool2x2(x: Tensor) -> tuple[Tensor, PoolIndices]:
    """Disjoint 2x2 max pooling; ties go to the first window position."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 input must be 4-D, got {x.data.shape}")
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {H}x{W}")
    windows = _to_windows(x.data)
    idx = windows.argmax(axis=4).astype(np.uint8)
    pooled = np.take_along_axis(windows, idx[..., None].astype(np.intp), axis=4)[..., 0]
    out = Tensor(np.ascontiguousarray(pooled), parents=(x,))

    def _backward():
        if x.needs_grad():
            scattered = np.zeros((B, C, H // 2, W // 2, 4), dtype=out.grad.dtype)
            np.put_along_axis(scattered, idx[..., None].astype(np.intp),
                              out.grad[..., None], axis=4)
            x.accumulate(_from_windows(scattered))

    out._backward = _backward
    return out, PoolIndices(idx)


def unpool2x2(x: Tensor, pool_indices: PoolIndices) -> Tensor:
    """Place each value at its recorded 2x2 window position, zeros elsewhere."""
    if x.data.ndim != 4:
        raise ShapeError(f"unpool2x2 input must be 4-D, got {x.data.shape}")
    idx = pool_indices.indices
    if idx.shape != x.data.shape:
        raise ShapeError(
            f"unpool2x2 index shape {idx.shape} does not match input shape {x.data.shape}")
    B, C, h, w = x.data.shape
    scattered = np.zeros((B, C, h, w, 4), dtype=x.data.dtype)
    np.put_along_axis(scattered, idx[..., None].astype(np.intp), x.data[..., None], axis=4)
    out = Tensor(_from_windows(scattered), parents=(x,))

    def _backward():
        if x.needs_grad():
            windows = _to_windows(out.grad)
            x.accumulate(np.ascontiguousarray(
                np.take_along_axis(windows, idx[..., None].astype(np.intp), axis=4)[..., 0]))

    out._backward = _backward
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; ``a`` occupies the first channels."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels operands must be 4-D")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(
            f"concat_channels batch/spatial mismatch: {a.data.shape} vs {b.data.shape}")
    Ca = a.data.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), parents=(a, b))

    def _backward():
        if a.needs_grad():
            a.accumulate(out.grad[:, :Ca].copy())
        if b.needs_grad():
            b.accumulate(out.grad[:, Ca:].copy())

    out._backward = _backward
    return out


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    if logits.data.ndim != 4:
        raise ShapeError(f"softmax_channels input must be 4-D, got {logits.data.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p, parents=(logits,))

    def _backward():
        if logits.needs_grad():
            g = out.grad
            logits.accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# optimizer

class SGDState:
    """One velocity buffer per parameter, in registration order."""

    def __init__(self, params: "list[Tensor]"):
        self.velocity = [np.zeros_like(p.data) for p in params]


def sgd_step(params: "list[Tensor]", grads: "list[np.ndarray]", state: SGDState,
             lr: float, momentum: float, weight_decay: float) -> None:
    """In-place SGD update: g' = g + wd*w; v' = mom*v + g'; w' = w - lr*v'.

    The whole step is validated before any parameter is touched, so a
    non-finite gradient aborts with no partial update.
    """
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ShapeError("sgd_step: params, grads and velocity must have equal length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise NonFiniteError(f"missing gradient for parameter {i} (shape {p.data.shape})")
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter {i} shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient for parameter {i} (shape {p.data.shape})")
    for p, g, v in zip(params, grads, state.velocity):
        step = g + weight_decay * p.data
        np.multiply(v, momentum, out=v)
        v += step
        p.data = p.data - lr * v
