"""Finite-difference verification of every backward implementation.

Each check builds a small float64 instance, projects the op output to a
scalar with a fixed random vector, and compares analytic gradients
against central differences at sampled elements, over several seeds.
Relative error uses max(|analytic|, |numeric|, 1e-6) in the denominator.
ReLU inputs are pushed away from the kink; max-pool ties are measure-zero
under the fixed seeds used here.

Ops are invoked through their defining modules (``autograd.conv2d`` etc.)
so a monkeypatched implementation is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd, losses, model
from .autograd import BatchNormState, Tensor

DEFAULT_THRESHOLD = 1e-3
DEFAULT_SEEDS = (0, 1, 2)
_EPS = 1e-5


@dataclass
class OpCheck:
    name: str
    max_rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.threshold

    def format_line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name}: max rel err {self.max_rel_err:.3e} {status}"


def _central_diff(scalar_fn, flat, i, eps: float) -> float:
    orig = flat[i]
    flat[i] = orig + eps
    fp = scalar_fn()
    flat[i] = orig - eps
    fm = scalar_fn()
    flat[i] = orig
    return (fp - fm) / (2.0 * eps)


def _fd_worst(tensors, scalar_fn, backward_fn, rng, samples: int) -> float:
    """Worst relative error over sampled elements of every listed tensor.

    Each element is probed at two step sizes; if the two central
    differences disagree the probe straddles a non-differentiable point
    (ReLU kink, pool argmax flip) and is skipped — a wrong backward
    produces consistent numeric estimates that still disagree with the
    analytic value, so bugs cannot hide behind this filter.
    """
    for t in tensors:
        t.grad = None
    backward_fn()
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        for i in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
            coarse = _central_diff(scalar_fn, flat, i, _EPS)
            numeric = _central_diff(scalar_fn, flat, i, _EPS / 2.0)
            if abs(coarse - numeric) > 1e-2 * max(abs(coarse), abs(numeric), 1e-6):
                continue
            analytic = float(grad[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst


def _proj_scalar(out: Tensor, proj: np.ndarray) -> float:
    return float((out.data * proj).sum())


def _build_conv2d(rng):
    x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    proj = rng.standard_normal((2, 4, 6, 6))
    run = lambda: autograd.conv2d(x, w, b)
    return [x, w, b], (lambda: _proj_scalar(run(), proj)), (lambda: run().backward(proj))


def _build_batchnorm2d(rng):
    x = Tensor(rng.standard_normal((3, 4, 5, 5)), requires_grad=True)
    state = BatchNormState(4, dtype=np.float64)
    state.gamma.data = rng.standard_normal(4) * 0.5 + 1.0
    state.beta.data = rng.standard_normal(4) * 0.2
    proj = rng.standard_normal((3, 4, 5, 5))
    run = lambda: autograd.batchnorm2d(x, state)
    return ([x, state.gamma, state.beta],
            (lambda: _proj_scalar(run(), proj)), (lambda: run().backward(proj)))


def _build_relu(rng):
    raw = rng.standard_normal((2, 3, 4, 4))
    x = Tensor(raw + np.where(raw >= 0, 0.2, -0.2), requires_grad=True)
    proj = rng.standard_normal((2, 3, 4, 4))
    run = lambda: autograd.relu(x)
    return [x], (lambda: _proj_scalar(run(), proj)), (lambda: run().backward(proj))


def _build_maxpool2x2(rng):
    x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    proj = rng.standard_normal((2, 3, 3, 3))
    run = lambda: autograd.maxpool2x2(x)[0]
    return [x], (lambda: _proj_scalar(run(), proj)), (lambda: run().backward(proj))


def _build_unpool2x2(rng):
    _, idx = autograd.maxpool2x2(Tensor(rng.standard_normal((2, 3, 4, 4))))
    x = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
    proj = rng.standard_normal((2, 3, 4, 4))
    run = lambda: autograd.unpool2x2(x, idx)
    return [x], (lambda: _proj_scalar(run(), proj)), (lambda: run().backward(proj))


def _build_concat_channels(rng):
    a = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    proj = rng.standard_normal((2, 5, 4, 4))
    run = lambda: autograd.concat_channels(a, b)
    return [a, b], (lambda: _proj_scalar(run(), proj)), (lambda: run().backward(proj))


def _build_softmax_channels(rng):
    x = Tensor(rng.standard_normal((2, 4, 5, 5)), requires_grad=True)
    proj = rng.standard_normal((2, 4, 5, 5))
    run = lambda: autograd.softmax_channels(x)
    return [x], (lambda: _proj_scalar(run(), proj)), (lambda: run().backward(proj))


def _build_composite_loss(rng):
    # normalized per pixel; FD probes nudge entries by ~1e-5, well inside
    # the loss's 1e-4 normalization tolerance
    raw = rng.uniform(0.05, 0.95, size=(2, 3, 6, 6))
    p = Tensor(raw / raw.sum(axis=1, keepdims=True), requires_grad=True)
    labels = rng.integers(0, 3, size=(2, 6, 6))
    wmap = rng.uniform(0.5, 2.0, size=(2, 6, 6))
    run = lambda: losses.composite_loss(p, labels, wmap)
    return [p], (lambda: float(run().data)), (lambda: run().backward())


def _build_model_loss(rng):
    cfg = model.ModelConfig(num_classes=3, channels=4, kernel_size=7, depth=3)
    params = model.init_parameters(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 1, 16, 16)) * 0.5, requires_grad=True)
    labels = rng.integers(0, 3, size=(2, 16, 16))
    wmap = rng.uniform(0.5, 2.0, size=(2, 16, 16))
    run = lambda: losses.composite_loss(model.forward(params, x), labels, wmap)
    checked = [x,
               params.encoders[0].weight,
               params.encoders[1].bias,
               params.encoders[0].bn.gamma,
               params.decoders[0].weight,
               params.decoders[2].bn.beta,
               params.cls_weight,
               params.cls_bias]
    return checked, (lambda: float(run().data)), (lambda: run().backward())


_BUILDERS = [
    ("conv2d", _build_conv2d),
    ("batchnorm2d", _build_batchnorm2d),
    ("relu", _build_relu),
    ("maxpool2x2", _build_maxpool2x2),
    ("unpool2x2", _build_unpool2x2),
    ("concat_channels", _build_concat_channels),
    ("softmax_channels", _build_softmax_channels),
    ("composite_loss", _build_composite_loss),
    ("model_loss", _build_model_loss),
]


def run_gradcheck(seeds=DEFAULT_SEEDS, samples_per_tensor: int = 6,
                  threshold: float = DEFAULT_THRESHOLD) -> "list[OpCheck]":
    """Check every op and the end-to-end loss; one result line per op."""
    results = []
    for name, build in _BUILDERS:
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            tensors, scalar_fn, backward_fn = build(rng)
            worst = max(worst, _fd_worst(tensors, scalar_fn, backward_fn,
                                         rng, samples_per_tensor))
        results.append(OpCheck(name, worst, threshold))
    return results
