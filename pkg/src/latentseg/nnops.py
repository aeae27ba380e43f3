"""Neural primitives used by the segmentation networks.

Thin functional layer over ``torch.nn.functional`` with the shape checks and
tie-breaking rules the networks rely on.  ``*_backward`` helpers expose the
vector-Jacobian products explicitly so they can be checked in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "PRELU_INIT",
    "BatchNormState",
    "batch_norm",
    "conv2d",
    "conv2d_backward",
    "index_unpool2",
    "init_conv",
    "maxout",
    "maxout_backward",
    "maxpool2",
    "prelu",
    "softmax_channels",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT = 0.25


def init_conv(c_out: int, c_in: int, k: int, generator: torch.Generator | None = None):
    """Uniform fan-in (Kaiming-style) weights and bias for a ``k x k`` kernel."""
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    bound = 1.0 / math.sqrt(c_in * k * k)
    w = (torch.rand(c_out, c_in, k, k, generator=generator) * 2 - 1) * math.sqrt(6.0) * bound
    b = (torch.rand(c_out, generator=generator) * 2 - 1) * bound
    return w, b


def conv2d(u: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Same-extent cross-correlation with zero padding."""
    k = weight.shape[-1]
    if weight.shape[-2] != k or k % 2 != 1:
        raise ValueError(f"kernel must be square with odd size, got {tuple(weight.shape[-2:])}")
    if u.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {u.shape[1]} channels, kernel expects {weight.shape[1]}")
    return F.conv2d(u, weight, bias, padding=(k - 1) // 2)


def conv2d_backward(u, weight, bias, upstream):
    """``(grad_u, grad_w, grad_b)`` for ``sum(upstream * conv2d(u, weight, bias))``."""
    u = u.detach().requires_grad_(True)
    weight = weight.detach().requires_grad_(True)
    bias = bias.detach().requires_grad_(True)
    out = conv2d(u, weight, bias)
    return torch.autograd.grad(out, (u, weight, bias), upstream)


@dataclass
class BatchNormState:
    gamma: torch.Tensor
    beta: torch.Tensor
    running_mean: torch.Tensor
    running_var: torch.Tensor
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=torch.float32) -> BatchNormState:
        return cls(
            torch.ones(channels, dtype=dtype),
            torch.zeros(channels, dtype=dtype),
            torch.zeros(channels, dtype=dtype),
            torch.ones(channels, dtype=dtype),
        )


def batch_norm(u: torch.Tensor, state: BatchNormState, train: bool) -> torch.Tensor:
    """Per-channel normalization; ``train`` uses batch statistics and updates running ones."""
    if train and u.shape[0] * u.shape[2] * u.shape[3] < 2:
        raise ValueError("training-mode batch norm needs at least two values per channel")
    return F.batch_norm(
        u,
        state.running_mean,
        state.running_var,
        state.gamma,
        state.beta,
        training=train,
        momentum=state.momentum,
        eps=state.eps,
    )


def prelu(u: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    if a.numel() not in (1, u.shape[1]):
        raise ValueError(f"slope vector of length {a.numel()} for {u.shape[1]} channels")
    return F.prelu(u, a)


def maxpool2(u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """2x2 stride-2 max pooling returning flat argmax offsets.

    Odd extents are padded on the far side first (with ``-inf`` so padding
    never wins a window); offsets refer to the padded map and unpooling crops
    back.
    """
    h, w = u.shape[-2:]
    if h % 2 or w % 2:
        u = F.pad(u, (0, w % 2, 0, h % 2), value=float("-inf"))
    return F.max_pool2d(u, 2, 2, return_indices=True)


def index_unpool2(v: torch.Tensor, indices: torch.Tensor, target_extent: tuple[int, int]) -> torch.Tensor:
    """Scatter pooled values back to their argmax positions, zeros elsewhere."""
    h, w = target_extent
    hp, wp = h + h % 2, w + w % 2
    if indices.shape != v.shape or (v.shape[-2], v.shape[-1]) != (hp // 2, wp // 2):
        raise ValueError(
            f"stale pool indices: values {tuple(v.shape)}, indices {tuple(indices.shape)}, target {target_extent}"
        )
    out = F.max_unpool2d(v, indices, 2, 2, output_size=(hp, wp))
    return out[..., :h, :w]


def maxout_backward(a: torch.Tensor, b: torch.Tensor, upstream: torch.Tensor):
    """Route ``upstream`` to the winning operand, ``a`` on ties."""
    grad_a = upstream * (a >= b)
    return grad_a, upstream - grad_a


class _Maxout(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a, b)
        return torch.maximum(a, b)

    @staticmethod
    def backward(ctx, upstream):
        a, b = ctx.saved_tensors
        return maxout_backward(a, b, upstream)


def maxout(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise maximum; on ties the gradient goes to ``a``."""
    if a.shape != b.shape:
        raise ValueError(f"maxout shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _Maxout.apply(a, b)


def softmax_channels(u: torch.Tensor) -> torch.Tensor:
    if u.shape[1] < 2:
        raise ValueError("softmax over channels needs at least two channels")
    return torch.softmax(u, dim=1)
