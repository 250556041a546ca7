"""Parameter initialization drawn from :class:`RngStream` so weights are reproducible."""
from __future__ import annotations

import torch
from torch import nn

from .numerics import RngStream, xavier_bound


def _fans(weight: torch.Tensor) -> tuple[int, int]:
    receptive = weight[0, 0].numel() if weight.ndim > 2 else 1
    return weight.shape[1] * receptive, weight.shape[0] * receptive


@torch.no_grad()
def xavier_uniform_(weight: torch.Tensor, rng: RngStream) -> torch.Tensor:
    fan_in, fan_out = _fans(weight)
    bound = xavier_bound(fan_in, fan_out)
    draws = rng.uniform(tuple(weight.shape), -bound, bound)
    weight.copy_(torch.as_tensor(draws, dtype=weight.dtype))
    return weight


@torch.no_grad()
def init_parameters(module: nn.Module, rng: RngStream) -> nn.Module:
    """Xavier-uniform weights, zero biases, unit/zero group-norm affine.

    Submodules are visited in registration order, so the draw sequence is a
    function of the architecture alone. Modules flagged ``zero_init = True``
    get all-zero weights.
    """
    for sub in module.modules():
        if isinstance(sub, (nn.Linear, nn.Conv2d)):
            if getattr(sub, "zero_init", False):
                sub.weight.zero_()
            else:
                xavier_uniform_(sub.weight, rng)
            if sub.bias is not None:
                sub.bias.zero_()
        elif isinstance(sub, nn.GroupNorm) and sub.affine:
            sub.weight.fill_(1.0)
            sub.bias.zero_()
    return module
