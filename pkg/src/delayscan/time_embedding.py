"""Universal time vectors for the diffusion step and the delay interval.

A position (diffusion step or delay in whole minutes) is encoded with
interleaved sines and cosines, widened to 4N, passed through SiLU, and
compressed back to N. Two such vectors are merged per block by one of four
combination modes and injected into feature maps as a channel-wise
scale/shift.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigError, ShapeError

EMBED_MODES = ("ec", "la", "lc", "ad")
MAX_DELAY_MINUTES = 600


def _check_dim(N: int) -> None:
    if N <= 0 or N % 2:
        raise ConfigError(f"time-vector length must be a positive even integer, got {N}")


def sinusoidal_encode(pos: int, N: int) -> np.ndarray:
    _check_dim(N)
    if pos < 0:
        raise ValueError(f"position must be non-negative, got {pos}")
    i = np.arange(N // 2, dtype=np.float64)
    angle = pos / 10000.0 ** (2.0 * i / N)
    out = np.empty(N)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def sinusoidal_table(pos: torch.Tensor, N: int, dtype=torch.float64) -> torch.Tensor:
    """Batched :func:`sinusoidal_encode`: ``(B,)`` positions to ``(B, N)``."""
    _check_dim(N)
    i = torch.arange(N // 2, dtype=torch.float64)
    angle = pos.to(torch.float64)[:, None] / 10000.0 ** (2.0 * i / N)
    out = torch.stack([angle.sin(), angle.cos()], dim=-1).reshape(pos.shape[0], N)
    return out.to(dtype)


def bottleneck_mlp(T_s, w_expand, b_expand, w_compress, b_compress, return_expanded=False):
    """``W_c . SiLU(W_e . T_s + b_e) + b_c`` with W_e: N->4N and W_c: 4N->N."""
    T_s = torch.as_tensor(T_s)
    N = T_s.shape[-1]
    if tuple(w_expand.shape) != (4 * N, N) or tuple(w_compress.shape) != (N, 4 * N):
        raise ShapeError(
            f"bottleneck weights must be (4N, N) and (N, 4N) for N={N}, got "
            f"{tuple(w_expand.shape)} and {tuple(w_compress.shape)}"
        )
    T_e = F.linear(T_s, w_expand, b_expand)
    T_u = F.linear(F.silu(T_e), w_compress, b_compress)
    return (T_u, T_e) if return_expanded else T_u


class BottleneckMLP(nn.Module):
    def __init__(self, N: int):
        super().__init__()
        _check_dim(N)
        self.N = N
        self.expand = nn.Linear(N, 4 * N)
        self.compress = nn.Linear(4 * N, N)

    def forward(self, T_s, return_expanded=False):
        return bottleneck_mlp(T_s, self.expand.weight, self.expand.bias,
                              self.compress.weight, self.compress.bias, return_expanded)


@dataclass
class UniversalTimeVector:
    pos: int
    N: int
    T_s: torch.Tensor
    T_e: torch.Tensor
    T_u: torch.Tensor


def universal_time_vector(pos: int, mlp: BottleneckMLP) -> UniversalTimeVector:
    dtype = mlp.expand.weight.dtype
    T_s = torch.as_tensor(sinusoidal_encode(pos, mlp.N), dtype=dtype)
    T_u, T_e = mlp(T_s, return_expanded=True)
    return UniversalTimeVector(int(pos), mlp.N, T_s, T_e, T_u)


class TimeConverter(nn.Module):
    """Positions ``(B,)`` to universal time vectors ``(B, N)``."""

    def __init__(self, N: int):
        super().__init__()
        self.N = N
        self.mlp = BottleneckMLP(N)

    def forward(self, pos: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal_table(pos, self.N, self.mlp.expand.weight.dtype))


def _vec(v):
    return v.T_u if isinstance(v, UniversalTimeVector) else v


def combine(T_vec, Td_vec, mode: str, block_index: int, weight=None, bias=None) -> torch.Tensor:
    """Merge the step vector and the delay vector for one block.

    ``ec`` routes the step vector to even blocks and the delay vector to odd
    ones. ``la`` projects the sum, ``lc`` projects the concatenation (weight
    ``(N, 2N)``), ``ad`` returns the plain sum.
    """
    T_u, Td_u = _vec(T_vec), _vec(Td_vec)
    if T_u.shape != Td_u.shape:
        raise ShapeError(f"time vectors differ in shape: {tuple(T_u.shape)} vs {tuple(Td_u.shape)}")
    if mode == "ec":
        return T_u if block_index % 2 == 0 else Td_u
    if mode == "ad":
        return T_u + Td_u
    if mode in ("la", "lc"):
        if weight is None:
            raise ConfigError(f"embed mode {mode!r} needs projection weights")
        x = T_u + Td_u if mode == "la" else torch.cat([T_u, Td_u], dim=-1)
        return F.linear(x, weight, bias)
    raise ConfigError(f"unknown embed mode {mode!r}; expected one of {EMBED_MODES}")


class TimeCombiner(nn.Module):
    """Holds the single projection shared by every block (``la``/``lc`` only)."""

    def __init__(self, N: int, mode: str):
        super().__init__()
        if mode not in EMBED_MODES:
            raise ConfigError(f"unknown embed mode {mode!r}; expected one of {EMBED_MODES}")
        self.mode = mode
        if mode == "la":
            self.proj = nn.Linear(N, N)
        elif mode == "lc":
            self.proj = nn.Linear(2 * N, N)
        else:
            self.proj = None

    def forward(self, T_u, Td_u, block_index: int) -> torch.Tensor:
        w = None if self.proj is None else self.proj.weight
        b = None if self.proj is None else self.proj.bias
        return combine(T_u, Td_u, self.mode, block_index, w, b)


def film_inject(M: torch.Tensor, T_u: torch.Tensor, weight: torch.Tensor, bias=None) -> torch.Tensor:
    """``(scale + 1) * M + shift`` where ``[scale, shift] = weight . T_u + bias``.

    ``M`` is ``(C, H, W)`` with ``T_u`` of shape ``(N,)``, or ``(B, C, H, W)``
    with ``(B, N)``.
    """
    C = M.shape[-3]
    if weight.shape[0] != 2 * C:
        raise ShapeError(f"projection yields {weight.shape[0]} values, need 2*C = {2 * C}")
    scale, shift = F.linear(T_u, weight, bias).chunk(2, dim=-1)
    return (scale[..., None, None] + 1.0) * M + shift[..., None, None]


class FiLM(nn.Module):
    def __init__(self, N: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(N, 2 * channels)

    def forward(self, M, T_u):
        return film_inject(M, T_u, self.proj.weight, self.proj.bias)
