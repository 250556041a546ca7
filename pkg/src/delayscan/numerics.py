"""Deterministic numeric substrate.

Arrays are plain numpy arrays (float64 unless stated otherwise). Random draws
come from :class:`RngStream`, a counter-based SplitMix64 generator, so a given
``(seed, counter)`` pair reproduces the same sequence on every platform
regardless of numpy or torch versions.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Callable, Sequence

import numpy as np

from .exceptions import GradCheckError, ShapeError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _mix_scalar(value: int) -> int:
    return int(_splitmix(np.array([value & _MASK64], dtype=np.uint64))[0])


def check_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ShapeError(f"invalid shape {shape}: need >=1 dimension, all extents positive")
    return shape


class RngStream:
    """Counter-based SplitMix64 stream.

    Draw ``i`` (1-based, global across the stream) is
    ``splitmix64(key + i * 0x9E3779B97F4A7C15)`` where ``key`` is the mixed
    seed. The counter advances by exactly the number of 64-bit words consumed.
    """

    algorithm = "splitmix64-ctr"

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)
        self._key = np.uint64(_mix_scalar(self.seed))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def fork(self, key: int) -> "RngStream":
        """Independent stream derived from this stream's seed and ``key``."""
        return RngStream(_mix_scalar(self.seed ^ _mix_scalar(int(key) + 0x632BE59BD9B4E019)))

    def state(self) -> tuple[int, int]:
        return self.seed, self.counter

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _splitmix(self._key + idx * _GOLDEN)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws on the open interval (low, high)."""
        shape = check_shape(shape)
        n = math.prod(shape)
        u = ((self.raw(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Integers uniform on [low, high] inclusive, one word per draw."""
        u = self.uniform(size)
        return np.minimum(low + np.floor(u * (high - low + 1)).astype(np.int64), high)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def normal(self, shape) -> np.ndarray:
        return gaussian_sample(self, shape)


def gaussian_sample(rng: RngStream, shape) -> np.ndarray:
    """i.i.d. standard normal draws via Box-Muller.

    Consumes ``2 * ceil(n / 2)`` uniforms; both outputs of each pair are used
    and a trailing odd output is discarded.
    """
    shape = check_shape(shape)
    n = math.prod(shape)
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs).reshape(pairs, 2)
    r = np.sqrt(-2.0 * np.log(u[:, 0]))
    theta = 2.0 * np.pi * u[:, 1]
    z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
    return z[:n].reshape(shape)


def softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 array, got rank {m.ndim}")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


# --------------------------------------------------------------------------
# finite-difference gradient check


def fd_step(x: np.ndarray) -> np.ndarray:
    return 1e-5 * (1.0 + np.abs(x))


@dataclass
class GradCheckReport:
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    name: str = ""
    roundoff: np.ndarray | None = None
    failed: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.roundoff is None:
            self.roundoff = np.zeros_like(self.rel_error)
        self.failed = self.indices[self.rel_error > self.tol]

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.failed.size == 0

    def summary(self) -> dict:
        return {
            "name": self.name,
            "checked": int(self.indices.size),
            "max_rel_error": self.max_rel_error,
            "below_roundoff": int((np.abs(self.analytic - self.numeric) <= self.roundoff).sum()),
            "tol": self.tol,
            "passed": self.passed,
        }


def grad_check(
    f: Callable[[np.ndarray], float | tuple[float, np.ndarray]],
    params,
    tol: float = 1e-4,
    *,
    grad: Callable[[np.ndarray], np.ndarray] | None = None,
    indices: Sequence[int] | None = None,
    floor: float = 1e-6,
    name: str = "",
) -> GradCheckReport:
    """Compare an analytic gradient with central finite differences.

    ``f`` maps a float64 array shaped like ``params`` to a scalar. The analytic
    gradient comes from ``grad(x)`` or, when ``grad`` is None, from ``f``
    returning ``(value, gradient)``. Coordinates (flat indices) default to all.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor_i)``
    with ``floor_i = max(floor, r_i / tol)``, where ``r_i = 8 eps max|f| / h_i``
    bounds the round-off of the central difference. Gaps below ``r_i``
    (typically at exactly-zero gradients) therefore never count as failures;
    any larger gap is judged purely relatively.
    """
    x0 = np.array(params, dtype=np.float64, copy=True)

    def value(x):
        out = f(x)
        return float(out[0] if grad is None else out)

    if grad is None:
        v0, g = f(x0.copy())
        v0 = float(v0)
    else:
        v0, g = value(x0.copy()), grad(x0.copy())
    if not math.isfinite(v0):
        raise GradCheckError(f"{name or 'f'} is non-finite at the base point", coordinate=None)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    flat = x0.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    h = fd_step(flat[idx])

    numeric = np.empty(idx.size)
    fmax = np.empty(idx.size)
    for k, (i, hi) in enumerate(zip(idx, h)):
        xp = flat.copy()
        xp[i] += hi
        xm = flat.copy()
        xm[i] -= hi
        fp, fm = value(xp.reshape(x0.shape)), value(xm.reshape(x0.shape))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GradCheckError(f"{name or 'f'} is non-finite near coordinate {int(i)}", coordinate=int(i))
        numeric[k] = (fp - fm) / (2.0 * hi)
        fmax[k] = max(abs(fp), abs(fm), abs(v0))

    analytic = g[idx]
    roundoff = 8.0 * np.finfo(np.float64).eps * fmax / h
    denom = np.maximum.reduce([np.abs(analytic), np.abs(numeric), np.full(idx.size, floor), roundoff / tol])
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(idx, analytic, numeric, rel, tol, name=name, roundoff=roundoff)


# --------------------------------------------------------------------------
# GRD1 binary grid format

GRD_MAGIC = b"GRD1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_grid(array, dtype=None) -> bytes:
    a = np.asarray(array)
    dtype = np.dtype(dtype or (np.float32 if a.dtype == np.float32 else np.float64))
    code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}.get(dtype)
    if code is None:
        raise ShapeError(f"GRD1 supports float32/float64, not {dtype}")
    if a.ndim == 0 or a.ndim > 255:
        raise ShapeError(f"GRD1 needs rank 1..255, got {a.ndim}")
    buf = io.BytesIO()
    buf.write(GRD_MAGIC)
    buf.write(struct.pack("<BB", code, a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype=_DTYPE_CODES[code]).tobytes())
    return buf.getvalue()


def decode_grid(data: bytes) -> np.ndarray:
    if data[:4] != GRD_MAGIC:
        raise ShapeError("not a GRD1 blob (bad magic)")
    code, rank = struct.unpack_from("<BB", data, 4)
    if code not in _DTYPE_CODES:
        raise ShapeError(f"unknown GRD1 dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", data, 6)
    offset = 6 + 4 * rank
    dtype = _DTYPE_CODES[code]
    count = math.prod(shape)
    if len(data) - offset != count * dtype.itemsize:
        raise ShapeError(f"GRD1 payload size mismatch for shape {shape}")
    out = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
    return out.astype(dtype.newbyteorder("="))


def save_grid(path: str | PathLike, array, dtype=None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_grid(array, dtype))


def load_grid(path: str | PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_grid(fh.read())
