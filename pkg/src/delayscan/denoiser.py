"""Hybrid CNN / pixel-transformer U-shaped noise predictor."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigError, DivergenceError, ShapeError
from .init import init_parameters
from .numerics import RngStream, load_grid, save_grid
from .time_embedding import EMBED_MODES, FiLM, TimeCombiner, TimeConverter


@dataclass
class DenoiserConfig:
    stages: int = 3
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    n_res: int = 2
    n_trans: int = 2
    time_dim: int = 64
    heads: int = 4
    embed_mode: str = "ec"
    use_transformer: bool = True
    use_delay_time: bool = True            # False feeds a constant t_d = 0
    groups: int = 4
    transformer_width: int | None = None   # None: D equals the stage channel count

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.validate()

    @classmethod
    def full_scale(cls, **overrides) -> "DenoiserConfig":
        kw = dict(stages=5, base_channels=32, channel_multipliers=(1, 2, 2, 4, 4))
        kw.update(overrides)
        return cls(**kw)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def width(self, channels: int) -> int:
        return self.transformer_width or channels

    def validate(self) -> None:
        if self.stages < 1 or len(self.channel_multipliers) != self.stages:
            raise ConfigError(f"need one channel multiplier per stage ({self.stages}), "
                              f"got {self.channel_multipliers}")
        if self.embed_mode not in EMBED_MODES:
            raise ConfigError(f"embed_mode must be one of {EMBED_MODES}, got {self.embed_mode!r}")
        if self.time_dim <= 0 or self.time_dim % 2:
            raise ConfigError(f"time_dim must be positive and even, got {self.time_dim}")
        if self.n_res < 1 or self.n_trans < 0:
            raise ConfigError("need n_res >= 1 and n_trans >= 0")
        for c in self.channels:
            if c % self.groups:
                raise ConfigError(f"channel count {c} not divisible by {self.groups} groups")
            d = self.width(c)
            if d % self.heads or d % self.groups:
                raise ConfigError(f"transformer width {d} not divisible by heads={self.heads} "
                                  f"and groups={self.groups}")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# blocks


class ResidualBlock(nn.Module):
    """conv -> GN -> scale/shift -> SiLU -> conv -> GN -> SiLU, plus skip."""

    kind = "res"

    def __init__(self, c_in: int, c_out: int, N: int, groups: int = 4):
        super().__init__()
        if c_out % groups:
            raise ConfigError(f"{c_out} channels not divisible by {groups} groups")
        self.conv1 = nn.Conv2d(c_in, c_out, 3, 1, 1)
        self.norm1 = nn.GroupNorm(groups, c_out)
        self.film = FiLM(N, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, time_vec):
        h = F.silu(self.film(self.norm1(self.conv1(x)), time_vec))
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


def residual_block_forward(M, time_vec, block: ResidualBlock):
    """Unbatched convenience: ``M`` is ``(C_in, H, W)``, ``time_vec`` ``(N,)``."""
    return block(M[None], time_vec[None])[0]


def pixel_attention(x_s, T_u, w_q, w_k, w_v, w_t, b_t=None, heads: int = 1):
    """Multi-head self-attention over pixel tokens plus one appended time token.

    ``x_s`` is ``(B, L, D)`` (or ``(L, D)``). The projected time token
    ``W_t . T_u`` is concatenated as token ``L + 1`` to the query, key and
    value sequences; its output row is discarded. Returns the ``(B, L, D)``
    result and the ``(B, heads, L + 1, L + 1)`` attention weights.
    """
    unbatched = x_s.ndim == 2
    if unbatched:
        x_s, T_u = x_s[None], T_u[None]
    B, L, D = x_s.shape
    if D % heads:
        raise ConfigError(f"width {D} not divisible by {heads} heads")
    tok = F.linear(T_u, w_t, b_t)[:, None, :]
    q = torch.cat([F.linear(x_s, w_q), tok], dim=1)
    k = torch.cat([F.linear(x_s, w_k), tok], dim=1)
    v = torch.cat([F.linear(x_s, w_v), tok], dim=1)
    dh = D // heads

    def split(a):
        return a.reshape(B, L + 1, heads, dh).transpose(1, 2)

    scores = split(q) @ split(k).transpose(-1, -2) / math.sqrt(dh)
    weights = scores.softmax(dim=-1)
    out = (weights @ split(v)).transpose(1, 2).reshape(B, L + 1, D)[:, :L]
    if unbatched:
        return out[0], weights[0]
    return out, weights


class PixelTransformerBlock(nn.Module):
    """Pre-norm pixel-wise transformer layer with a time token inside attention."""

    kind = "trans"

    def __init__(self, channels: int, width: int, heads: int, N: int, groups: int = 4):
        super().__init__()
        if width % heads:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.proj_in = nn.Linear(channels, width)
        self.norm1 = nn.GroupNorm(groups, width)
        self.w_q = nn.Linear(width, width, bias=False)
        self.w_k = nn.Linear(width, width, bias=False)
        self.w_v = nn.Linear(width, width, bias=False)
        self.w_t = nn.Linear(N, width)
        self.attn_out = nn.Linear(width, width)
        self.norm2 = nn.GroupNorm(groups, width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.SiLU(), nn.Linear(4 * width, width))
        self.proj_out = nn.Linear(width, channels)
        self.trace: list | None = None
        self.name = ""

    @staticmethod
    def _gn(norm, tokens):
        return norm(tokens.transpose(1, 2)).transpose(1, 2)

    def attend(self, h, time_vec):
        if self.trace is None:
            B, L, D = h.shape
            tok = self.w_t(time_vec)[:, None, :]

            def heads(a):
                return a.reshape(B, L + 1, self.heads, D // self.heads).transpose(1, 2)

            q = heads(torch.cat([self.w_q(h), tok], dim=1))
            k = heads(torch.cat([self.w_k(h), tok], dim=1))
            v = heads(torch.cat([self.w_v(h), tok], dim=1))
            out = F.scaled_dot_product_attention(q, k, v)
            return out.transpose(1, 2).reshape(B, L + 1, D)[:, :L]
        out, weights = pixel_attention(h, time_vec, self.w_q.weight, self.w_k.weight,
                                       self.w_v.weight, self.w_t.weight, self.w_t.bias, self.heads)
        row_sums = weights.detach().sum(dim=-1)
        self.trace.append({
            "block": self.name,
            "tokens_in": h.shape[1],
            "tokens_attention": weights.shape[-1],
            "tokens_out": out.shape[1],
            "row_sum_max_dev": float((row_sums - 1.0).abs().max()),
            "min_weight": float(weights.detach().min()),
        })
        return out

    def forward(self, M, time_vec):
        B, C, H, W = M.shape
        tokens = self.proj_in(M.flatten(2).transpose(1, 2))
        x_hat = self.attn_out(self.attend(self._gn(self.norm1, tokens), time_vec)) + tokens
        y = self.mlp(self._gn(self.norm2, x_hat)) + x_hat
        if y.shape[1] != H * W:
            raise ShapeError(f"{self.name}: {y.shape[1]} tokens leave the block, expected {H * W}")
        return self.proj_out(y).transpose(1, 2).reshape(B, C, H, W)


def transformer_block_forward(M, time_vec, block: PixelTransformerBlock):
    return block(M[None], time_vec[None])[0]


class SkippedBlock(nn.Module):
    """Stand-in for a disabled transformer block."""

    kind = "skip"

    def forward(self, x, time_vec):
        return x


class Downsample(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, 2, 1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, 1, 1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class OutputHead(nn.Module):
    def __init__(self, channels, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.conv = nn.Conv2d(channels, 1, 3, 1, 1)
        self.conv.zero_init = True

    def forward(self, x):
        return self.conv(F.silu(self.norm(x)))


# --------------------------------------------------------------------------
# the network


class HybridDenoiser(nn.Module):
    """Noise predictor ``eps_hat = f(Concat(x_e, x_t), t, t_d)``.

    Each encoder stage runs ``n_res`` residual blocks then ``n_trans``
    transformer blocks, then halves the resolution (except the last). The
    bottleneck is residual, transformer, residual. Decoder stages mirror the
    encoder, starting from a channel concatenation with the matching encoder
    output. Every time-conditioned block owns an index counted from 0 within
    its stage (encoder stage, bottleneck or decoder stage) in forward order;
    the ``ec`` mode alternates step/delay vectors on that index's parity.
    """

    def __init__(self, config: DenoiserConfig | None = None, rng: RngStream | None = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        N, g, ch = cfg.time_dim, cfg.groups, cfg.channels
        self.step_embed = TimeConverter(N)
        self.delay_embed = TimeConverter(N)
        self.combiner = TimeCombiner(N, cfg.embed_mode)
        self.stem = nn.Conv2d(2, ch[0], 3, 1, 1)
        self._count = 0
        self._stage_count = 0

        self.encoder = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for s, c in enumerate(ch):
            self.encoder.append(self._stage(c, c, f"enc{s}"))
            if s < cfg.stages - 1:
                self.downsample.append(Downsample(c, ch[s + 1]))
        c = ch[-1]
        self._stage_count = 0
        self.middle = nn.ModuleList([self._res(c, c, "mid.res0"), self._trans(c, "mid.trans0"),
                                     self._res(c, c, "mid.res1")])
        self.decoder = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for s in range(cfg.stages - 1, -1, -1):
            self.decoder.append(self._stage(2 * ch[s], ch[s], f"dec{s}"))
            if s > 0:
                self.upsample.append(Upsample(ch[s], ch[s - 1]))
        self.head = OutputHead(ch[0], g)
        self.n_blocks = self._count
        init_parameters(self, rng if rng is not None else RngStream(0))

    def _tag(self, block, name):
        block.index = self._stage_count
        block.name = f"{name}[{self._count}]"
        self._count += 1
        self._stage_count += 1
        return block

    def _res(self, c_in, c_out, name):
        cfg = self.config
        return self._tag(ResidualBlock(c_in, c_out, cfg.time_dim, cfg.groups), name)

    def _trans(self, c, name):
        cfg = self.config
        if not cfg.use_transformer:
            return self._tag(SkippedBlock(), name)
        return self._tag(PixelTransformerBlock(c, cfg.width(c), cfg.heads, cfg.time_dim, cfg.groups), name)

    def _stage(self, c_in, c_out, name):
        cfg = self.config
        self._stage_count = 0
        blocks = [self._res(c_in if i == 0 else c_out, c_out, f"{name}.res{i}") for i in range(cfg.n_res)]
        blocks += [self._trans(c_out, f"{name}.trans{i}") for i in range(cfg.n_trans)]
        return nn.ModuleList(blocks)

    def set_trace(self, trace: list | None) -> None:
        for m in self.modules():
            if isinstance(m, PixelTransformerBlock):
                m.trace = trace

    def time_vectors(self, t, t_d):
        return self.step_embed(t), self.delay_embed(t_d)

    def _run(self, blocks, h, T_u, Td_u):
        for block in blocks:
            h = block(h, self.combiner(T_u, Td_u, block.index))
            if not torch.isfinite(h).all():
                raise DivergenceError(f"non-finite activation after block {block.name}", where=block.name)
        return h

    def forward(self, c, t, t_d):
        if c.ndim != 4 or c.shape[1] != 2:
            raise ShapeError(f"expected a (B, 2, H, W) condition, got {tuple(c.shape)}")
        factor = 2 ** (self.config.stages - 1)
        if c.shape[-1] % factor or c.shape[-2] % factor:
            raise ConfigError(f"spatial extent {tuple(c.shape[-2:])} not divisible by {factor}")
        B = c.shape[0]
        t = torch.as_tensor(t, dtype=torch.int64).expand(B)
        t_d = torch.as_tensor(t_d, dtype=torch.int64).expand(B)
        if not self.config.use_delay_time:
            t_d = torch.zeros_like(t_d)
        T_u, Td_u = self.time_vectors(t, t_d)

        h = self.stem(c)
        skips = []
        for s, stage in enumerate(self.encoder):
            h = self._run(stage, h, T_u, Td_u)
            skips.append(h)
            if s < len(self.downsample):
                h = self.downsample[s](h)
        h = self._run(self.middle, h, T_u, Td_u)
        for k, stage in enumerate(self.decoder):
            h = self._run(stage, torch.cat([h, skips.pop()], dim=1), T_u, Td_u)
            if k < len(self.upsample):
                h = self.upsample[k](h)
        return self.head(h)


def unet_forward(c, t, t_d, model: HybridDenoiser):
    """Unbatched convenience: ``(2, H, W)`` condition to ``(1, H, W)`` noise estimate."""
    return model(c[None], torch.tensor([t]), torch.tensor([t_d]))[0]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# weight checkpoints


def _config_lines(config: DenoiserConfig) -> list[str]:
    out = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        out.append(f"{f.name}={v}")
    return out


def parse_denoiser_config(lines: dict[str, str]) -> DenoiserConfig:
    kw = {}
    for f in fields(DenoiserConfig):
        if f.name not in lines:
            continue
        raw = lines[f.name]
        if f.name == "channel_multipliers":
            kw[f.name] = tuple(int(x) for x in raw.split(","))
        elif f.name in ("use_transformer", "use_delay_time"):
            kw[f.name] = raw == "True"
        elif f.name == "embed_mode":
            kw[f.name] = raw
        elif f.name == "transformer_width":
            kw[f.name] = None if raw == "None" else int(raw)
        else:
            kw[f.name] = int(raw)
    return DenoiserConfig(**kw)


def save_weights(model: HybridDenoiser, directory, extra: dict[str, str] | None = None) -> None:
    """Manifest (plain text ``name shape file dtype``) plus one GRD1 blob per tensor."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["[config]"] + _config_lines(model.config)
    if extra:
        lines += ["[extra]"] + [f"{k}={v}" for k, v in extra.items()]
    lines.append("[params]")
    for name, p in model.state_dict().items():
        a = p.detach().cpu().numpy()
        fname = f"{name}.grd"
        save_grid(d / fname, a)
        shape = ",".join(str(s) for s in a.shape) or "scalar"
        lines.append(f"{name} {shape} {fname} {'f32' if a.dtype == np.float32 else 'f64'}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(directory) -> tuple[dict, dict, list]:
    config, extra, params, section = {}, {}, [], None
    for line in (Path(directory) / "manifest.txt").read_text().splitlines():
        if line.startswith("["):
            section = line.strip("[]")
        elif section == "config":
            k, v = line.split("=", 1)
            config[k] = v
        elif section == "extra":
            k, v = line.split("=", 1)
            extra[k] = v
        elif section == "params" and line:
            name, shape, fname, dtype = line.split()
            params.append((name, shape, fname, dtype))
    return config, extra, params


def load_weights(directory, dtype=None) -> tuple[HybridDenoiser, dict]:
    d = Path(directory)
    config, extra, params = read_manifest(d)
    cfg = parse_denoiser_config(config)
    model = HybridDenoiser(cfg)
    dtypes = {"f32": torch.float32, "f64": torch.float64}
    model.to(dtype or dtypes[params[0][3]])
    state = {}
    for name, shape, fname, _ in params:
        a = load_grid(d / fname)
        expect = tuple(int(s) for s in shape.split(",")) if shape != "scalar" else ()
        if a.shape != expect:
            raise ShapeError(f"{name}: blob shape {a.shape} != manifest shape {expect}")
        state[name] = torch.from_numpy(a.copy())
    model.load_state_dict(state)
    return model, extra
