"""UNet noise predictor over (channel, frequency, frame) spectrogram tensors.

All convolutions act along the frame axis only (kernel extent 1 along frequency);
the single down/up-sampling stage halves and restores the frame count.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DomainError, NumericalError


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 12
    base_channels: int = 32
    kernel: int = 3
    attention_heads: int = 4
    embedding_dim: int = 128
    norm_groups: int = 8

    def __post_init__(self):
        c = self.base_channels
        if c % self.attention_heads or c % self.norm_groups:
            raise ConfigError("base_channels must be divisible by attention_heads and norm_groups")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel extent must be odd for same-padding")
        if self.embedding_dim % 2:
            raise ConfigError("embedding_dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)


def time_embedding(t, dim: int = 128):
    """Sinusoidal step embedding: dim/2 sines then dim/2 cosines of t / 10000**(i/dim)."""
    if isinstance(t, torch.Tensor):
        tt = t.to(torch.float64).reshape(-1, 1)
    else:
        tt = torch.as_tensor(np.asarray(t, dtype=np.float64)).reshape(-1, 1)
    if torch.any(tt < 0):
        raise DomainError("step index must be non-negative")
    i = torch.arange(dim // 2, dtype=torch.float64)
    arg = tt / 10000.0 ** (i / dim)
    emb = torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)
    if not isinstance(t, torch.Tensor) and np.ndim(t) == 0:
        return emb[0]
    return emb


def _tconv(cin, cout, k, **kw):
    return nn.Conv2d(cin, cout, (1, k), padding=(0, k // 2), **kw)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, cfg: UNetConfig):
        super().__init__()
        self.norm1 = nn.GroupNorm(cfg.norm_groups, cin)
        self.conv1 = _tconv(cin, cout, cfg.kernel)
        self.emb = nn.Linear(cfg.embedding_dim, cout)
        self.norm2 = nn.GroupNorm(cfg.norm_groups, cout)
        self.conv2 = _tconv(cout, cout, cfg.kernel)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Multi-head self-attention over all (frequency, frame) positions."""

    def __init__(self, channels, cfg: UNetConfig):
        super().__init__()
        self.heads = cfg.attention_heads
        self.norm = nn.GroupNorm(cfg.norm_groups, channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def _qkv(self, x):
        b, c, f, n = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = self.qkv(h).reshape(b, f * n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        return q, k, v

    def attention_weights(self, x):
        """(B, heads, positions, positions) row-stochastic weights; for inspection."""
        q, k, _ = self._qkv(x)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)

    def forward(self, x):
        b, c, f, n = x.shape
        q, k, v = self._qkv(x)
        a = F.scaled_dot_product_attention(q, k, v)
        a = a.transpose(1, 2).reshape(b, f * n, c)
        return x + self.proj(a).transpose(1, 2).reshape(b, c, f, n)


class Stage(nn.Module):
    """Two (ResNet, attention) pairs in series."""

    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.res = nn.ModuleList([ResBlock(cin, cout, cfg), ResBlock(cout, cout, cfg)])
        self.attn = nn.ModuleList([AttentionBlock(cout, cfg), AttentionBlock(cout, cfg)])

    def forward(self, x, emb):
        for res, attn in zip(self.res, self.attn):
            x = attn(res(x, emb))
        return x


class DenoiserModel(nn.Module):
    def __init__(self, config: UNetConfig | None = None, T: int | None = None, seed: int = 0):
        super().__init__()
        cfg = config or UNetConfig()
        self.config = cfg
        self.T = T
        c, e = cfg.base_channels, cfg.embedding_dim
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.inp = _tconv(cfg.in_channels, c, cfg.kernel)
        self.down = Stage(c, c, cfg)
        self.downsample = _tconv(c, 2 * c, cfg.kernel, stride=(1, 2))
        self.mid = Stage(2 * c, 2 * c, cfg)
        self.upsample = nn.ConvTranspose2d(2 * c, c, (1, 4), stride=(1, 2), padding=(0, 1))
        self.up = Stage(2 * c, c, cfg)
        self.out_norm = nn.GroupNorm(cfg.norm_groups, c)
        self.out = _tconv(c, cfg.in_channels, cfg.kernel)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0, zero_output: bool = True):
        gen = torch.Generator().manual_seed(int(seed))
        for name, mod in self.named_modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                if isinstance(mod, nn.ConvTranspose2d):
                    fan_in = mod.weight.shape[0] * mod.weight[0, 0].numel()
                else:
                    fan_in = mod.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    mod.bias.zero_()
        if zero_output:
            with torch.no_grad():
                self.out.weight.zero_()
                self.out.bias.zero_()

    def forward(self, x, t):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[-1] % 2:
            raise DomainError(f"expected (B, {self.config.in_channels}, bins, even frames), got {tuple(x.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        if torch.any(t < 0) or (self.T is not None and torch.any(t >= self.T)):
            raise DomainError(f"step outside [0, {self.T})")
        emb = self.time_mlp(time_embedding(t, self.config.embedding_dim).to(x.dtype))
        h = self.inp(x)
        skip = self.down(h, emb)
        h = self.mid(self.downsample(skip), emb)
        h = torch.cat([self.upsample(h), skip], dim=1)
        h = self.up(h, emb)
        return self.out(F.silu(self.out_norm(h)))

    def parameter_index(self) -> dict[str, tuple[tuple[int, ...], int]]:
        """name -> (shape, offset) into :meth:`flat_parameters`."""
        index, offset = {}, 0
        for name, p in self.named_parameters():
            index[name] = (tuple(p.shape), offset)
            offset += p.numel()
        return index

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def load_flat(self, flat: torch.Tensor):
        with torch.no_grad():
            for name, (shape, off) in self.parameter_index().items():
                p = self.get_parameter(name)
                p.copy_(flat[off:off + p.numel()].reshape(shape))


def parameter_count(config: UNetConfig | None = None) -> int:
    model = DenoiserModel(config)
    return sum(shape_size(s) for s, _ in model.parameter_index().values())


def shape_size(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def gradient(model: nn.Module, loss_fn, batch) -> torch.Tensor:
    """Flat reverse-mode gradient of ``loss_fn(model(x, t), target)`` w.r.t. all parameters."""
    x, t, target = batch
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model(x, t), target)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()}")
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])
