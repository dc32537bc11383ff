"""Noise-prediction U-Net over the (N, N) pair grid with D channels."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import NoiseSchedule

COND_MODES = ("concat", "add", "none")


@dataclass
class DenoiserConfig:
    d_embed: int = 128
    depth: int = 3
    base_width: int = 64
    max_width: int = 256
    cond_mode: str = "concat"
    time_dim: int = 128
    groups: int = 8
    # per-step linear map from the (whitened) input straight to the output
    input_skip: bool = True
    # ridge added to the condition block before whitening
    whiten_ridge: float = 1e-2

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(min(self.base_width * 2**level, self.max_width) for level in range(self.depth))

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.cond_mode not in COND_MODES:
            raise ValueError(f"cond_mode must be one of {COND_MODES}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")


def timestep_embedding(k: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = k.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=1)


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int) -> None:
        super().__init__()
        self.norm1 = _norm(c_in, groups)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = _norm(c_out, groups)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """eps(A_k, k, condition) for tensors shaped (N, N, D) or (B, N, N, D).

    With ``cond_mode="concat"`` the condition is stacked on the channel axis
    (2D input channels) and projected back to the base width; a missing
    condition is read as zeros.

    Given a schedule, the stacked input is whitened per step with fixed
    buffers (identity until ``fit_whitening`` is called) and a zero-initialised
    per-step linear bypass is added to the output.
    """

    def __init__(self, config: DenoiserConfig | None = None, schedule: NoiseSchedule | None = None) -> None:
        super().__init__()
        config = config or DenoiserConfig()
        config.validate()
        self.config = config
        widths = config.widths
        d, t_dim, g = config.d_embed, config.time_dim, config.groups
        c_in = 2 * d if config.cond_mode == "concat" else d
        self.inp = nn.Conv2d(c_in, widths[0], 1)
        self.cond_proj = nn.Conv2d(d, widths[0], 1) if config.cond_mode == "add" else None
        self.time_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c = widths[0]
        for level, w in enumerate(widths):
            self.down.append(ResBlock(c, w, t_dim, g))
            c = w
            if level < len(widths) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = ResBlock(c, c, t_dim, g)
        self.up = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(ResBlock(c + w, w, t_dim, g))
            c = w
        self.out_norm = _norm(c, g)
        self.out = nn.Conv2d(c, d, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

        self.schedule = schedule
        self.in_skip = None
        if schedule is not None:
            steps = schedule.K + 1  # row 0 unused, steps start at 1
            self.register_buffer("whiten", torch.eye(c_in).repeat(steps, 1, 1))
            self.register_buffer("whiten_mean", torch.zeros(steps, c_in))
            if config.input_skip:
                self.in_skip = nn.Parameter(torch.zeros(steps, d, c_in))

    @torch.no_grad()
    def fit_whitening(self, a0: torch.Tensor, condition: torch.Tensor | None = None) -> None:
        """Estimate per-step whitening from clean entries.

        ``a0`` and ``condition`` are (M, D) rows of clean pair entries and the
        matching condition entries. For step k the stacked input has covariance
        [[ab*S + (1-ab)*I, sqrt(ab)*X], [sqrt(ab)*X^T, S_c]], which is computed
        in closed form from the clean statistics.
        """
        if self.schedule is None:
            raise RuntimeError("whitening needs a schedule")
        d = self.config.d_embed
        rows = a0.to(torch.float64)
        if self.config.cond_mode == "concat":
            cond = torch.zeros_like(rows) if condition is None else condition.to(torch.float64)
            rows = torch.cat([rows, cond], dim=1)
        mean = rows.mean(0)
        cov = torch.cov(rows.T).reshape(rows.shape[1], rows.shape[1])
        eye_d = torch.eye(d, dtype=torch.float64)
        for k in range(1, self.schedule.K + 1):
            ab = float(self.schedule.alpha_bar[k - 1])
            c = cov.clone()
            c[:d, :d] = ab * cov[:d, :d] + (1 - ab) * eye_d
            c[:d, d:] *= math.sqrt(ab)
            c[d:, :d] *= math.sqrt(ab)
            c[d:, d:] += self.config.whiten_ridge * torch.eye(c.shape[0] - d, dtype=torch.float64)
            evals, evecs = torch.linalg.eigh(c)
            self.whiten[k] = (evecs @ torch.diag(evals.clamp_min(1e-8).rsqrt()) @ evecs.T).to(self.whiten.dtype)
            m = mean.clone()
            m[:d] *= math.sqrt(ab)
            self.whiten_mean[k] = m.to(self.whiten_mean.dtype)

    def forward(self, a_k: torch.Tensor, k, condition: torch.Tensor | None = None) -> torch.Tensor:
        unbatched = a_k.dim() == 3
        if unbatched:
            a_k = a_k[None]
            condition = None if condition is None else condition[None]
        batch = a_k.shape[0]
        k = torch.as_tensor(k).reshape(-1)
        if k.numel() == 1:
            k = k.expand(batch)
        dtype = self.inp.weight.dtype
        x = a_k.permute(0, 3, 1, 2).to(dtype)
        cond = None if condition is None else condition.permute(0, 3, 1, 2).to(dtype)
        if self.config.cond_mode == "concat":
            x = torch.cat([x, torch.zeros_like(x) if cond is None else cond], dim=1)
        if self.schedule is not None:
            idx = k.long().clamp(0, self.whiten.shape[0] - 1)
            x = torch.einsum("boi,bihw->bohw", self.whiten[idx], x - self.whiten_mean[idx][:, :, None, None])
        h = self.inp(x)
        if self.cond_proj is not None and cond is not None:
            h = h + self.cond_proj(cond)
        temb = self.time_mlp(timestep_embedding(k, self.config.time_dim).to(dtype))

        skips = []
        for level, block in enumerate(self.down):
            h = block(h, temb)
            skips.append(h)
            if level < len(self.downsample):
                h = self.downsample[level](h)
        h = self.mid(h, temb)
        for block in self.up:
            skip = skips.pop()
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
        out = self.out(F.silu(self.out_norm(h)))
        if self.in_skip is not None:
            out = out + torch.einsum("boi,bihw->bohw", self.in_skip[idx], x)
        out = out.permute(0, 2, 3, 1).to(a_k.dtype)
        return out[0] if unbatched else out


def parameter_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
