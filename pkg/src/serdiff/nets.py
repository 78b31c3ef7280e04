"""Encoder-decoder networks: the student segmenter and the teacher's noise predictor.

Both share one U-Net body. The segmenter reads ``concat(modalities, error_slot)``;
the denoiser reads ``concat(c, x_t)`` with the same channel layout, plus a
sinusoidal time embedding added at the bottleneck.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .phantom import N_CLASSES, N_MODALITIES

CHECKPOINT_FORMAT = "serdiff-checkpoint/1"


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = N_MODALITIES + N_CLASSES
    base_channels: int = 16
    depth: int = 3
    n_out_channels: int = N_CLASSES
    embed_dim: int = 64

    def __post_init__(self) -> None:
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        for name in ("in_channels", "base_channels", "n_out_channels", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** (self.depth - 1)


class FeatureBundle(NamedTuple):
    bottleneck: torch.Tensor  # [B, C_b, H / 2**depth, W / 2**depth]
    embedding: torch.Tensor  # [B, embed_dim]


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)

    def forward(self, x):
        x = F.silu(self.norm1(self.conv1(x)))
        return F.silu(self.norm2(self.conv2(x)))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class UNet(nn.Module):
    """U-Net whose bottleneck is exposed as a feature bundle."""

    def __init__(self, config: NetConfig, time_conditioned: bool = False):
        super().__init__()
        self.config = config
        self.time_conditioned = time_conditioned
        chans = [config.base_channels * 2**i for i in range(config.depth)]
        self.down = nn.ModuleList()
        cin = config.in_channels
        for ch in chans:
            self.down.append(ConvBlock(cin, ch))
            cin = ch
        c_b = config.bottleneck_channels
        self.mid = ConvBlock(chans[-1], c_b)
        self.embed = nn.Linear(c_b, config.embed_dim)
        if time_conditioned:
            self.time_mlp = nn.Sequential(
                nn.Linear(config.embed_dim, config.embed_dim),
                nn.SiLU(),
                nn.Linear(config.embed_dim, c_b),
            )
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        cin = c_b
        for ch in reversed(chans):
            self.up.append(nn.ConvTranspose2d(cin, ch, 2, stride=2))
            self.dec.append(ConvBlock(2 * ch, ch))
            cin = ch
        self.head = nn.Conv2d(chans[0], config.n_out_channels, 1)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected input [B, {self.config.in_channels}, H, W], got {tuple(x.shape)}"
            )
        step = 2**self.config.depth
        if x.shape[-1] % step or x.shape[-2] % step:
            raise ValueError(f"spatial size must be divisible by {step}")

    def encode(self, x: torch.Tensor) -> tuple[list[torch.Tensor], FeatureBundle]:
        self._check_input(x)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        b = self.mid(x)
        z = self.embed(b.mean(dim=(2, 3)))
        return skips, FeatureBundle(b, z)

    def decode(self, h: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            h = dec(torch.cat([up(h), skip], dim=1))
        return self.head(h)


class Segmenter(UNet):
    def __init__(self, config: NetConfig):
        super().__init__(config, time_conditioned=False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, FeatureBundle]:
        """``x`` is ``concat(modalities, error_slot)``; returns (logits, features)."""
        skips, feats = self.encode(x)
        return self.decode(feats.bottleneck, skips), feats


class Denoiser(UNet):
    def __init__(self, config: NetConfig, n_steps: int):
        super().__init__(config, time_conditioned=True)
        self.n_steps = n_steps
        # Full-resolution path from the raw input into the finest skip, so the
        # decoder sees x_t directly even when the encoder is held fixed.
        self.stem = ConvBlock(config.in_channels, config.base_channels)

    def _time(self, t, batch: int, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(batch)
        if t.min() < 1 or t.max() > self.n_steps:
            raise ValueError(f"timestep outside [1, {self.n_steps}]")
        emb = timestep_embedding(t, self.config.embed_dim).to(like.dtype)
        return self.time_mlp(emb)

    def features(self, x_t: torch.Tensor, t, c: torch.Tensor) -> tuple[list, FeatureBundle, torch.Tensor]:
        if x_t.shape[0] != c.shape[0] or x_t.shape[-2:] != c.shape[-2:]:
            raise ValueError("x_t and c must share batch and spatial dimensions")
        x = torch.cat([c, x_t], dim=1)
        skips, feats = self.encode(x)
        skips = [skips[0] + self.stem(x), *skips[1:]]
        temb = self._time(t, x_t.shape[0], x_t)
        return skips, feats, feats.bottleneck + temb[:, :, None, None]

    def forward(self, x_t: torch.Tensor, t, c: torch.Tensor) -> torch.Tensor:
        """Predicted noise for ``x_t`` at step ``t`` given conditioning ``c``."""
        skips, _, h = self.features(x_t, t, c)
        return self.decode(h, skips)


def init_params(net: nn.Module, seed: int) -> nn.Module:
    """Re-initialize in place: fan-in scaled normal weights, zero biases, unit norms."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in net.named_parameters():
            owner = net.get_submodule(name.rsplit(".", 1)[0])
            if isinstance(owner, nn.GroupNorm):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                if isinstance(owner, nn.ConvTranspose2d):
                    fan_in = p.shape[0] * p[0, 0].numel()
                else:
                    fan_in = p[0].numel()
                std = math.sqrt(2.0 / fan_in)
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return net


def build_segmenter(config: NetConfig | None = None, seed: int = 0) -> Segmenter:
    return init_params(Segmenter(config or NetConfig()), seed)


def build_denoiser(config: NetConfig | None = None, n_steps: int = 100, seed: int = 0) -> Denoiser:
    return init_params(Denoiser(config or NetConfig(), n_steps), seed)


def fingerprint(net: nn.Module) -> str:
    """SHA-256 over every named parameter and buffer, in a fixed order."""
    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def n_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def save_checkpoint(net: nn.Module, path: str | Path, **meta) -> dict:
    """Write ``<path>.pt`` (state dict) and ``<path>.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), path.with_suffix(".pt"))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": type(net).__name__,
        "config": asdict(net.config),
        "fingerprint": fingerprint(net),
        **meta,
    }
    if isinstance(net, Denoiser):
        manifest["n_steps"] = net.n_steps
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_checkpoint(path: str | Path) -> nn.Module:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = NetConfig(**manifest["config"])
    if manifest["kind"] == "Denoiser":
        net: nn.Module = Denoiser(config, manifest["n_steps"])
    else:
        net = Segmenter(config)
    net.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
    if fingerprint(net) != manifest["fingerprint"]:
        raise ValueError(f"fingerprint mismatch for checkpoint {path}")
    return net
