"""Pace-generator: global structure mining (GSM) and pixel weighting (PW) branches.

The GSM branch scores a whole mask as annotated (real) or predicted (fake);
its intermediate feature maps feed the PW branch, which decodes them into a
per-pixel reliability map in [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

REAL = 1  # index of the "annotated" logit; index 0 is "predicted"


@dataclass(frozen=True)
class PaceConfig:
    image_size: int = 128
    # GSM channels are width × (1, 2, 4, 8); 64 gives 64/128/256/512
    width: int = 64
    slope: float = 0.2
    seed: int = 0


class GsmOutput(NamedTuple):
    logits: torch.Tensor  # B×2
    features: list  # 4 maps, B×C_k×H/2^(k+1)×W/2^(k+1)


def _check_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    if mask.dim() == 2:
        mask = mask[None]
    if mask.dim() != 3:
        raise ValueError(f"expected B×H×W mask, got {tuple(mask.shape)}")
    h, w = mask.shape[-2:]
    if h % 16 or w % 16:
        raise ValueError(f"mask size {h}×{w} is not divisible by 16")
    if (h, w) != (size, size):
        raise ValueError(f"mask size {h}×{w} does not match configured {size}×{size}")
    return mask


class GsmBranch(nn.Module):
    def __init__(self, width: int = 64, slope: float = 0.2):
        super().__init__()
        chans = [1] + [width * m for m in (1, 2, 4, 8)]
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, kernel_size=4, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:])
        )
        self.slope = slope
        self.fc = nn.Linear(chans[-1], 2)

    def forward(self, mask: torch.Tensor) -> GsmOutput:
        x = mask[:, None]
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.slope)
            feats.append(x)
        pooled = x.sum(dim=(2, 3))  # global sum pooling
        return GsmOutput(self.fc(pooled), feats)


class _UpBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, slope: float):
        super().__init__()
        self.conv = nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1)
        self.slope = slope

    def forward(self, x, skip=None):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return F.leaky_relu(self.conv(x), self.slope)


class PwBranch(nn.Module):
    """Four 2× upsampling blocks; the first three concatenate the GSM map of
    matching resolution, the last one returns to input resolution."""

    def __init__(self, width: int = 64, slope: float = 0.2):
        super().__init__()
        g = [width * m for m in (1, 2, 4, 8)]
        d = [width, max(width // 2, 1), max(width // 4, 1), max(width // 4, 1)]
        self.blocks = nn.ModuleList([
            _UpBlock(g[3], g[2], d[0], slope),
            _UpBlock(d[0], g[1], d[1], slope),
            _UpBlock(d[1], g[0], d[2], slope),
            _UpBlock(d[2], 0, d[3], slope),
        ])
        self.head = nn.Conv2d(d[3], 1, 3, padding=1)

    def forward(self, features) -> torch.Tensor:
        if len(features) != 4:
            raise ValueError(f"PW branch needs 4 GSM feature maps, got {len(features)}")
        f1, f2, f3, f4 = features
        x = self.blocks[0](f4, f3)
        x = self.blocks[1](x, f2)
        x = self.blocks[2](x, f1)
        x = self.blocks[3](x)
        return torch.sigmoid(self.head(x))[:, 0]


class PaceGenerator(nn.Module):
    """Holds the GSM parameters (``gsm``) and the PW parameters (``pw``)."""

    def __init__(self, cfg: PaceConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.gsm = GsmBranch(cfg.width, cfg.slope)
            self.pw = PwBranch(cfg.width, cfg.slope)

    def gsm_forward(self, mask: torch.Tensor) -> GsmOutput:
        out = self.gsm(_check_mask(mask, self.cfg.image_size))
        size = self.cfg.image_size
        for k, f in enumerate(out.features):
            assert f.shape[-1] == size >> (k + 1) and f.shape[-2] == size >> (k + 1)
        return out

    def pw_forward(self, features) -> torch.Tensor:
        return self.pw(features)

    def realness(self, mask: torch.Tensor) -> torch.Tensor:
        """Softmax probability that each mask is a human annotation."""
        return real_probability(self.gsm_forward(mask).logits)

    @torch.no_grad()
    def weigh(self, mask: torch.Tensor) -> torch.Tensor:
        """Reliability map for ``mask``; detached from every graph."""
        return self.pw_forward(self.gsm_forward(mask.detach()).features)


def real_probability(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)[..., REAL]


class PixelDiscriminator(nn.Module):
    """Fully convolutional per-pixel real/fake discriminator (pixel-GAN ablation)."""

    def __init__(self, cfg: PaceConfig):
        super().__init__()
        self.cfg = cfg
        chans = [1] + [cfg.width * m for m in (1, 2, 4, 8)]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.convs = nn.ModuleList(
                nn.Conv2d(a, b, 4, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:])
            )
            self.classifier = nn.Conv2d(chans[-1], 1, 4, stride=2, padding=1)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        mask = _check_mask(mask, self.cfg.image_size)
        x = mask[:, None]
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.cfg.slope)
        x = self.classifier(x)
        x = F.interpolate(x, size=mask.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(x)[:, 0]

    @torch.no_grad()
    def weigh(self, mask: torch.Tensor) -> torch.Tensor:
        return self(mask.detach())


def save_pace(model: nn.Module, path: str | Path) -> None:
    torch.save({"pace_config": asdict(model.cfg), "pace_kind": type(model).__name__,
                "pace": model.state_dict()}, path)


def load_pace(path_or_ckpt, map_location="cpu") -> nn.Module:
    ckpt = path_or_ckpt
    if not isinstance(ckpt, dict):
        ckpt = torch.load(path_or_ckpt, map_location=map_location, weights_only=False)
    cls = {"PaceGenerator": PaceGenerator, "PixelDiscriminator": PixelDiscriminator}[ckpt["pace_kind"]]
    model = cls(PaceConfig(**ckpt["pace_config"]))
    model.load_state_dict(ckpt["pace"])
    return model
