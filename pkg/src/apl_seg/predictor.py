"""Saliency task-predictor networks and pseudo-label binarization."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONES = ("desk_small", "deeplab_style")


@dataclass(frozen=True)
class PredictorConfig:
    backbone: str = "desk_small"
    image_size: int = 128
    seed: int = 0
    # desk_small only
    width: int = 16
    depth: int = 5
    # deeplab_style only
    pretrained: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")


class DeskSmall(nn.Module):
    """Tiny dilated FCN: two stride-2 convs, dilated context convs, 1×1 head.

    ``depth`` counts conv layers including the head (minimum 3).
    """

    def __init__(self, width: int = 16, depth: int = 5):
        super().__init__()
        if depth < 3:
            raise ValueError("desk_small needs at least 3 conv layers")
        layers = [nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
        ch = width
        if depth >= 4:
            layers += [nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            ch *= 2
        ctx = depth - 2 - (depth >= 4)
        for k in range(ctx):
            d = 2 ** (k + 1)
            layers += [nn.Conv2d(ch, 4 * width, 3, padding=d, dilation=d), nn.ReLU(inplace=True)]
            ch = 4 * width
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(ch, 1, 1)

    def forward(self, x):
        return self.head(self.features(x))


class _ASPP(nn.Module):
    # DeepLab-v2 classifier: parallel dilated 3×3 convs, summed
    def __init__(self, in_ch: int, rates=(6, 12, 18, 24)):
        super().__init__()
        self.branches = nn.ModuleList(nn.Conv2d(in_ch, 1, 3, padding=r, dilation=r) for r in rates)

    def forward(self, x):
        return sum(b(x) for b in self.branches)


class DeepLabStyle(nn.Module):
    """ResNet-101 with dilated last stages and a single-scale ASPP head."""

    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision.models import resnet101, ResNet101_Weights

        weights = ResNet101_Weights.IMAGENET1K_V1 if pretrained else None
        net = resnet101(weights=weights, replace_stride_with_dilation=[False, True, True])
        self.encoder = nn.Sequential(*list(net.children())[:-2])
        self.head = _ASPP(2048)

    def forward(self, x):
        return self.head(self.encoder(x))


class TaskPredictor(nn.Module):
    """Maps a B×3×H×W batch to B×H×W saliency probabilities in (0, 1)."""

    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            if cfg.backbone == "desk_small":
                self.net = DeskSmall(cfg.width, cfg.depth)
            else:
                self.net = DeepLabStyle(cfg.pretrained)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        size = self.cfg.image_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-2:] != (size, size):
            raise ValueError(f"expected B×3×{size}×{size} input, got {tuple(x.shape)}")
        out = self.net(x)
        out = F.interpolate(out, size=(size, size), mode="bilinear", align_corners=False)
        return out[:, 0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


def images_to_tensor(images, device=None, dtype=torch.float32) -> torch.Tensor:
    """Stack H×W×3 arrays into a B×3×H×W tensor."""
    arr = np.stack([np.asarray(im) for im in images])
    return torch.as_tensor(arr, dtype=dtype, device=device).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def predict(model: TaskPredictor, image: np.ndarray) -> np.ndarray:
    """Saliency map for a single H×W×3 image."""
    p = next(model.parameters())
    x = images_to_tensor([image], device=p.device, dtype=p.dtype)
    was_training = model.training
    model.eval()
    out = model(x)[0].cpu().numpy()
    model.train(was_training)
    return out


def binarize(saliency, tau: float = 0.5):
    """Pseudo-label: 1 where saliency >= tau. Works on arrays and tensors."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if isinstance(saliency, torch.Tensor):
        return (saliency >= tau).to(saliency.dtype)
    return (np.asarray(saliency) >= tau).astype(np.uint8)


def to_uint8(saliency: np.ndarray) -> np.ndarray:
    return np.round(np.clip(saliency, 0.0, 1.0) * 255).astype(np.uint8)


def save_predictor(model: TaskPredictor, path: str | Path) -> None:
    torch.save({"predictor_config": asdict(model.cfg), "predictor": model.state_dict()}, path)


def load_predictor(path: str | Path, map_location="cpu") -> TaskPredictor:
    ckpt = torch.load(path, map_location=map_location, weights_only=False)
    model = TaskPredictor(PredictorConfig(**ckpt["predictor_config"]))
    model.load_state_dict(ckpt["predictor"])
    return model
