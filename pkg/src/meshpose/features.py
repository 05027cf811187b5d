"""Frozen convolutional feature extractors for the appearance synthesis loss.

The production extractor is pretrained VGG-19; `tiny_extractor` builds the
same 5-block conv topology with small random (but seeded, hence reproducible)
weights so the full pipeline runs hermetically without downloaded weights.
Pooling is average rather than max: smoother gradients when optimizing the
image itself, following common practice in gram-matching synthesis code.
"""

from __future__ import annotations

import os
from pathlib import Path

import torch
import torch.nn as nn

VGG19_CHANNELS = (64, 128, 256, 512, 512)
TINY_CHANNELS = (8, 16, 24, 32, 32)
_CONVS_PER_BLOCK = (2, 2, 4, 4, 4)

# First conv of each block: the default layer set for the synthesis loss.
DEFAULT_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")

CACHE_ENV_VAR = "EP_CACHE_DIR"

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureExtractor(nn.Module):
    """VGG-19-shaped conv stack exposing named per-layer activations.

    Inputs are (B, 3, H, W) float tensors in [0, 1]; the stored mean/std are
    applied before the first conv. All parameters are frozen.
    """

    def __init__(self, channels=VGG19_CHANNELS, mean=(0.5,) * 3, std=(0.5,) * 3):
        super().__init__()
        self.convs = nn.ModuleDict()
        self._order: list[str] = []
        c_in = 3
        for block, (c_out, n_convs) in enumerate(zip(channels, _CONVS_PER_BLOCK), start=1):
            for k in range(1, n_convs + 1):
                self.convs[f"conv{block}_{k}"] = nn.Conv2d(c_in, c_out, 3, padding=1)
                self._order.append(f"conv{block}_{k}")
                c_in = c_out
            self._order.append(f"pool{block}")
        self.pool = nn.AvgPool2d(2, 2)
        self.register_buffer("input_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(std).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)

    def layer_names(self) -> list[str]:
        return [n for n in self._order if n.startswith("conv")]

    def forward(self, x: torch.Tensor, layers) -> dict[str, torch.Tensor]:
        wanted = set(layers)
        unknown = wanted - set(self.layer_names())
        if unknown:
            raise ValueError(f"unknown layers {sorted(unknown)}; available: {self.layer_names()}")
        out: dict[str, torch.Tensor] = {}
        x = (x - self.input_mean) / self.input_std
        for name in self._order:
            if name.startswith("pool"):
                x = self.pool(x)
            else:
                x = torch.relu(self.convs[name](x))
            if name in wanted:
                out[name] = x
                if len(out) == len(wanted):
                    break
        return out


def tiny_extractor(seed: int = 0, channels=TINY_CHANNELS) -> FeatureExtractor:
    """Small random-weight extractor with the full 5-block topology.

    Deterministic for a given seed; the positive bias keeps ReLU activations
    alive through the deeper blocks.
    """
    ext = FeatureExtractor(channels=channels)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name in ext.layer_names():
            conv = ext.convs[name]
            w = torch.empty_like(conv.weight)
            nn.init.kaiming_normal_(w, generator=gen)
            conv.weight.copy_(w)
            conv.bias.fill_(0.05)
    ext.eval()
    return ext


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "meshpose"


def vgg19_extractor(cache_dir=None) -> FeatureExtractor:
    """Pretrained VGG-19 features (torchvision weights, cached on first use)."""
    import torchvision.models as tvm  # heavyweight import kept local

    cache = Path(cache_dir) if cache_dir else default_cache_dir()
    os.environ.setdefault("TORCH_HOME", str(cache))
    torch.hub.set_dir(str(cache / "hub"))
    try:
        vgg = tvm.vgg19(weights=tvm.VGG19_Weights.IMAGENET1K_V1)
    except Exception as exc:  # pragma: no cover - needs network/cache
        raise RuntimeError(
            "could not load pretrained VGG-19 weights; set "
            f"{CACHE_ENV_VAR} to a directory containing the torchvision cache, "
            "or use the hermetic `tiny` extractor"
        ) from exc
    ext = FeatureExtractor(channels=VGG19_CHANNELS, mean=_IMAGENET_MEAN, std=_IMAGENET_STD)
    src = [m for m in vgg.features if isinstance(m, nn.Conv2d)]
    with torch.no_grad():
        for name, conv in zip(ext.layer_names(), src):
            ext.convs[name].weight.copy_(conv.weight)
            ext.convs[name].bias.copy_(conv.bias)
    ext.eval()
    return ext


def build_extractor(spec: str = "vgg19", cache_dir=None) -> FeatureExtractor:
    """Build an extractor from a config string: "vgg19", "tiny" or "tiny:<seed>"."""
    if spec == "vgg19":
        return vgg19_extractor(cache_dir=cache_dir)
    if spec == "tiny":
        return tiny_extractor()
    if spec.startswith("tiny:"):
        return tiny_extractor(seed=int(spec.split(":", 1)[1]))
    raise ValueError(f"unknown extractor spec {spec!r} (use 'vgg19', 'tiny' or 'tiny:<seed>')")
