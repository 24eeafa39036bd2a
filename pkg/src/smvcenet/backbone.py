"""Frozen feature extractor.

Four stages ``B1..B4`` are loaded (or randomly initialised) once and never
updated. From the stage outputs the extractor builds

* ``f_query`` -- a trainable 3x3 conv over ``F2 (+) F3`` with 256 channels,
* ``i_class`` -- frozen ``B4`` applied to the same concatenation, reached
  through a trainable 1x1 adapter because ``B4`` expects ``B3``'s width.

Two variants exist: ``pretrained_resnet50`` (torchvision layout, weights from
a local file) and ``tiny_random`` (four two-conv stages, seeded random
weights) for tests and desk-scale runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, LoadError, ShapeError

QUERY_CHANNELS = 256
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
VARIANTS = ("pretrained_resnet50", "tiny_random")
ALIGN_MODES = ("dilation", "resize_up", "resize_down")


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "tiny_random"
    weights_path: Optional[str] = None
    block4_out_channels: int = 64
    adapter_enabled: bool = True
    # How F2 and F3 reach a common grid. None picks the variant default:
    # dilation for ResNet50 (output stride 8), resize_down for the tiny net.
    align: Optional[str] = None
    tiny_widths: Tuple[int, int, int] = (16, 32, 64)
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown backbone variant {self.variant!r}", "model.variant")
        if self.variant == "pretrained_resnet50":
            if not self.weights_path:
                raise ConfigError("pretrained_resnet50 needs weights_path", "model.weights_path")
            if self.block4_out_channels != 2048:
                raise ConfigError("ResNet50 block-4 width is 2048", "model.block4_out_channels")
            if not self.adapter_enabled:
                raise ConfigError("ResNet50 block 4 cannot take F2+F3 without the adapter")
        if self.block4_out_channels <= 0 or self.block4_out_channels % 2:
            raise ConfigError("block4_out_channels must be positive and even",
                              "model.block4_out_channels")
        if self.align is not None and self.align not in ALIGN_MODES:
            raise ConfigError(f"align must be one of {ALIGN_MODES}", "model.align")

    @property
    def align_mode(self) -> str:
        if self.align is not None:
            return self.align
        return "dilation" if self.variant == "pretrained_resnet50" else "resize_down"


@dataclass
class FeatureBundle:
    f_query: torch.Tensor  # B x 256 x Hf x Wf
    i_class: torch.Tensor  # B x C x Hf x Wf
    spatial_stride: int

    def __post_init__(self):
        if self.f_query.shape[-2:] != self.i_class.shape[-2:]:
            raise ContractError("f_query and i_class disagree on the feature grid")
        if self.f_query.shape[-3] != QUERY_CHANNELS:
            raise ContractError(f"f_query must have {QUERY_CHANNELS} channels")


def _conv_relu(cin, cout, stride=1, dilation=1):
    return [nn.Conv2d(cin, cout, 3, stride, padding=dilation, dilation=dilation), nn.ReLU()]


def _tiny_stages(config: BackboneConfig, b4_in: int):
    w1, w2, w3 = config.tiny_widths
    c = config.block4_out_channels
    dilate = config.align_mode == "dilation"
    s3, d3 = (1, 2) if dilate else (2, 1)
    d4 = 2 if dilate else 1
    b1 = nn.Sequential(*_conv_relu(3, w1, 2), *_conv_relu(w1, w1))
    b2 = nn.Sequential(*_conv_relu(w1, w2, 2), *_conv_relu(w2, w2))
    b3 = nn.Sequential(*_conv_relu(w2, w3, s3, d3), *_conv_relu(w3, w3, 1, d3))
    b4 = nn.Sequential(*_conv_relu(b4_in, c, 1, d4), *_conv_relu(c, c, 1, d4))
    stride = 4 if config.align_mode in ("dilation", "resize_up") else 8
    return (b1, b2, b3, b4), (w2, w3), b4_in, stride


def _resnet50_stages(config: BackboneConfig):
    from torchvision.models import resnet50

    if config.align_mode != "dilation":
        raise ConfigError("pretrained_resnet50 supports align = dilation only", "model.align")
    net = resnet50(weights=None, replace_stride_with_dilation=[False, True, True])
    b1 = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1)
    return (b1, net.layer2, net.layer3, net.layer4), (512, 1024), 1024, 8


# torchvision resnet50 state-dict prefixes for each stage.
_RESNET_PREFIX = {"b1.0.": "conv1.", "b1.1.": "bn1.", "b1.4.": "layer1.",
                  "b2.": "layer2.", "b3.": "layer3.", "b4.": "layer4."}


class FrozenBackbone(nn.Module):
    def __init__(self, config: BackboneConfig, load_weights: bool = True):
        super().__init__()
        self.config = config
        if config.variant == "tiny_random":
            w2, w3 = config.tiny_widths[1:]
            b4_in = w3 if config.adapter_enabled else w2 + w3
            (b1, b2, b3, b4), (c2, c3), b4_in, stride = _tiny_stages(config, b4_in)
        else:
            (b1, b2, b3, b4), (c2, c3), b4_in, stride = _resnet50_stages(config)
        self.b1, self.b2, self.b3, self.b4 = b1, b2, b3, b4
        self.stride = stride
        self.adapter = (
            nn.Sequential(nn.Conv2d(c2 + c3, b4_in, 1), nn.ReLU())
            if config.adapter_enabled else nn.Identity()
        )
        self.query_conv = nn.Sequential(nn.Conv2d(c2 + c3, QUERY_CHANNELS, 3, padding=1), nn.ReLU())
        if config.variant == "pretrained_resnet50":
            self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        else:
            self.mean = self.std = None

        if config.variant == "tiny_random":
            gen = torch.Generator().manual_seed(config.init_seed)
            for block in self.frozen_blocks():
                for m in block.modules():
                    if isinstance(m, nn.Conv2d):
                        fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                        with torch.no_grad():
                            m.weight.copy_(torch.randn(m.weight.shape, generator=gen)
                                           * (2.0 / fan_in) ** 0.5)
                            m.bias.zero_()
        if load_weights and config.weights_path:
            self.load_weights(config.weights_path)
        for p in self.frozen_parameters():
            p.requires_grad_(False)

    def frozen_blocks(self):
        return (self.b1, self.b2, self.b3, self.b4)

    def frozen_parameters(self):
        for block in self.frozen_blocks():
            yield from block.parameters()

    def frozen_state(self) -> Dict[str, torch.Tensor]:
        """Detached copy of every B1..B4 parameter and buffer."""
        state = {}
        for i, block in enumerate(self.frozen_blocks(), start=1):
            for name, t in block.state_dict(keep_vars=False).items():
                state[f"b{i}.{name}"] = t.detach().clone()
        return state

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen stages stay in inference mode (ResNet batch-norm statistics)
        for block in self.frozen_blocks():
            block.eval()
        return self

    def expected_manifest(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.frozen_state().items()}

    def load_weights(self, path) -> None:
        """Load B1..B4 weights, failing loudly on any name/shape mismatch."""
        path = Path(path)
        try:
            raw = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:  # torch raises several unrelated types here
            raise LoadError(f"cannot load backbone weights {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise LoadError(f"{path} does not hold a state dict")
        state = self._translate(raw)
        expected = self.expected_manifest()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        wrong = sorted(k for k in set(expected) & set(state)
                       if tuple(state[k].shape) != expected[k])
        if missing or unexpected or wrong:
            lines = [f"backbone weights {path} do not match the manifest:"]
            lines += [f"  missing {k}" for k in missing[:20]]
            lines += [f"  unexpected {k}" for k in unexpected[:20]]
            lines += [f"  {k}: file {tuple(state[k].shape)} vs model {expected[k]}" for k in wrong]
            raise LoadError("\n".join(lines))
        for i, block in enumerate(self.frozen_blocks(), start=1):
            prefix = f"b{i}."
            block.load_state_dict({k[len(prefix):]: v for k, v in state.items()
                                   if k.startswith(prefix)})

    def _translate(self, raw):
        if self.config.variant != "pretrained_resnet50":
            return raw
        if any(k.startswith("b1.") for k in raw):
            return raw
        out = {}
        for key, value in raw.items():
            if key.startswith("fc."):
                continue
            for ours, theirs in _RESNET_PREFIX.items():
                if key.startswith(theirs):
                    out[ours + key[len(theirs):]] = value
                    break
            else:
                out[key] = value
        return out

    def forward(self, image: torch.Tensor) -> FeatureBundle:
        if image.ndim == 3:
            image = image.unsqueeze(0)
        h, w = image.shape[-2:]
        if h < self.stride or w < self.stride:
            raise ShapeError(f"input {h}x{w} smaller than backbone stride {self.stride}")
        if self.mean is not None:
            image = (image - self.mean) / self.std
        with torch.no_grad():
            f1 = self.b1(image)
            f2 = self.b2(f1)
            f3 = self.b3(f2)
        mode = self.config.align_mode
        if mode == "resize_up" and f3.shape[-2:] != f2.shape[-2:]:
            f3 = F.interpolate(f3, size=f2.shape[-2:], mode="bilinear", align_corners=False)
        elif mode == "resize_down" and f2.shape[-2:] != f3.shape[-2:]:
            f2 = F.adaptive_avg_pool2d(f2, f3.shape[-2:])
        cat = torch.cat([f2, f3], dim=1)
        f_query = self.query_conv(cat)
        i_class = self.b4(self.adapter(cat))
        return FeatureBundle(f_query, i_class, self.stride)


def extract_features(image: torch.Tensor, backbone) -> FeatureBundle:
    """Run the extractor; ``backbone`` is a FrozenBackbone or a BackboneConfig."""
    if isinstance(backbone, BackboneConfig):
        backbone = FrozenBackbone(backbone)
    return backbone(image)


def assert_frozen(state_before: Dict[str, torch.Tensor], state_after: Dict[str, torch.Tensor]) -> bool:
    """True iff every tensor is element-wise identical across the two states."""
    if set(state_before) != set(state_after):
        diff = sorted(set(state_before) ^ set(state_after))
        raise ContractError(f"backbone states enumerate different parameters: {diff[:10]}")
    return all(
        state_before[k].shape == state_after[k].shape and torch.equal(state_before[k], state_after[k])
        for k in state_before
    )
