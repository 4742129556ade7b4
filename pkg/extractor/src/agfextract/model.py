"""SE-ResNeXt-50 (32x4d) backbone with taps on its intermediate stages.

Module names follow the widely mirrored `se_resnext50_32x4d` checkpoint
layout (layer0.conv1, layer1.0.se_module.fc1, ...), so a downloaded state
dict loads without key remapping.

Coarse taps (5): the stem output plus the four residual stages,
  layer0 (64 ch), layer1 (256), layer2 (512), layer3 (1024), layer4 (2048).
Fine taps (17): the stem output plus every residual block output,
  layer0, layer1.0-2, layer2.0-3, layer3.0-5, layer4.0-2.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import torch
import torch.nn as nn

PRETRAINED_URL = (
    "http://data.lip6.fr/cadene/pretrainedmodels/se_resnext50_32x4d-a260b3a4.pth"
)

STAGE_BLOCKS = (3, 4, 6, 3)
STAGE_CHANNELS = (64, 256, 512, 1024, 2048)


class WeightDownloadError(RuntimeError):
    """Pretrained weights could not be fetched."""


class SEModule(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        self.avg_pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Conv2d(channels, channels // reduction, kernel_size=1)
        self.relu = nn.ReLU(inplace=True)
        self.fc2 = nn.Conv2d(channels // reduction, channels, kernel_size=1)
        self.sigmoid = nn.Sigmoid()

    def forward(self, x):
        s = self.avg_pool(x)
        s = self.relu(self.fc1(s))
        s = self.sigmoid(self.fc2(s))
        return x * s


class SEResNeXtBottleneck(nn.Module):
    """ResNeXt bottleneck (groups=32, base width 4) with a squeeze-and-
    excitation block on the residual branch."""

    expansion = 4

    def __init__(self, inplanes, planes, groups=32, base_width=4, stride=1,
                 downsample=None, reduction=16):
        super().__init__()
        width = math.floor(planes * (base_width / 64)) * groups
        self.conv1 = nn.Conv2d(inplanes, width, kernel_size=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, kernel_size=3, stride=stride,
                               padding=1, groups=groups, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, planes * 4, kernel_size=1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * 4)
        self.relu = nn.ReLU(inplace=True)
        self.se_module = SEModule(planes * 4, reduction)
        self.downsample = downsample
        self.stride = stride

    def forward(self, x):
        residual = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        out = self.se_module(out) + residual
        return self.relu(out)


class SEResNeXt50(nn.Module):
    def __init__(self, num_classes=1000):
        super().__init__()
        self.inplanes = 64
        self.layer0 = nn.Sequential(OrderedDict([
            ("conv1", nn.Conv2d(3, 64, kernel_size=7, stride=2, padding=3,
                                bias=False)),
            ("bn1", nn.BatchNorm2d(64)),
            ("relu1", nn.ReLU(inplace=True)),
            ("pool", nn.MaxPool2d(3, stride=2, ceil_mode=True)),
        ]))
        self.layer1 = self._make_layer(64, STAGE_BLOCKS[0], stride=1)
        self.layer2 = self._make_layer(128, STAGE_BLOCKS[1], stride=2)
        self.layer3 = self._make_layer(256, STAGE_BLOCKS[2], stride=2)
        self.layer4 = self._make_layer(512, STAGE_BLOCKS[3], stride=2)
        self.avg_pool = nn.AdaptiveAvgPool2d(1)
        self.last_linear = nn.Linear(512 * 4, num_classes)

    def _make_layer(self, planes, blocks, stride):
        downsample = None
        if stride != 1 or self.inplanes != planes * 4:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, planes * 4, kernel_size=1,
                          stride=stride, bias=False),
                nn.BatchNorm2d(planes * 4),
            )
        layers = [SEResNeXtBottleneck(self.inplanes, planes, stride=stride,
                                      downsample=downsample)]
        self.inplanes = planes * 4
        layers.extend(
            SEResNeXtBottleneck(self.inplanes, planes) for _ in range(1, blocks)
        )
        return nn.Sequential(*layers)

    def forward_stages(self, x, fine=False):
        """Run the backbone and return an ordered dict of tapped activations.

        ``fine=False`` taps the 5 coarse stages; ``fine=True`` taps the stem
        plus all 16 residual block outputs (17 stages).
        """
        taps = OrderedDict()
        x = self.layer0(x)
        taps["layer0"] = x
        for name in ("layer1", "layer2", "layer3", "layer4"):
            stage = getattr(self, name)
            if fine:
                for k, block in enumerate(stage):
                    x = block(x)
                    taps[f"{name}.{k}"] = x
            else:
                x = stage(x)
                taps[name] = x
        return taps

    def forward(self, x):
        x = self.forward_stages(x)["layer4"]
        x = self.avg_pool(x).flatten(1)
        return self.last_linear(x)


def stage_names(fine=False):
    if not fine:
        return ["layer0", "layer1", "layer2", "layer3", "layer4"]
    names = ["layer0"]
    for stage, blocks in zip(("layer1", "layer2", "layer3", "layer4"), STAGE_BLOCKS):
        names.extend(f"{stage}.{k}" for k in range(blocks))
    return names


def build_model(weights: str = "auto", seed: int = 0) -> SEResNeXt50:
    """Instantiate the backbone.

    ``weights`` is "auto" (download the ImageNet checkpoint), "random"
    (deterministic random init from ``seed``), or a path to a state dict.
    """
    if weights == "random":
        torch.manual_seed(seed)
    model = SEResNeXt50()
    if weights == "auto":
        try:
            state = torch.hub.load_state_dict_from_url(
                PRETRAINED_URL, map_location="cpu"
            )
        except Exception as e:
            raise WeightDownloadError(
                f"could not download pretrained weights from {PRETRAINED_URL}: {e}; "
                f"pass --weights PATH or --weights random"
            ) from e
        model.load_state_dict(state)
    elif weights != "random":
        state = torch.load(weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model
