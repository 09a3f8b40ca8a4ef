"""ShuffleNet v1 classifier and trunk.

Units follow the v1 design: grouped 1x1 conv, channel shuffle, 3x3 depthwise
conv, grouped 1x1 conv, combined with the shortcut by element-wise addition
(stride 1) or by concatenation with a 3x3/2 average-pooled shortcut (stride
2). The first pointwise conv of the first stage is not grouped because its
input width is small.

The default configuration (conv1 24ch, stages 4/8/4 with 136/272/544 channels,
groups 2, bottleneck ratio 1/2) ends in an element-wise addition producing
7x7x544 feature maps for 224x224 input, has 50 weighted layers and about 1.4M
parameters with its 1000-class head attached.
"""

from __future__ import annotations

import torch
from torch import nn


class ChannelShuffle(nn.Module):
    def __init__(self, groups: int):
        super().__init__()
        self.groups = groups

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.groups == 1:
            return x
        n, c, h, w = x.shape
        g = self.groups
        return x.view(n, g, c // g, h, w).transpose(1, 2).reshape(n, c, h, w)


class ShuffleUnit(nn.Module):
    """One v1 unit; stride-1 units combine by add, stride-2 units by concat."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        groups: int,
        stride: int,
        bottleneck_ratio: float,
        group_first_conv: bool = True,
    ):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        if stride == 1 and in_channels != out_channels:
            raise ValueError("stride-1 unit needs matching in/out channels for the addition")
        self.stride = stride
        branch_out = out_channels - in_channels if stride == 2 else out_channels
        mid = max(groups, int(round(out_channels * bottleneck_ratio)))
        mid -= mid % groups  # grouped convs need divisible widths
        g_first = groups if group_first_conv else 1

        self.gconv1 = nn.Conv2d(in_channels, mid, 1, groups=g_first, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.shuffle = ChannelShuffle(groups if group_first_conv else 1)
        self.dwconv = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, groups=mid, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.gconv2 = nn.Conv2d(mid, branch_out, 1, groups=groups, bias=False)
        self.bn3 = nn.BatchNorm2d(branch_out)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut_pool = nn.AvgPool2d(3, stride=2, padding=1) if stride == 2 else None

    def combine_preact(self, x: torch.Tensor) -> torch.Tensor:
        """Shortcut-combined output before the final ReLU."""
        branch = self.relu(self.bn1(self.gconv1(x)))
        branch = self.shuffle(branch)
        branch = self.bn2(self.dwconv(branch))
        branch = self.bn3(self.gconv2(branch))
        if self.stride == 2:
            return torch.cat([self.shortcut_pool(x), branch], dim=1)
        return x + branch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(self.combine_preact(x))


class ShuffleNetV1(nn.Module):
    """v1 classifier: conv1, three shuffle stages, global pool, FC head."""

    def __init__(
        self,
        num_classes: int = 1000,
        groups: int = 2,
        conv1_channels: int = 24,
        stage_repeats: tuple[int, int, int] = (4, 8, 4),
        stage_channels: tuple[int, int, int] = (136, 272, 544),
        bottleneck_ratio: float = 0.5,
    ):
        super().__init__()
        self.groups = groups
        self.stage_channels = tuple(stage_channels)
        self.conv1 = nn.Sequential(
            nn.Conv2d(3, conv1_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(conv1_channels),
            nn.ReLU(inplace=True),
        )
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)

        stages = []
        in_ch = conv1_channels
        for stage_idx, (repeats, out_ch) in enumerate(zip(stage_repeats, stage_channels)):
            units = [
                ShuffleUnit(
                    in_ch, out_ch, groups, stride=2,
                    bottleneck_ratio=bottleneck_ratio,
                    group_first_conv=stage_idx != 0,
                )
            ]
            units.extend(
                ShuffleUnit(out_ch, out_ch, groups, stride=1, bottleneck_ratio=bottleneck_ratio)
                for _ in range(repeats - 1)
            )
            stages.append(nn.Sequential(*units))
            in_ch = out_ch
        self.stage2, self.stage3, self.stage4 = stages

        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(stage_channels[-1], num_classes)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        """Feature maps after stage4."""
        x = self.maxpool(self.conv1(x))
        x = self.stage2(x)
        x = self.stage3(x)
        return self.stage4(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.forward_features(x)
        x = self.avgpool(x).flatten(1)
        return self.fc(x)


class ShuffleNetV1Trunk(nn.Module):
    """Truncated v1 ending at the final element-wise addition (pre-ReLU).

    Holds only the submodules the trunk forward uses, so the unused pool and
    FC head of the wrapped classifier do not linger in parameter counts or
    checkpoints. Weights are shared with the source network, not copied.
    """

    def __init__(self, net: ShuffleNetV1):
        super().__init__()
        self.conv1 = net.conv1
        self.maxpool = net.maxpool
        self.stage2 = net.stage2
        self.stage3 = net.stage3
        self.stage4 = net.stage4

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.maxpool(self.conv1(x))
        x = self.stage2(x)
        x = self.stage3(x)
        units = list(self.stage4)
        for unit in units[:-1]:
            x = unit(x)
        return units[-1].combine_preact(x)
