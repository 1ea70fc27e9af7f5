"""GANet: residual encoder, ASPP, and two task decoders joined by a fusion block."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .gac import NORMALIZATIONS, SOFTMAX_ROW, GeometryAwareConv, SumFusion
from .syncbn import SyncBatchNorm2d

BLOCKS = {
    "tiny": (1, 1, 1, 1),
    50: (3, 4, 6, 3),
    101: (3, 4, 23, 3),
    152: (3, 8, 36, 3),
}
FUSION_MODES = ("none", "sum", "gac")
OUTPUT_STRIDE = 16


class ConfigError(ValueError):
    pass


class InputShapeError(ValueError):
    pass


class DualPrediction(NamedTuple):
    seg_logits: torch.Tensor  # B x K x H x W
    height: torch.Tensor  # B x H x W, in [0, 1]


def parse_depth(depth):
    if isinstance(depth, str) and depth != "tiny":
        try:
            depth = int(depth)
        except ValueError:
            pass
    if depth not in BLOCKS:
        raise ConfigError(f"backbone depth {depth!r} not in {list(BLOCKS)}")
    return depth


@dataclass
class NetworkConfig:
    backbone_depth: int | str = 101
    num_classes: int = 6
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    decoder_channels: int = 256
    patch_size: int = 320
    fusion_mode: str = "gac"
    in_channels: int = 3
    base_width: int = 64
    aspp_channels: int = 256
    low_level_channels: int = 48
    embed_channels: int | None = None
    gac_normalization: str = SOFTMAX_ROW

    def __post_init__(self):
        self.backbone_depth = parse_depth(self.backbone_depth)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ConfigError(f"ASPP rates must be positive integers, got {self.aspp_rates}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode {self.fusion_mode!r} not in {FUSION_MODES}")
        if self.gac_normalization not in NORMALIZATIONS:
            raise ConfigError(f"gac_normalization {self.gac_normalization!r} not in {NORMALIZATIONS}")
        if self.patch_size % OUTPUT_STRIDE:
            raise ConfigError(f"patch_size must be a multiple of {OUTPUT_STRIDE}")
        for name in ("decoder_channels", "in_channels", "base_width", "aspp_channels", "low_level_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def tiny(cls, **overrides) -> "NetworkConfig":
        """Reduced-width profile for CPU runs on the synthetic benchmark."""
        base = dict(
            backbone_depth="tiny", num_classes=4, decoder_channels=32, patch_size=64,
            base_width=8, aspp_channels=32, low_level_channels=16,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        return d


def conv_bn_relu(cin, cout, kernel=3, stride=1, dilation=1) -> nn.Sequential:
    pad = dilation * (kernel - 1) // 2
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride, pad, dilation=dilation, bias=False),
        SyncBatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride=1, dilation=1):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.bn1 = SyncBatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride, dilation, dilation=dilation, bias=False)
        self.bn2 = SyncBatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, cout, 1, bias=False)
        self.bn3 = SyncBatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), SyncBatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class ResNetEncoder(nn.Module):
    """Residual backbone at output stride 16; returns (stride-4, stride-16) features."""

    def __init__(self, depth, in_channels=3, base_width=64):
        super().__init__()
        blocks = BLOCKS[depth]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base_width, 7, 2, 3, bias=False),
            SyncBatchNorm2d(base_width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        cin = base_width
        layers = []
        # (stride, dilation): the last stage trades its stride for dilation
        for i, (n, (stride, dilation)) in enumerate(zip(blocks, [(1, 1), (2, 1), (2, 1), (1, 2)])):
            planes = base_width * 2 ** i
            stage = []
            for b in range(n):
                stage.append(Bottleneck(cin, planes, stride if b == 0 else 1, dilation))
                cin = planes * Bottleneck.expansion
            layers.append(nn.Sequential(*stage))
        self.layer1, self.layer2, self.layer3, self.layer4 = layers
        self.low_level_channels = base_width * Bottleneck.expansion
        self.out_channels = cin

    def forward(self, x):
        x = self.stem(x)
        low = self.layer1(x)
        x = self.layer4(self.layer3(self.layer2(low)))
        return low, x


class ASPPPooling(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        # no BN: a 1x1 pooled map has a single value per channel and sample
        self.conv = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        y = F.relu(self.conv(F.adaptive_avg_pool2d(x, 1)))
        return F.interpolate(y, size=x.shape[2:], mode="bilinear", align_corners=False)


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates):
        super().__init__()
        branches = [conv_bn_relu(cin, cout, kernel=1)]
        branches += [conv_bn_relu(cin, cout, kernel=3, dilation=r) for r in rates]
        branches.append(ASPPPooling(cin, cout))
        self.branches = nn.ModuleList(branches)
        self.project = conv_bn_relu(cout * len(branches), cout, kernel=1)

    def forward(self, x):
        return self.project(torch.cat([b(x) for b in self.branches], dim=1))


class GANet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.encoder = ResNetEncoder(c.backbone_depth, c.in_channels, c.base_width)
        self.aspp = ASPP(self.encoder.out_channels, c.aspp_channels, c.aspp_rates)
        self.low_level = conv_bn_relu(self.encoder.low_level_channels, c.low_level_channels, kernel=1)
        merged = c.aspp_channels + c.low_level_channels
        self.semantic_branch = conv_bn_relu(merged, c.decoder_channels)
        self.geometric_branch = conv_bn_relu(merged, c.decoder_channels)
        if c.fusion_mode == "gac":
            self.fusion = GeometryAwareConv(c.decoder_channels, c.embed_channels, c.gac_normalization)
        elif c.fusion_mode == "sum":
            self.fusion = SumFusion()
        else:
            self.fusion = None
        self.seg_head = nn.Conv2d(c.decoder_channels, c.num_classes, 1)
        self.height_head = nn.Conv2d(c.decoder_channels, 1, 1)

    def height_parameters(self):
        """Parameters used only by the height branch after the task split."""
        yield from self.geometric_branch.parameters()
        yield from self.height_head.parameters()

    def forward(self, x: torch.Tensor) -> DualPrediction:
        h, w = x.shape[2:]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise InputShapeError(
                f"input {h}x{w} is not divisible by {OUTPUT_STRIDE}; pad it to a multiple of {OUTPUT_STRIDE}"
            )
        low, deep = self.encoder(x)
        ctx = self.aspp(deep)
        ctx = F.interpolate(ctx, size=low.shape[2:], mode="bilinear", align_corners=False)
        merged = torch.cat([ctx, self.low_level(low)], dim=1)
        semantic = self.semantic_branch(merged)
        geometric = self.geometric_branch(merged)

        if self.fusion is not None:
            semantic = self.fusion(semantic, geometric)
        # a 1x1 conv commutes with bilinear upsampling, so project first
        logits = F.interpolate(self.seg_head(semantic), size=(h, w), mode="bilinear", align_corners=False)
        height = F.interpolate(self.height_head(geometric), size=(h, w), mode="bilinear", align_corners=False)
        return DualPrediction(logits, torch.sigmoid(height[:, 0]))


def init_parameters(net: nn.Module, generator: torch.Generator) -> None:
    """He-normal convolutions, unit/zero BN; the GAC output projection stays zero."""
    skip = set()
    if isinstance(getattr(net, "fusion", None), GeometryAwareConv) and net.fusion.out_proj is not None:
        skip = {id(net.fusion.out_proj)}
    for m in net.modules():
        if isinstance(m, nn.Conv2d) and id(m) not in skip:
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_network(config: NetworkConfig, seed: int | torch.Generator = 0) -> GANet:
    generator = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    net = GANet(config)
    init_parameters(net, generator)
    return net


def forward(network: nn.Module, batch: torch.Tensor, mode: str = "eval") -> DualPrediction:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    network.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return network(batch)
    return network(batch)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
