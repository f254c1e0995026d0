"""Conv encoder/decoder blocks, patch discriminators, and deterministic init."""

from __future__ import annotations

from collections import OrderedDict

import torch
import torch.nn as nn


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=False)


class ConvEncoder(nn.Module):
    """7x7 stem followed by stride-2 downsamples; output width = base * 2**n_down."""

    def __init__(self, in_channels: int, base_width: int = 32, n_down: int = 2):
        super().__init__()
        if in_channels <= 0 or base_width <= 0 or n_down < 1:
            raise ValueError("bad encoder arguments")
        self.in_channels = in_channels
        self.n_down = n_down
        layers = [nn.Conv2d(in_channels, base_width, 7, 1, 3), _norm(base_width), nn.ReLU(True)]
        width = base_width
        for _ in range(n_down):
            layers += [nn.Conv2d(width, width * 2, 3, 2, 1), _norm(width * 2), nn.ReLU(True)]
            width *= 2
        self.net = nn.Sequential(*layers)
        self.out_channels = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[2] % 2 ** self.n_down or x.shape[3] % 2 ** self.n_down:
            raise ValueError(f"spatial size must be divisible by {2 ** self.n_down}")
        return self.net(x)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1), _norm(channels), nn.ReLU(True),
            nn.Conv2d(channels, channels, 3, 1, 1), _norm(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.net(x)


class ConvDecoder(nn.Module):
    """Residual blocks, nearest-upsample convs, and a 7x7 head with a fixed activation."""

    ACTIVATIONS = ("tanh", "sigmoid", "softmax", "linear")

    def __init__(self, in_channels: int, out_channels: int, n_up: int = 2,
                 n_res: int = 2, activation: str = "tanh"):
        super().__init__()
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"activation must be one of {self.ACTIVATIONS}")
        if in_channels % 2 ** n_up:
            raise ValueError("in_channels must be divisible by 2**n_up")
        self.activation = activation
        self.in_channels = in_channels
        layers: list[nn.Module] = [ResidualBlock(in_channels) for _ in range(n_res)]
        width = in_channels
        for _ in range(n_up):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(width, width // 2, 3, 1, 1), _norm(width // 2), nn.ReLU(True),
            ]
            width //= 2
        layers.append(nn.Conv2d(width, out_channels, 7, 1, 3))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        y = self.net(x)
        if self.activation == "tanh":
            return torch.tanh(y)
        if self.activation == "sigmoid":
            return torch.sigmoid(y)
        if self.activation == "softmax":
            return torch.softmax(y, dim=1)
        return y


class PatchDiscriminator(nn.Module):
    """PatchGAN tower returning the raw score map and intermediate features."""

    def __init__(self, in_channels: int, base_width: int = 32, n_layers: int = 3):
        super().__init__()
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.in_channels = in_channels
        blocks = [nn.Sequential(nn.Conv2d(in_channels, base_width, 4, 2, 1),
                                nn.LeakyReLU(0.2, True))]
        width = base_width
        for _ in range(n_layers - 1):
            blocks.append(nn.Sequential(
                nn.Conv2d(width, width * 2, 4, 2, 1), _norm(width * 2),
                nn.LeakyReLU(0.2, True)))
            width *= 2
        self.blocks = nn.ModuleList(blocks)
        self.score = nn.Conv2d(width, 1, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return self.score(x), feats


class MultiScaleDiscriminator(nn.Module):
    """Independent patch discriminators on progressively pooled inputs.

    forward returns one (score_map, features) pair per scale; an optional
    condition tensor is concatenated to the image on the channel axis.
    """

    def __init__(self, in_channels: int, base_width: int = 32,
                 n_scales: int = 2, n_layers: int = 3):
        super().__init__()
        if n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        self.in_channels = in_channels
        self.scales = nn.ModuleList(
            PatchDiscriminator(in_channels, base_width, n_layers) for _ in range(n_scales))
        self.pool = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    def forward(self, image: torch.Tensor,
                condition: torch.Tensor | None = None) -> list[tuple[torch.Tensor, list[torch.Tensor]]]:
        x = image if condition is None else torch.cat([image, condition], dim=1)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x.shape[1]}")
        out = []
        for i, disc in enumerate(self.scales):
            if i > 0:
                x = self.pool(x)
            out.append(disc(x))
        return out


class ParameterSet:
    """Named view over module parameters used by init and checkpointing."""

    def __init__(self, tensors: "OrderedDict[str, torch.Tensor]"):
        self.tensors = tensors

    @classmethod
    def from_modules(cls, **modules: nn.Module) -> "ParameterSet":
        tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                key = f"{prefix}.{name}"
                if key in tensors:
                    raise ValueError(f"duplicate parameter name {key}")
                tensors[key] = p
        return cls(tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


def init_parameters(module: nn.Module, seed: int) -> ParameterSet:
    """Deterministic N(0, 0.02) weights and zero biases, ordered by parameter name."""
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.empty_like(p).normal_(0.0, 0.02, generator=gen))
    return ParameterSet.from_modules(net=module)
