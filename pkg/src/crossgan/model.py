"""Two-input ResNet generators and full-image discriminators.

The generator takes a content image and a condition image from the target
domain, concatenated channel-wise (6 channels in, 3 out). The discriminator
scores an entire image with a single real number.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class GeneratorSpec:
    input_channels: int = 6
    output_channels: int = 3
    residual_blocks: int = 7
    base_filters: int = 64
    conditional: bool = True
    upsample: str = "transpose"  # or "resize"

    def __post_init__(self):
        if self.conditional and self.input_channels != 2 * self.output_channels:
            raise ValueError(
                f"conditional generator needs input_channels == 2 * output_channels, "
                f"got {self.input_channels} -> {self.output_channels}"
            )
        if not self.conditional and self.input_channels != self.output_channels:
            raise ValueError("unconditional generator needs input_channels == output_channels")
        if self.residual_blocks < 1:
            raise ValueError("residual_blocks must be >= 1")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.upsample not in ("transpose", "resize"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")

    @classmethod
    def unconditional(cls, channels: int = 3, **kw) -> "GeneratorSpec":
        """Plain CycleGAN generator used by the baseline."""
        return cls(input_channels=channels, output_channels=channels, conditional=False, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_channels: int = 3
    base_filters: int = 64
    reduce_to_scalar: bool = True
    # Training resolution; fixes how many extra stride-2 layers are built.
    image_size: tuple[int, int] = (256, 512)

    def __post_init__(self):
        if self.input_channels < 1 or self.base_filters < 1:
            raise ValueError("channel counts must be positive")
        h, w = self.image_size
        _check_disc_input(h, w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


def _check_disc_input(h: int, w: int) -> None:
    if h < 16 or w < 16:
        raise ValueError(f"discriminator input {h}x{w} too small (min 16 per side)")
    # four stride-2 convs; instance norm needs more than one spatial element
    if _conv_out(_conv_out(_conv_out(_conv_out(h)))) * _conv_out(_conv_out(_conv_out(_conv_out(w)))) < 2:
        raise ValueError(f"discriminator input {h}x{w} collapses to a single pixel")


def _conv_out(n: int) -> int:
    # kernel 4, stride 2, padding 1
    return (n + 2 - 4) // 2 + 1


def extra_disc_layers(h: int, w: int) -> int:
    """Number of 512-filter stride-2 convs needed after the base stack."""
    for _ in range(4):
        h, w = _conv_out(h), _conv_out(w)
    n = 0
    while h > 4 or w > 4:
        h, w = _conv_out(h), _conv_out(w)
        n += 1
    return n


class ResidualBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


def _up(in_ch: int, out_ch: int, mode: str) -> list[nn.Module]:
    if mode == "transpose":
        conv = nn.ConvTranspose2d(in_ch, out_ch, 3, stride=2, padding=1, output_padding=1, bias=False)
        return [conv, nn.InstanceNorm2d(out_ch, affine=True), nn.ReLU(inplace=True)]
    return [
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.ReflectionPad2d(1),
        nn.Conv2d(in_ch, out_ch, 3, bias=False),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
    ]


class Generator(nn.Module):
    """ResNet encoder/decoder taking ``[content || condition]``."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        f = spec.base_filters
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(spec.input_channels, f, 7, bias=False),
            nn.InstanceNorm2d(f, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(f, 2 * f, 3, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(2 * f, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * f, 4 * f, 3, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(4 * f, affine=True),
            nn.ReLU(inplace=True),
        ]
        layers += [ResidualBlock(4 * f) for _ in range(spec.residual_blocks)]
        layers += _up(4 * f, 2 * f, spec.upsample)
        layers += _up(2 * f, f, spec.upsample)
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(f, spec.output_channels, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, content, condition=None):
        if self.spec.conditional:
            if condition is None:
                raise ValueError("conditional generator requires a condition image")
            content = torch.cat([content, condition], dim=1)
        elif condition is not None:
            raise ValueError("unconditional generator takes no condition image")
        return self.net(content)


class Discriminator(nn.Module):
    """Conv stack reduced to one score per image by a global mean."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        f = spec.base_filters
        widths = [f, 2 * f, 4 * f, 8 * f]
        blocks = [nn.Sequential(nn.Conv2d(spec.input_channels, f, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True))]
        for cin, cout in zip(widths[:-1], widths[1:]):
            blocks.append(_disc_block(cin, cout))
        self.stack = nn.Sequential(*blocks)
        self.extra = nn.ModuleList(_disc_block(8 * f, 8 * f) for _ in range(extra_disc_layers(*spec.image_size)))
        self.head = nn.Conv2d(8 * f, 1, 3, padding=1)

    def forward(self, x):
        _check_disc_input(x.shape[-2], x.shape[-1])
        x = self.stack(x)
        for layer in self.extra:
            if x.shape[-2] <= 4 and x.shape[-1] <= 4:
                break
            x = layer(x)
        x = self.head(x)
        if self.spec.reduce_to_scalar:
            return x.mean(dim=(1, 2, 3))
        return x


def _disc_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 4, 2, 1, bias=False),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2, inplace=True),
    )


def init_weights(module: nn.Module, seed: int, std: float = 0.02) -> None:
    """Gaussian init: conv weights N(0, std), norm scales N(1, std), biases 0."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm2d) and m.affine:
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * std)
                m.bias.zero_()


def build_generator(spec: GeneratorSpec, seed: int) -> tuple[Generator, dict[str, torch.Tensor]]:
    g = Generator(spec)
    init_weights(g, seed)
    return g, dict(g.named_parameters())


def build_discriminator(spec: DiscriminatorSpec, seed: int) -> tuple[Discriminator, dict[str, torch.Tensor]]:
    d = Discriminator(spec)
    init_weights(d, seed)
    return d, dict(d.named_parameters())


def generator_forward(G: Generator, content: torch.Tensor, condition: torch.Tensor | None = None) -> torch.Tensor:
    """Run ``G`` on a content image (and a condition image for conditional G).

    Accepts ``(C, H, W)`` or ``(N, C, H, W)`` tensors; the output has the
    content's shape.
    """
    if condition is not None and content.shape != condition.shape:
        raise ValueError(f"content {tuple(content.shape)} and condition {tuple(condition.shape)} differ")
    h, w = content.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"image dims must be divisible by 4, got {h}x{w}")
    single = content.dim() == 3
    if single:
        content = content.unsqueeze(0)
        condition = condition.unsqueeze(0) if condition is not None else None
    out = G(content, condition)
    return out[0] if single else out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
