"""Learnable networks: encoder, decoder, precursor with mask head, ConvLSTM.

The encoder/decoder pair is a U-Net split in half with the skip
connections removed: the decoder sees nothing but the token. Each level is
a stack of residual blocks followed by a stride-2 resampling convolution.
With the default 3 levels and latent_channels == image_channels the token
holds exactly 1/64 of the image's elements.

The masked variant adds a precursor (one residual block), a small
convolutional LSTM carrying memory across token iterations, and two heads:
a sigmoid mask head and a linear transform head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .core import ContractViolation


@dataclass
class CodecConfig:
    image_channels: int = 3
    base_channels: int = 32
    residual_blocks_per_level: int = 2
    levels: int = 3
    latent_channels: int | None = None  # defaults to image_channels (64x compression)
    mask_enabled: bool = False
    lstm_hidden_channels: int = 16

    def __post_init__(self) -> None:
        if self.latent_channels is None:
            self.latent_channels = self.image_channels
        for name in ("image_channels", "base_channels", "residual_blocks_per_level",
                     "levels", "latent_channels", "lstm_hidden_channels"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")

    @property
    def stride(self) -> int:
        return 2 ** self.levels


@dataclass
class MemoryState:
    """ConvLSTM state; created as zeros per image batch, threaded across steps."""

    hidden: Tensor
    cell: Tensor


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ReLU()

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


class ConvLSTMCell(nn.Module):
    """Standard four-gate convolutional LSTM cell with 3x3 kernels."""

    def __init__(self, in_channels: int, hidden_channels: int):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels, 3, padding=1)

    def forward(self, x: Tensor, state: MemoryState) -> tuple[Tensor, MemoryState]:
        stacked = self.gates(torch.cat([x, state.hidden], dim=1))
        i, f, g, o = torch.chunk(stacked, 4, dim=1)
        cell = torch.sigmoid(f) * state.cell + torch.sigmoid(i) * torch.tanh(g)
        hidden = torch.sigmoid(o) * torch.tanh(cell)
        return hidden, MemoryState(hidden=hidden, cell=cell)

    def zero_state(self, batch: int, height: int, width: int,
                   dtype: torch.dtype, device: torch.device) -> MemoryState:
        shape = (batch, self.hidden_channels, height, width)
        zeros = torch.zeros(shape, dtype=dtype, device=device)
        return MemoryState(hidden=zeros, cell=zeros.clone())


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig, in_channels: int):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(in_channels, cfg.base_channels, 3, padding=1)]
        ch = cfg.base_channels
        for _ in range(cfg.levels):
            layers += [ResidualBlock(ch) for _ in range(cfg.residual_blocks_per_level)]
            layers.append(nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1))
            ch *= 2
        layers.append(nn.Conv2d(ch, cfg.latent_channels, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.base_channels * 2 ** cfg.levels
        layers: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, ch, 1)]
        for _ in range(cfg.levels):
            layers += [ResidualBlock(ch) for _ in range(cfg.residual_blocks_per_level)]
            layers.append(nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1))
            ch //= 2
        final = nn.Conv2d(ch, cfg.image_channels, 3, padding=1)
        # zero init so the first reconstruction starts near 0
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        layers.append(final)
        self.net = nn.Sequential(*layers)

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)


class Precursor(nn.Module):
    """Residual block + ConvLSTM feeding the mask and transform heads."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.lstm_hidden_channels
        self.stem = nn.Conv2d(cfg.image_channels, ch, 3, padding=1)
        self.block = ResidualBlock(ch)
        self.cell = ConvLSTMCell(ch, cfg.lstm_hidden_channels)
        self.mask_head = nn.Conv2d(cfg.lstm_hidden_channels, 1, 1)
        self.transform_head = nn.Conv2d(cfg.lstm_hidden_channels, cfg.image_channels, 1)

    def forward(self, residual: Tensor, state: MemoryState) -> tuple[Tensor, Tensor, MemoryState]:
        features = self.block(self.stem(residual))
        hidden, new_state = self.cell(features, state)
        mask = torch.sigmoid(self.mask_head(hidden))
        transformed = self.transform_head(hidden)
        return transformed, mask, new_state


def condition(transformed: Tensor, mask: Tensor) -> Tensor:
    """Encoder input for the masked variant: masked content plus the mask itself."""
    if mask.shape[1] != 1 or mask.shape[0] != transformed.shape[0]:
        raise ContractViolation("mask must be (B,1,H,W) matching the transformed batch")
    return torch.cat([mask * transformed, mask], dim=1)


class Codec(nn.Module):
    """Full parameter container; the masked variant owns the precursor too."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        enc_in = config.image_channels + (1 if config.mask_enabled else 0)
        self.encoder = Encoder(config, enc_in)
        self.decoder = Decoder(config)
        self.precursor_net = Precursor(config) if config.mask_enabled else None
        # encoder/decoder biases start at zero so the response to an all-zero
        # residual starts at zero; the loop then cannot drift when extra
        # refinement steps see a residual the codec has nothing to add to
        for module in (self.encoder, self.decoder):
            for m in module.modules():
                if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m.bias is not None:
                    nn.init.zeros_(m.bias)

    def encode(self, x: Tensor) -> Tensor:
        if x.shape[-1] % self.config.stride or x.shape[-2] % self.config.stride:
            raise ContractViolation(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by stride {self.config.stride}")
        return self.encoder(x)

    def decode(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.config.latent_channels:
            raise ContractViolation(
                f"token has {z.shape[1]} channels, expected {self.config.latent_channels}")
        return self.decoder(z)

    def precursor(self, residual: Tensor, state: MemoryState) -> tuple[Tensor, Tensor, MemoryState]:
        if self.precursor_net is None:
            raise ContractViolation("precursor called on a codec without mask support")
        return self.precursor_net(residual, state)

    def zero_memory(self, like: Tensor) -> MemoryState:
        if self.precursor_net is None:
            raise ContractViolation("memory state only exists for mask-enabled codecs")
        b, _, h, w = like.shape
        return self.precursor_net.cell.zero_state(b, h, w, like.dtype, like.device)

    @property
    def mask_enabled(self) -> bool:
        return self.config.mask_enabled


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_codec(config: CodecConfig, seed: int) -> Codec:
    """Construct a codec with initialization drawn from an isolated RNG stream."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Codec(config)


class IdentityScaleCodec(nn.Module):
    """Analytic stub: decode(encode(x)) == alpha * x.

    Under the autoregressive loop the cumulative reconstruction follows the
    geometric closed form (1 - (1-alpha)^n) * X, which several tests and
    analyses use as an exact oracle.
    """

    def __init__(self, alpha: float = 0.5):
        super().__init__()
        self.alpha = alpha

    @property
    def mask_enabled(self) -> bool:
        return False

    def encode(self, x: Tensor) -> Tensor:
        return x

    def decode(self, z: Tensor) -> Tensor:
        return self.alpha * z
