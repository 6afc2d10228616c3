"""Adversarial autoencoder: convolutional encoder to a latent code, mirrored
convolutional decoder back to image space, and a small perceptron
discriminator that pushes the latent distribution toward a Gaussian prior.

Encoder/decoder follow the DCGAN recipe: stride-2 4x4 convolutions halving
the spatial size while doubling channels from a base of 64 down to 4x4,
batch normalization after every convolution except the encoder input layer
and the decoder output layer, ReLU activations, tanh on the decoder output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
from torch import nn

BASE_CHANNELS = 64
BOTTLENECK_SIZE = 4  # spatial size at the encoder/decoder turnaround
WEIGHT_STD = 0.02


class ShapeError(ValueError):
    """Input shape inconsistent with the model."""


def _conv_channels(size: int, in_channels: int) -> list[int]:
    if size < 8 or size & (size - 1):
        raise ShapeError(f"spatial size must be a power of two >= 8, got {size}")
    n_halvings = int(math.log2(size // BOTTLENECK_SIZE))
    return [in_channels] + [BASE_CHANNELS * 2**i for i in range(n_halvings)]


class ConvEncoder(nn.Module):
    def __init__(self, input_shape: tuple[int, int, int], latent_dim: int):
        super().__init__()
        c, h, w = input_shape
        if h != w:
            raise ShapeError(f"images must be square, got {h}x{w}")
        chans = _conv_channels(h, c)
        layers: list[nn.Module] = []
        for i in range(len(chans) - 1):
            layers.append(nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1))
            if i > 0:  # no batch norm on the input layer
                layers.append(nn.BatchNorm2d(chans[i + 1]))
            layers.append(nn.ReLU())
        self.conv = nn.Sequential(*layers)
        # linear latent head, no activation: the Gaussian prior needs
        # unbounded support
        self.head = nn.Linear(chans[-1] * BOTTLENECK_SIZE**2, latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.conv(x).flatten(1))


class ConvDecoder(nn.Module):
    def __init__(self, latent_dim: int, output_shape: tuple[int, int, int]):
        super().__init__()
        c, h, w = output_shape
        chans = list(reversed(_conv_channels(h, c)))
        self.bottleneck_channels = chans[0]
        self.project = nn.Linear(latent_dim, chans[0] * BOTTLENECK_SIZE**2)
        layers: list[nn.Module] = [nn.BatchNorm2d(chans[0]), nn.ReLU()]
        for i in range(len(chans) - 1):
            layers.append(
                nn.ConvTranspose2d(chans[i], chans[i + 1], 4, stride=2, padding=1)
            )
            if i < len(chans) - 2:  # no batch norm on the output layer
                layers.append(nn.BatchNorm2d(chans[i + 1]))
                layers.append(nn.ReLU())
        layers.append(nn.Tanh())
        self.deconv = nn.Sequential(*layers)

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        x = self.project(codes)
        x = x.view(-1, self.bottleneck_channels, BOTTLENECK_SIZE, BOTTLENECK_SIZE)
        return self.deconv(x)


class LatentDiscriminator(nn.Module):
    """latent_dim -> 512 -> 512 -> 1 with sigmoid output."""

    def __init__(self, latent_dim: int, hidden: int = 512):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 1),
            nn.Sigmoid(),
        )

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        return self.net(codes).squeeze(1)


@dataclass
class ModelParameters:
    """Encoder, decoder and latent-discriminator parameter sets."""

    encoder: ConvEncoder
    decoder: ConvDecoder
    discriminator: LatentDiscriminator
    latent_dim: int
    input_shape: tuple[int, int, int]

    def named_modules_dict(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "discriminator": self.discriminator,
        }

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer, uniquely named for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for prefix, module in self.named_modules_dict().items():
            for name, tensor in module.state_dict().items():
                out[f"{prefix}.{name}"] = tensor.detach().numpy()
        return out

    def autoencoder_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def set_training_mode(self, training: bool) -> None:
        for module in self.named_modules_dict().values():
            module.train(training)


def _init_weights(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(
                    torch.randn(m.weight.shape, generator=generator) * WEIGHT_STD
                )
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.copy_(
                    1.0 + torch.randn(m.weight.shape, generator=generator) * WEIGHT_STD
                )
                m.bias.zero_()


def init_model(
    latent_dim: int, input_shape: tuple[int, int, int], seed: int = 0
) -> ModelParameters:
    """Build the full model with weights ~ N(0, 0.02), deterministic under seed."""
    if latent_dim < 1:
        raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
    input_shape = tuple(int(v) for v in input_shape)
    encoder = ConvEncoder(input_shape, latent_dim)
    decoder = ConvDecoder(latent_dim, input_shape)
    discriminator = LatentDiscriminator(latent_dim)
    generator = torch.Generator().manual_seed(int(seed))
    for module in (encoder, decoder, discriminator):
        _init_weights(module, generator)
    return ModelParameters(
        encoder=encoder,
        decoder=decoder,
        discriminator=discriminator,
        latent_dim=latent_dim,
        input_shape=input_shape,
    )


def _as_tensor(data, expected_shape: tuple[int, ...] | None = None) -> torch.Tensor:
    from .datasets import ImageBatch

    if isinstance(data, ImageBatch):
        data = data.data
    tensor = torch.as_tensor(data, dtype=torch.float32)
    if expected_shape is not None and tuple(tensor.shape[1:]) != expected_shape:
        raise ShapeError(
            f"batch shape {tuple(tensor.shape[1:])} does not match {expected_shape}"
        )
    return tensor


def encode(params: ModelParameters, batch, training_mode: bool = False) -> np.ndarray:
    """Map a preprocessed image batch to latent codes (batch, latent_dim).

    training_mode toggles batch-norm between batch statistics and running
    statistics.
    """
    x = _as_tensor(batch, params.input_shape)
    params.encoder.train(training_mode)
    try:
        with torch.no_grad():
            return params.encoder(x).numpy()
    finally:
        params.encoder.train(False)


def decode(params: ModelParameters, codes, training_mode: bool = False) -> np.ndarray:
    """Map latent codes back to image space; values lie in (-1, 1)."""
    z = torch.as_tensor(codes, dtype=torch.float32)
    if z.ndim != 2 or z.shape[1] != params.latent_dim:
        raise ShapeError(
            f"codes must be (batch, {params.latent_dim}), got {tuple(z.shape)}"
        )
    params.decoder.train(training_mode)
    try:
        with torch.no_grad():
            return params.decoder(z).numpy()
    finally:
        params.decoder.train(False)


def discriminate(params: ModelParameters, codes) -> np.ndarray:
    """Per-sample probability in (0, 1) that a code came from the prior."""
    z = torch.as_tensor(codes, dtype=torch.float32)
    if z.ndim != 2 or z.shape[1] != params.latent_dim:
        raise ShapeError(
            f"codes must be (batch, {params.latent_dim}), got {tuple(z.shape)}"
        )
    with torch.no_grad():
        return params.discriminator(z).numpy()


def reconstruct(params: ModelParameters, batch, training_mode: bool = False) -> np.ndarray:
    """decode(encode(batch)); deterministic in inference mode."""
    x = _as_tensor(batch, params.input_shape)
    params.set_training_mode(training_mode)
    try:
        with torch.no_grad():
            return params.decoder(params.encoder(x)).numpy()
    finally:
        params.set_training_mode(False)
