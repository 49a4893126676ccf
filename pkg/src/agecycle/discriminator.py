"""PatchGAN-style discriminator with an auxiliary age-regression head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from ._validation import InvalidInputError, check_image_batch

N_CONV_LAYERS = 6


@dataclass(frozen=True)
class DiscriminatorConfig:
    resolution: int = 64
    n_groups: int = 4
    # widths of the six stride-2 layers
    widths: tuple = (32, 64, 128, 256, 512, 512)
    negative_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != N_CONV_LAYERS:
            raise InvalidInputError(f"discriminator needs exactly {N_CONV_LAYERS} widths")
        if self.resolution % (2 ** N_CONV_LAYERS):
            raise InvalidInputError(f"resolution must be a multiple of {2 ** N_CONV_LAYERS}")

    @property
    def patch_size(self) -> int:
        return self.resolution // 2 ** N_CONV_LAYERS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class DiscriminatorOutput(NamedTuple):
    patch_scores: torch.Tensor
    age_vector: torch.Tensor


class PatchDiscriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        in_ch = 3
        for width in config.widths:
            layers += [
                nn.Conv2d(in_ch, width, 4, stride=2, padding=1),
                nn.LeakyReLU(config.negative_slope),
            ]
            in_ch = width
        self.features = nn.Sequential(*layers)
        # 4x4 stride-1 conv that keeps the spatial size (asymmetric padding handles even kernels)
        self.patch_head = nn.Sequential(nn.ZeroPad2d((1, 2, 1, 2)), nn.Conv2d(in_ch, 1, 4))
        self.age_head = nn.Linear(in_ch * config.patch_size ** 2, config.n_groups)

    def forward(self, images: torch.Tensor) -> DiscriminatorOutput:
        res = self.config.resolution
        if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != (res, res):
            raise InvalidInputError(
                f"discriminator expects B x 3 x {res} x {res}, got {tuple(images.shape)}"
            )
        h = self.features(images)
        return DiscriminatorOutput(self.patch_head(h)[:, 0], self.age_head(h.flatten(1)))


def init_discriminator(seed: int, config: DiscriminatorConfig = DiscriminatorConfig()) -> PatchDiscriminator:
    """He-normal weights (LeakyReLU gain), zero biases, drawn deterministically from ``seed``.

    With no normalisation layers, small fixed-scale weights shrink the signal
    about a thousandfold over six layers and the age head stops learning.
    """
    gen = torch.Generator().manual_seed(int(seed))
    model = PatchDiscriminator(config)
    gain = np.sqrt(2.0 / (1.0 + config.negative_slope ** 2))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                std = gain / np.sqrt(module.weight[0].numel())
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
                module.bias.zero_()
    return model


def discriminator_forward(model: PatchDiscriminator, image) -> tuple[np.ndarray, np.ndarray]:
    """Score an H x W x 3 image (or a batch). Returns (patch map, age vector) as numpy."""
    single = np.asarray(image).ndim == 3
    images = check_image_batch(image, model.config.resolution)
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)
    with torch.no_grad():
        out = model(x)
    scores, ages = out.patch_scores.numpy(), out.age_vector.numpy()
    if single:
        return scores[0], ages[0]
    return scores, ages
