"""Attention-based conditional generator.

One instance renders age progression, a second (same architecture, separate
weights) renders regression. Each has a shared encoder/residual trunk feeding
two decoders: an image branch producing an RGB proposal in [-1, 1] and an
attention branch producing a single-channel mask in [0, 1]. The output is the
per-pixel convex combination

    fused = mask * input + (1 - mask) * rgb

so mask == 1 keeps the input pixel and mask == 0 takes the proposal.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from ._validation import InvalidInputError, check_image_batch, check_one_hot


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 64
    n_groups: int = 4
    base_width: int = 16
    n_downsample: int = 2
    n_residual: int = 4
    stem_kernel: int = 7
    use_attention: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


class GeneratorOutput(NamedTuple):
    rgb: torch.Tensor
    attention: torch.Tensor
    fused: torch.Tensor


def inject_condition(image, condition):
    """Tile each condition entry to a full plane and append it to the image channels.

    Accepts either a single H x W x 3 array with a length-N one-hot vector
    (returns H x W x (3 + N)), or torch tensors B x 3 x H x W with B x N
    conditions (returns B x (3 + N) x H x W).
    """
    if isinstance(image, torch.Tensor):
        if image.ndim != 4:
            raise InvalidInputError(f"expected B x C x H x W tensor, got shape {tuple(image.shape)}")
        cond = condition.to(dtype=image.dtype)
        if cond.ndim != 2 or cond.shape[0] != image.shape[0]:
            raise InvalidInputError("condition must be B x N matching the image batch")
        planes = cond[:, :, None, None].expand(-1, -1, image.shape[2], image.shape[3])
        return torch.cat([image, planes], dim=1)

    cond = check_one_hot(condition)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise InvalidInputError(f"expected H x W x C image, got shape {img.shape}")
    if cond.ndim != 1:
        raise InvalidInputError("a single image takes a single condition vector")
    planes = np.broadcast_to(cond, img.shape[:2] + cond.shape)
    return np.concatenate([img, planes], axis=-1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1, bias=False),
            nn.InstanceNorm2d(width, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1, bias=False),
            nn.InstanceNorm2d(width, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


def _decoder(width: int, n_up: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for _ in range(n_up):
        layers += [
            nn.ConvTranspose2d(width, width // 2, 4, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(width // 2, affine=True),
            nn.ReLU(inplace=True),
        ]
        width //= 2
    return nn.Sequential(*layers)


class AttentionGenerator(nn.Module):
    """Encoder, residual bottleneck, then image and attention decoders.

    Both output heads also see the full-resolution stem features (a single
    U-Net style skip), which lets the image branch copy fine detail instead of
    rebuilding it through the bottleneck.
    """

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        if config.resolution % (2 ** config.n_downsample):
            raise InvalidInputError("resolution must be divisible by 2**n_downsample")
        self.config = config
        base, k = config.base_width, config.stem_kernel
        self.stem = nn.Sequential(
            nn.Conv2d(3 + config.n_groups, base, k, padding=k // 2, bias=False),
            nn.InstanceNorm2d(base, affine=True),
            nn.ReLU(inplace=True),
        )
        layers: list[nn.Module] = []
        width = base
        for _ in range(config.n_downsample):
            layers += [
                nn.Conv2d(width, width * 2, 4, stride=2, padding=1, bias=False),
                nn.InstanceNorm2d(width * 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            width *= 2
        layers += [ResidualBlock(width) for _ in range(config.n_residual)]
        self.trunk = nn.Sequential(*layers)
        self.image_branch = _decoder(width, config.n_downsample)
        self.attention_branch = _decoder(width, config.n_downsample)
        self.image_head = nn.Conv2d(2 * base, 3, k, padding=k // 2)
        self.attention_head = nn.Conv2d(2 * base, 1, k, padding=k // 2)

    def logits(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Image and attention pre-activations for an already conditioned input."""
        stem = self.stem(x)
        features = self.trunk(stem)
        rgb = self.image_head(torch.cat([self.image_branch(features), stem], dim=1))
        att = self.attention_head(torch.cat([self.attention_branch(features), stem], dim=1))
        return rgb, att

    def forward(self, images: torch.Tensor, conditions: torch.Tensor) -> GeneratorOutput:
        """``images`` is B x 3 x H x W in [-1, 1]; ``conditions`` is B x N one-hot."""
        res = self.config.resolution
        if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != (res, res):
            raise InvalidInputError(
                f"generator expects B x 3 x {res} x {res}, got {tuple(images.shape)}"
            )
        if conditions.shape != (images.shape[0], self.config.n_groups):
            raise InvalidInputError(
                f"conditions must be {images.shape[0]} x {self.config.n_groups}, "
                f"got {tuple(conditions.shape)}"
            )
        rgb_logits, att_logits = self.logits(inject_condition(images, conditions))
        rgb = torch.tanh(rgb_logits)
        if not self.config.use_attention:
            # ablation: no attention branch, the proposal is the output
            return GeneratorOutput(rgb, torch.zeros_like(rgb[:, :1]), rgb)
        attention = torch.sigmoid(att_logits)
        fused = attention * images + (1.0 - attention) * rgb
        return GeneratorOutput(rgb, attention, fused)


def init_generator(seed: int, config: GeneratorConfig = GeneratorConfig()) -> AttentionGenerator:
    """Build a generator with weights drawn deterministically from ``seed``.

    Convolutions use N(0, 0.02) weights. The attention head bias starts at
    zero so the initial mask sits near 0.5.
    """
    gen = torch.Generator().manual_seed(int(seed))
    model = AttentionGenerator(config)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * 0.02)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.InstanceNorm2d) and module.affine:
                module.weight.copy_(1.0 + torch.randn(module.weight.shape, generator=gen) * 0.02)
                module.bias.zero_()
    return model


def _to_nchw(images: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)


def generator_forward(model: AttentionGenerator, image, condition) -> GeneratorOutput:
    """Run the generator on H x W x 3 (or B x H x W x 3) numpy input.

    Returns numpy arrays: rgb and fused as ... x H x W x 3, attention as
    ... x H x W, with the batch axis dropped when a single image was given.
    """
    single = np.asarray(image).ndim == 3
    images = check_image_batch(image, model.config.resolution)
    if images.min() < -1.0 or images.max() > 1.0:
        raise InvalidInputError("image values must lie in [-1, 1]")
    cond = check_one_hot(condition, model.config.n_groups)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (images.shape[0], cond.size))
    if cond.shape[0] != images.shape[0]:
        raise InvalidInputError("one condition per image is required")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(_to_nchw(images, dtype), torch.from_numpy(np.array(cond)).to(dtype))
    rgb = out.rgb.permute(0, 2, 3, 1).numpy()
    fused = out.fused.permute(0, 2, 3, 1).numpy()
    attention = out.attention[:, 0].numpy()
    if single:
        return GeneratorOutput(rgb[0], attention[0], fused[0])
    return GeneratorOutput(rgb, attention, fused)
