"""Scalar training objectives.

All functions take torch tensors (or array-likes, converted to float64
tensors) and return 0-d tensors so they can sit inside an autograd graph.
Pixel and patch terms are means, keeping magnitudes independent of the
resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from ._validation import InvalidInputError


@dataclass(frozen=True)
class LossWeights:
    lambda_recon: float = 1.0
    lambda_actv: float = 1.0
    lambda_reg: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class LossReport:
    gan_g: float
    gan_d: float
    recon: float
    actv: float
    reg: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _same_shape(a, b, what: str):
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def lsgan_d_loss(real_scores, fake_scores) -> torch.Tensor:
    """Least-squares discriminator objective: real patches toward 1, fake toward 0."""
    real, fake = _t(real_scores), _t(fake_scores)
    _same_shape(real, fake, "lsgan_d_loss")
    return ((real - 1.0) ** 2).mean() + (fake ** 2).mean()


def lsgan_g_loss(fake_scores) -> torch.Tensor:
    return ((_t(fake_scores) - 1.0) ** 2).mean()


def reconstruction_loss(recon, original) -> torch.Tensor:
    recon, original = _t(recon), _t(original)
    _same_shape(recon, original, "reconstruction_loss")
    return (recon - original).abs().mean()


def attention_activation_loss(mask) -> torch.Tensor:
    """L2 norm of each H x W mask divided by sqrt(H * W), averaged over leading axes.

    Accepts H x W, B x H x W or B x 1 x H x W.
    """
    mask = _t(mask)
    if mask.ndim < 2:
        raise InvalidInputError("attention mask must be at least 2-D")
    with torch.no_grad():
        if mask.numel() and (mask.min() < 0 or mask.max() > 1):
            raise InvalidInputError("attention mask entries must lie in [0, 1]")
    area = mask.shape[-2] * mask.shape[-1]
    flat = mask.reshape(-1, area)
    return (torch.linalg.vector_norm(flat, dim=1) / math.sqrt(area)).mean()


def age_regression_loss(pred, target) -> torch.Tensor:
    """Squared L2 distance between predicted age vectors and one-hot targets, batch mean."""
    pred, target = _t(pred), _t(target).to(_t(pred).dtype)
    _same_shape(pred, target, "age_regression_loss")
    if pred.ndim == 1:
        return ((pred - target) ** 2).sum()
    return ((pred - target) ** 2).sum(dim=-1).mean()


def total_loss(gan, recon, actv, reg, weights: LossWeights):
    parts = {"gan": gan, "recon": recon, "actv": actv, "reg": reg}
    for name, value in parts.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {name} loss: {v}")
    return gan + weights.lambda_recon * recon + weights.lambda_actv * actv + weights.lambda_reg * reg
