"""Shared fixtures-as-functions: tiny networks, gradient checking and a straight-line loss oracle."""

from __future__ import annotations

import numpy as np
import torch

from agecycle.data import FaceRecord, sample_ordered_pair_batch
from agecycle.losses import LossWeights
from agecycle.synthetic import make_dataset
from agecycle.trainer import TrainConfig, batch_tensors, init_state

TINY = dict(
    resolution=64,
    n_groups=4,
    g_base_width=2,
    g_n_residual=1,
    g_stem_kernel=3,
    d_widths=(2, 2, 2, 2, 2, 2),
    batch_size=2,
)


def tiny_config(**kw) -> TrainConfig:
    params = {**TINY, "dtype": "float64", "weights": LossWeights(), **kw}
    return TrainConfig(**params)


def tiny_state(seed: int = 0, **kw):
    return init_state(tiny_config(seed=seed, **kw))


_FACES = {}


def faces(n_subjects: int = 6, seed: int = 0):
    key = (n_subjects, seed)
    if key not in _FACES:
        _FACES[key] = make_dataset(n_subjects, 4, 64, seed)
    return _FACES[key]


def tiny_batch(state, batch_size: int = 2, seed: int = 0):
    """A fixed ordered-pair batch of procedural faces as tensors in the state's dtype."""
    images, groups, subjects = faces()
    records = [FaceRecord(s, str(i), 0, int(g)) for i, (s, g) in enumerate(zip(subjects, groups))]
    batch = sample_ordered_pair_batch(records, batch_size, seed, n_groups=4,
                                      image_fn=lambda r: images[int(r.image_path)])
    return batch_tensors(batch, state.config.torch_dtype)


def probe_gradients(loss_fn, params, n_probe: int = 32, seed: int = 0, h: float = 1e-6):
    """Analytic and central-difference gradients on ``n_probe`` random scalar parameters.

    Returns (analytic, numeric) arrays of length ``n_probe``.
    """
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    flat_idx = rng.choice(sizes.sum(), size=n_probe, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = []
    for i in flat_idx:
        k = int(np.searchsorted(offsets, i, side="right") - 1)
        picks.append((params[k], int(i - offsets[k])))

    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = np.array([float(p.grad.reshape(-1)[j]) if p.grad is not None else 0.0 for p, j in picks])

    numeric = np.empty(n_probe)
    with torch.no_grad():
        for n, (p, j) in enumerate(picks):
            view = p.data.reshape(-1)
            orig = float(view[j])
            view[j] = orig + h
            up = float(loss_fn())
            view[j] = orig - h
            down = float(loss_fn())
            view[j] = orig
            numeric[n] = (up - down) / (2 * h)
    return analytic, numeric


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


# ------------------------------------------------------------------ oracle

def _nets_to_numpy(gen, images: np.ndarray, cond: np.ndarray):
    """Run only the convolutional stacks in torch; conditioning and fusion happen in numpy."""
    b, c, h, w = images.shape
    tiled = np.broadcast_to(cond[:, :, None, None], (b, cond.shape[1], h, w))
    x = torch.from_numpy(np.concatenate([images, tiled], axis=1))
    with torch.no_grad():
        stem = gen.stem(x)
        feats = gen.trunk(stem)
        rgb_logits = gen.image_head(torch.cat([gen.image_branch(feats), stem], 1)).numpy()
        att_logits = gen.attention_head(torch.cat([gen.attention_branch(feats), stem], 1)).numpy()
    rgb = np.tanh(rgb_logits)
    att = 1.0 / (1.0 + np.exp(-att_logits))
    fused = att * images + (1.0 - att) * rgb
    return rgb, att, fused


def _disc_numpy(disc, images: np.ndarray):
    with torch.no_grad():
        out = disc(torch.from_numpy(images))
    return out.patch_scores.numpy(), out.age_vector.numpy()


def straight_line_progression(state, batch) -> dict:
    """Independent recomputation of every progression-cycle term.

    young -> G_p(old condition) -> G_r(young condition); D_p judges the
    translation against real old images; its age head is scored on the fake
    (old target) and on the real young input.
    """
    young = batch.young.numpy()
    old = batch.old.numpy()
    yc = batch.young_cond.numpy()
    oc = batch.old_cond.numpy()

    _, att, fake = _nets_to_numpy(state.g_p, young, oc)
    _, _, back = _nets_to_numpy(state.g_r, fake, yc)
    fake_scores, fake_age = _disc_numpy(state.d_p, fake)
    real_scores, _ = _disc_numpy(state.d_p, old)
    _, src_age = _disc_numpy(state.d_p, young)

    n = young.shape[0]
    gan_d = np.mean((real_scores - 1.0) ** 2) + np.mean(fake_scores ** 2)
    gan_g = np.mean((fake_scores - 1.0) ** 2)
    recon = np.sum(np.abs(back - young)) / back.size
    hw = att.shape[-1] * att.shape[-2]
    actv = sum(np.sqrt(np.sum(att[i] ** 2)) / np.sqrt(hw) for i in range(n)) / n
    reg_fake = sum(np.sum((fake_age[i] - oc[i]) ** 2) for i in range(n)) / n
    reg_real = sum(np.sum((src_age[i] - yc[i]) ** 2) for i in range(n)) / n
    return dict(gan_g=gan_g, gan_d=gan_d, recon=recon, actv=actv, reg_fake=reg_fake, reg_real=reg_real)


def params_of(*modules):
    return [p for m in modules for p in m.parameters()]


def force_attention(gen, value: float):
    """Make the attention branch output a constant logit so the mask is ``sigmoid(value)``."""
    head = gen.attention_head
    with torch.no_grad():
        head.weight.zero_()
        head.bias.fill_(value)


def rescale_weights(state, factor: float = 10.0):
    """Multiply every conv/linear weight by ``factor``.

    At init the width-2 networks are nearly constant: many pre-activations
    sit within the finite-difference step of a ReLU or LeakyReLU kink and
    gradients are tiny, so central differences measure roundoff and kink
    crossings rather than the derivative. A larger weight scale keeps the
    check meaningful.
    """
    with torch.no_grad():
        for net in state.networks().values():
            for m in net.modules():
                if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d, torch.nn.Linear)):
                    m.weight.mul_(factor)
    return state
