"""Procedural face-like images with a known, additive aging operator.

Each subject seed fixes face shape, skin tone, background, hair and eye
spacing. Aging is applied on top of the identity render and touches only
three compactly supported regions:

* a forehead band and a chin band carrying horizontal sinusoidal wrinkles of
  amplitude ``WRINKLE_AMPLITUDE * g / (N - 1)``;
* two laugh-line arcs beside the mouth, darkened by
  ``LAUGH_LINE_DEPTH * g / (N - 1)``.

The wrinkle windows sit at fixed image coordinates, so :func:`wrinkle_energy`
can measure them without knowing the subject.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import InvalidInputError

WRINKLE_AMPLITUDE = 0.15
LAUGH_LINE_DEPTH = 0.3
# wrinkle period as a fraction of image height
WRINKLE_PERIOD = 1.0 / 16.0

# (u_center, v_center, u_half_width, v_half_width) in normalized coordinates
FOREHEAD_WINDOW = (0.5, 0.31, 0.15, 0.055)
CHIN_WINDOW = (0.5, 0.835, 0.09, 0.035)
WRINKLE_WINDOWS = (FOREHEAD_WINDOW, CHIN_WINDOW)

_LIGHT_SKIN = np.array([0.87, 0.68, 0.55])
_DARK_SKIN = np.array([0.38, 0.24, 0.16])


@dataclass(frozen=True)
class ProceduralFaceSpec:
    subject_seed: int
    group: int
    n_groups: int = 4
    resolution: int = 64

    def __post_init__(self):
        if self.n_groups < 2:
            raise InvalidInputError("n_groups must be at least 2")
        if not 0 <= self.group < self.n_groups:
            raise InvalidInputError(f"group {self.group} outside [0, {self.n_groups})")
        if self.resolution < 16:
            raise InvalidInputError("procedural faces need a resolution of at least 16")


@dataclass(frozen=True)
class _Identity:
    cx: float
    cy: float
    ax: float
    ay: float
    skin: np.ndarray
    background: np.ndarray
    hair: np.ndarray
    hairline: float
    eye_offset: float
    eye_color: np.ndarray
    mouth_width: float
    lip: np.ndarray


def _identity(subject_seed: int) -> _Identity:
    rng = np.random.default_rng([int(subject_seed), 0x5EED])
    t = rng.uniform()
    skin = (1 - t) * _LIGHT_SKIN + t * _DARK_SKIN + rng.uniform(-0.04, 0.04, 3)
    return _Identity(
        cx=0.5 + rng.uniform(-0.02, 0.02),
        cy=0.53 + rng.uniform(-0.015, 0.015),
        ax=rng.uniform(0.30, 0.36),
        ay=rng.uniform(0.39, 0.43),
        skin=skin,
        background=rng.uniform(0.05, 0.35, 3),
        hair=rng.uniform(0.02, 0.45) * rng.uniform(0.5, 1.0, 3),
        hairline=rng.uniform(0.8, 0.9),
        eye_offset=rng.uniform(0.10, 0.15),
        eye_color=rng.uniform(0.05, 0.3, 3),
        mouth_width=rng.uniform(0.07, 0.11),
        lip=np.array([rng.uniform(0.55, 0.8), rng.uniform(0.15, 0.3), rng.uniform(0.15, 0.3)]),
    )


def _grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(resolution) + 0.5) / resolution
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v


def _soft(inside: np.ndarray, resolution: int) -> np.ndarray:
    """Anti-aliased coverage from a signed distance (positive inside)."""
    return np.clip(inside * resolution + 0.5, 0.0, 1.0)


def _ellipse(u, v, cx, cy, rx, ry, resolution):
    r = np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2)
    return _soft((1.0 - r) * min(rx, ry), resolution)


def _paint(canvas, coverage, color):
    canvas += coverage[..., None] * (np.asarray(color) - canvas)


def _raised_cosine(x: np.ndarray) -> np.ndarray:
    """cos^2 bump on [-1, 1], exactly zero outside."""
    return np.where(np.abs(x) < 1.0, np.cos(0.5 * np.pi * np.clip(x, -1, 1)) ** 2, 0.0)


def _window(u, v, window) -> np.ndarray:
    uc, vc, hu, hv = window
    return _raised_cosine((u - uc) / hu) * _raised_cosine((v - vc) / hv)


def _wrinkle_pattern(v: np.ndarray, resolution: int) -> np.ndarray:
    return np.sin(2.0 * np.pi * v / WRINKLE_PERIOD)


def _laugh_lines(u, v, ident: _Identity) -> np.ndarray:
    out = np.zeros_like(u)
    ox, oy, radius, width = ident.cx, ident.cy + 0.04, 0.15, 0.022
    for side in (-1.0, 1.0):
        du, dv = (u - ox) * side, v - oy
        rho = np.hypot(du, dv)
        phi = np.degrees(np.arctan2(dv, du))
        # arc from 22 to 58 degrees below horizontal, tapered at both ends
        along = _raised_cosine((phi - 40.0) / 18.0)
        across = np.clip(1.0 - ((rho - radius) / width) ** 2, 0.0, None) ** 2
        out += along * across
    return out


def _aging_terms(ident: _Identity, resolution: int):
    u, v = _grid(resolution)
    wrinkles = sum(_window(u, v, w) for w in WRINKLE_WINDOWS) * _wrinkle_pattern(v, resolution)
    return wrinkles, _laugh_lines(u, v, ident)


def _base_face(ident: _Identity, resolution: int) -> np.ndarray:
    """Identity render in [0, 1] before aging."""
    u, v = _grid(resolution)
    img = np.empty((resolution, resolution, 3))
    img[:] = ident.background
    face = _ellipse(u, v, ident.cx, ident.cy, ident.ax, ident.ay, resolution)
    _paint(img, face, ident.skin)
    hair = _ellipse(u, v, ident.cx, ident.cy - 0.02, ident.ax * 1.12, ident.ay * 1.1, resolution)
    _paint(img, hair * _soft(ident.cy - ident.hairline * ident.ay - v, resolution), ident.hair)
    eye_y = ident.cy - 0.10
    for side in (-1.0, 1.0):
        ex = ident.cx + side * ident.eye_offset
        _paint(img, _ellipse(u, v, ex, eye_y, 0.055, 0.026, resolution), [0.95, 0.95, 0.92])
        _paint(img, _ellipse(u, v, ex, eye_y, 0.022, 0.022, resolution), ident.eye_color)
    _paint(img, _ellipse(u, v, ident.cx, ident.cy + 0.06, 0.025, 0.05, resolution), ident.skin * 0.8)
    _paint(
        img,
        _ellipse(u, v, ident.cx, ident.cy + 0.21, ident.mouth_width, 0.028, resolution),
        ident.lip,
    )
    return img


def aging_support(subject_seed: int, resolution: int = 64) -> np.ndarray:
    """Boolean H x W mask of pixels the aging operator may change for this subject."""
    wrinkles, lines = _aging_terms(_identity(subject_seed), resolution)
    return (wrinkles != 0) | (lines != 0)


def wrinkle_amplitude(group: int, n_groups: int) -> float:
    return WRINKLE_AMPLITUDE * group / (n_groups - 1)


def render_procedural_face(spec: ProceduralFaceSpec) -> np.ndarray:
    """Render an H x W x 3 face in [-1, 1] for ``spec.subject_seed`` at ``spec.group``."""
    ident = _identity(spec.subject_seed)
    img = _base_face(ident, spec.resolution) * 2.0 - 1.0
    if spec.group:
        frac = spec.group / (spec.n_groups - 1)
        wrinkles, lines = _aging_terms(ident, spec.resolution)
        delta = WRINKLE_AMPLITUDE * frac * wrinkles - LAUGH_LINE_DEPTH * frac * lines
        img = img + delta[..., None]
    return np.clip(img, -1.0, 1.0)


def _demodulation_weights(resolution: int):
    u, v = _grid(resolution)
    carrier = np.exp(-2j * np.pi * v[:, 0] / WRINKLE_PERIOD)
    weights = []
    for w in WRINKLE_WINDOWS:
        uc, vc, hu, hv = w
        wv = _raised_cosine((v[:, 0] - vc) / hv)
        wu = _raised_cosine((u[0] - uc) / hu)
        weights.append((wv / wv.sum(), wu / wu.sum()))
    return carrier, weights


def wrinkle_energy(image) -> float:
    """Band-pass energy at the wrinkle frequency inside the wrinkle windows.

    Each column of a window is mean-removed and demodulated at the wrinkle
    frequency; the squared magnitudes are averaged over columns and windows.
    Calibrated so a unit-amplitude wrinkle render gives 1.0; a flat image gives 0.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != img.shape[1]:
        raise InvalidInputError(f"expected a square H x W x C image, got {img.shape}")
    return _raw_energy(img.mean(axis=-1)) / _unit_energy(img.shape[0])


def _raw_energy(gray: np.ndarray) -> float:
    carrier, weights = _demodulation_weights(gray.shape[0])
    total = 0.0
    for wv, wu in weights:
        centered = gray - (wv @ gray)[None, :]
        coeff = (wv * carrier) @ centered
        total += float(wu @ np.abs(coeff) ** 2)
    return total / len(weights)


_UNIT_CACHE: dict[int, float] = {}


def _unit_energy(resolution: int) -> float:
    if resolution not in _UNIT_CACHE:
        u, v = _grid(resolution)
        pattern = sum(_window(u, v, w) for w in WRINKLE_WINDOWS) * _wrinkle_pattern(v, resolution)
        _UNIT_CACHE[resolution] = _raw_energy(pattern)
    return _UNIT_CACHE[resolution]


def subject_id(seed: int) -> str:
    return f"s{seed:06d}"


def make_dataset(n_subjects: int, n_groups: int = 4, resolution: int = 64, seed: int = 0, exclude=()):
    """Render every subject at every group.

    Returns (images, groups, subject_ids). Subject seeds are drawn from ``seed``
    so different dataset seeds give different people; subject ids listed in
    ``exclude`` are never drawn.
    """
    if n_groups < 2:
        raise InvalidInputError("n_groups must be at least 2")
    rng = np.random.default_rng(seed)
    banned = set(exclude)
    seeds = []
    while len(seeds) < n_subjects:
        for s in rng.choice(10 ** 6, size=n_subjects, replace=False):
            if subject_id(int(s)) not in banned and int(s) not in seeds and len(seeds) < n_subjects:
                seeds.append(int(s))
    images, groups, subjects = [], [], []
    for s in seeds:
        for g in range(n_groups):
            images.append(render_procedural_face(ProceduralFaceSpec(int(s), g, n_groups, resolution)))
            groups.append(g)
            subjects.append(subject_id(int(s)))
    return np.stack(images).astype(np.float32), np.array(groups), np.array(subjects)


def write_dataset(out_dir, n_subjects: int, n_groups: int = 4, resolution: int = 64, seed: int = 0) -> Path:
    """Render the dataset to PNG files plus a ``manifest.csv``; returns the manifest path."""
    from .data import GroupScheme, FaceRecord, save_image, write_manifest

    if n_groups < 2:
        raise InvalidInputError("n_groups must be at least 2; training needs two age groups")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    scheme = GroupScheme.uniform(n_groups)
    images, groups, subjects = make_dataset(n_subjects, n_groups, resolution, seed)
    records = []
    for img, g, sid in zip(images, groups, subjects):
        rel = Path("images") / f"{sid}_g{int(g)}.png"
        save_image(img, out / rel)
        records.append(FaceRecord(str(sid), str(rel), scheme.representative_age(int(g)), int(g)))
    return write_manifest(records, out / "manifest.csv")
