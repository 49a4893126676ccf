"""scikit-learn style wrapper around the training loop and the two generators."""

from __future__ import annotations

import inspect

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import InvalidInputError, check_image_batch
from .data import GroupScheme
from .generator import GeneratorOutput
from .losses import LossWeights
from .trainer import Dataset, TrainConfig, TrainState, fit_state, load_checkpoint, save_checkpoint


def translate(state: TrainState, images, source_groups, target_groups, batch_size: int = 64) -> GeneratorOutput:
    """Translate each image from its source group to its target group.

    Older targets go through the progression generator, younger ones through
    the regression generator; equal groups return the input unchanged with a
    mask of ones. Returns numpy arrays (B x H x W x 3, B x H x W, B x H x W x 3).
    """
    images = check_image_batch(images, state.config.resolution).astype(np.float32)
    n = len(images)
    src = np.broadcast_to(np.asarray(source_groups, dtype=int), (n,))
    tgt = np.broadcast_to(np.asarray(target_groups, dtype=int), (n,))
    n_groups = state.config.n_groups
    if np.any((src < 0) | (src >= n_groups) | (tgt < 0) | (tgt >= n_groups)):
        raise InvalidInputError(f"groups must lie in [0, {n_groups})")
    rgb = images.copy()
    fused = images.copy()
    attention = np.ones(images.shape[:3], dtype=np.float32)
    dtype = state.config.torch_dtype
    eye = torch.eye(n_groups, dtype=dtype)
    with torch.no_grad():
        for gen, sel in ((state.g_p, tgt > src), (state.g_r, tgt < src)):
            idx = np.flatnonzero(sel)
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                x = torch.from_numpy(np.ascontiguousarray(images[chunk].transpose(0, 3, 1, 2))).to(dtype)
                out = gen(x, eye[tgt[chunk]])
                rgb[chunk] = out.rgb.permute(0, 2, 3, 1).numpy()
                fused[chunk] = out.fused.permute(0, 2, 3, 1).numpy()
                attention[chunk] = out.attention[:, 0].numpy()
    return GeneratorOutput(rgb, attention, fused)


def held_out_diagnostics(state: TrainState, dataset: Dataset, records=None) -> dict:
    """Cycle reconstruction, attention level and wrinkle ordering on held-out faces.

    ``records`` defaults to the test split of ``dataset`` under the state's
    config. Every record is translated to every other group and back:

    * ``recon``: mean absolute difference between the input and its round trip;
    * ``mean_attention``: mean mask value over those forward translations;
    * ``wrinkle_monotone``: fraction of subjects whose youngest image, pushed
      to each older group by the progression generator, shows strictly rising
      :func:`~agecycle.synthetic.wrinkle_energy` (input included).
    """
    from .synthetic import wrinkle_energy

    cfg = state.config
    if records is None:
        records = dataset.split(cfg.train_fraction, cfg.seed)[1]
    if not records:
        raise InvalidInputError("no held-out records to evaluate")
    n = cfg.n_groups
    pairs = [(r, t) for r in records for t in range(n) if t != r.group]
    images = dataset.images([r for r, _ in pairs])
    src = np.array([r.group for r, _ in pairs])
    tgt = np.array([t for _, t in pairs])
    fwd = translate(state, images, src, tgt)
    back = translate(state, fwd.fused, tgt, src)

    youngest = {}
    for r in records:
        if r.subject_id not in youngest or r.group < youngest[r.subject_id].group:
            youngest[r.subject_id] = r
    monotone = []
    for r in youngest.values():
        if r.group >= n - 1:
            continue
        x = dataset.image_fn(r)
        older = list(range(r.group + 1, n))
        out = translate(state, np.repeat(x[None], len(older), 0), r.group, older).fused
        energy = [wrinkle_energy(x)] + [wrinkle_energy(o) for o in out]
        monotone.append(bool(np.all(np.diff(energy) > 0)))
    return {
        "recon": float(np.abs(back.fused - images).mean()),
        "mean_attention": float(fwd.attention.mean()),
        "wrinkle_monotone": float(np.mean(monotone)) if monotone else float("nan"),
        "n_records": len(records),
        "n_subjects": len(monotone),
    }


class AgeTranslator(TransformerMixin, BaseEstimator):
    """Unified age progression/regression model.

    ``fit(X, y, subject_ids)`` trains on images ``X`` (n x H x W x 3 in
    [-1, 1]) with age-group labels ``y``; images sharing a subject id stay on
    the same side of the internal train/test split. ``transform`` renders the
    images at new target groups.
    """

    def __init__(self, epochs=30, batch_size=24, learning_rate=1e-4, g_update_period=5, resolution=64,
                 n_groups=4, weights="auto", lambda_recon=None, lambda_actv=None, lambda_reg=None, seed=0,
                 use_attention=True, ordered_input=True, beta1=0.5, beta2=0.999, train_fraction=0.8,
                 g_base_width=8, g_n_residual=4, g_stem_kernel=7, d_widths=(16, 32, 64, 128, 128, 128),
                 fake_age_trains_d=False, num_threads=1, dtype="float32", checkpoint_dir=None, max_steps=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.g_update_period = g_update_period
        self.resolution = resolution
        self.n_groups = n_groups
        self.weights = weights
        self.lambda_recon = lambda_recon
        self.lambda_actv = lambda_actv
        self.lambda_reg = lambda_reg
        self.seed = seed
        self.use_attention = use_attention
        self.ordered_input = ordered_input
        self.beta1 = beta1
        self.beta2 = beta2
        self.train_fraction = train_fraction
        self.g_base_width = g_base_width
        self.g_n_residual = g_n_residual
        self.g_stem_kernel = g_stem_kernel
        self.d_widths = d_widths
        self.fake_age_trains_d = fake_age_trains_d
        self.num_threads = num_threads
        self.dtype = dtype
        self.checkpoint_dir = checkpoint_dir
        self.max_steps = max_steps

    def _config(self) -> TrainConfig:
        names = set(inspect.signature(TrainConfig).parameters)
        params = {k: v for k, v in self.get_params().items() if k in names}
        if isinstance(params["weights"], dict):
            params["weights"] = LossWeights(**params["weights"])
        return TrainConfig(**params)

    def fit(self, X, y, subject_ids=None):
        X = check_image_batch(X, self.resolution)
        y = np.asarray(y, dtype=int)
        if len(y) != len(X):
            raise InvalidInputError(f"{len(X)} images but {len(y)} labels")
        if subject_ids is None:
            subject_ids = [f"img{i}" for i in range(len(X))]
        dataset = Dataset.from_arrays(X, y, subject_ids, GroupScheme.uniform(self.n_groups))
        result = fit_state(self._config(), dataset, self.checkpoint_dir, max_steps=self.max_steps)
        self.state_ = result.state
        self.history_ = result.history
        self.weights_ = result.state.weights
        self.checkpoint_ = result.checkpoint
        test_ids = {r.subject_id for r in result.test_records}
        self.test_mask_ = np.array([str(s) in test_ids for s in subject_ids])
        return self

    def translate(self, X, source_groups, target_groups) -> GeneratorOutput:
        check_is_fitted(self, "state_")
        return translate(self.state_, X, source_groups, target_groups)

    def transform(self, X, source_groups=None, target_groups=None):
        """Fused output images; both group arguments are required (scalars broadcast)."""
        if source_groups is None or target_groups is None:
            raise InvalidInputError("transform needs source_groups and target_groups")
        return self.translate(X, source_groups, target_groups).fused

    def attention_maps(self, X, source_groups, target_groups) -> np.ndarray:
        return self.translate(X, source_groups, target_groups).attention

    def save(self, path):
        check_is_fitted(self, "state_")
        return save_checkpoint(self.state_, path)

    @classmethod
    def from_checkpoint(cls, path) -> "AgeTranslator":
        state = load_checkpoint(path)
        cfg = state.config.to_dict()
        if cfg["weights"] != "auto":
            cfg["weights"] = dict(cfg["weights"])
        est = cls(**{k: v for k, v in cfg.items() if k in cls._get_param_names()})
        est.state_ = state
        est.weights_ = state.weights
        est.checkpoint_ = path
        return est
