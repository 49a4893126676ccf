"""Cyclic adversarial training of the progression/regression generator pair.

Each step samples a batch of unpaired (young, old) images and runs both
cycles on it:

* progression: ``young -> G_p(., old group) -> G_r(., young group)``, judged by D_p;
* regression:  ``old -> G_r(., young group) -> G_p(., old group)``, judged by D_r.

The discriminators are updated every step; the generators once every
``g_update_period`` steps.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from ._validation import DivergenceError, InvalidInputError
from .data import (
    FaceRecord,
    GroupScheme,
    ImageCache,
    OrderedPairBatch,
    read_manifest,
    sample_ordered_pair_batch,
    split_by_subject,
    steps_per_epoch,
)
from .discriminator import DiscriminatorConfig, PatchDiscriminator, init_discriminator
from .generator import AttentionGenerator, GeneratorConfig, GeneratorOutput, init_generator
from .losses import (
    LossReport,
    LossWeights,
    age_regression_loss,
    attention_activation_loss,
    lsgan_d_loss,
    lsgan_g_loss,
    reconstruction_loss,
)

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigError(InvalidInputError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid training config:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 24
    learning_rate: float = 1e-4
    g_update_period: int = 5
    resolution: int = 64
    n_groups: int = 4
    # "auto" calibrates on the first batch; otherwise a LossWeights
    weights: object = "auto"
    # fixed values that replace the calibrated (or given) weight of one term
    lambda_recon: float | None = None
    lambda_actv: float | None = None
    lambda_reg: float | None = None
    seed: int = 0
    use_attention: bool = True
    ordered_input: bool = True
    beta1: float = 0.5
    beta2: float = 0.999
    train_fraction: float = 0.8
    g_base_width: int = 8
    g_n_residual: int = 4
    g_stem_kernel: int = 7
    d_widths: tuple = (16, 32, 64, 128, 128, 128)
    fake_age_trains_d: bool = False
    num_threads: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.d_widths, (list, tuple)):
            object.__setattr__(self, "d_widths", tuple(int(w) for w in self.d_widths))
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []

        def positive_int(name):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                out.append(f"{name}: must be an integer >= 1, got {v!r}")

        for name in ("epochs", "batch_size", "g_update_period", "num_threads", "g_base_width",
                     "g_stem_kernel"):
            positive_int(name)
        if not isinstance(self.g_n_residual, int) or self.g_n_residual < 0:
            out.append(f"g_n_residual: must be an integer >= 0, got {self.g_n_residual!r}")
        if not isinstance(self.n_groups, int) or self.n_groups < 2:
            out.append(f"n_groups: need at least 2 age groups, got {self.n_groups!r}")
        if not isinstance(self.resolution, int) or self.resolution < 64 or self.resolution % 64:
            out.append(f"resolution: must be a positive multiple of 64, got {self.resolution!r}")
        if not isinstance(self.learning_rate, (int, float)) or not self.learning_rate >= 0:
            out.append(f"learning_rate: must be >= 0, got {self.learning_rate!r}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0 <= v < 1:
                out.append(f"{name}: must lie in [0, 1), got {v!r}")
        if not isinstance(self.train_fraction, (int, float)) or not 0 < self.train_fraction < 1:
            out.append(f"train_fraction: must lie in (0, 1), got {self.train_fraction!r}")
        if not (self.weights == "auto" or isinstance(self.weights, LossWeights)):
            out.append(f"weights: must be 'auto' or loss weights, got {self.weights!r}")
        for name in ("lambda_recon", "lambda_actv", "lambda_reg"):
            v = getattr(self, name)
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))
                                  or not math.isfinite(v) or v < 0):
                out.append(f"{name}: must be a finite number >= 0, got {v!r}")
        if len(self.d_widths) != 6:
            out.append(f"d_widths: need 6 layer widths, got {len(self.d_widths)}")
        if self.dtype not in _DTYPES:
            out.append(f"dtype: one of {sorted(_DTYPES)}, got {self.dtype!r}")
        for name in ("use_attention", "ordered_input", "fake_age_trains_d"):
            if not isinstance(getattr(self, name), bool):
                out.append(f"{name}: must be a boolean")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = "auto" if self.weights == "auto" else asdict(self.weights)
        d["d_widths"] = list(self.d_widths)
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            problems = [f"{k}: unknown field" for k in unknown]
            try:
                cls(**{k: v for k, v in values.items() if k in known})
            except ConfigError as exc:
                problems += exc.problems
            raise ConfigError(problems)
        return cls(**values)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def resolve_weights(self, weights: LossWeights) -> LossWeights:
        overrides = {k: float(getattr(self, k)) for k in ("lambda_recon", "lambda_actv", "lambda_reg")
                     if getattr(self, k) is not None}
        return replace(weights, **overrides)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            resolution=self.resolution,
            n_groups=self.n_groups,
            base_width=self.g_base_width,
            n_residual=self.g_n_residual,
            stem_kernel=self.g_stem_kernel,
            use_attention=self.use_attention,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(resolution=self.resolution, n_groups=self.n_groups, widths=self.d_widths)


@dataclass
class TrainState:
    config: TrainConfig
    g_p: AttentionGenerator
    g_r: AttentionGenerator
    d_p: PatchDiscriminator
    d_r: PatchDiscriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    step: int = 0
    weights: LossWeights | None = None

    def generators(self):
        return (self.g_p, self.g_r)

    def discriminators(self):
        return (self.d_p, self.d_r)

    def networks(self) -> dict:
        return {"g_p": self.g_p, "g_r": self.g_r, "d_p": self.d_p, "d_r": self.d_r}


def init_state(config: TrainConfig) -> TrainState:
    seeds = np.random.SeedSequence(config.seed).generate_state(4)
    g_p = init_generator(int(seeds[0]), config.generator_config()).to(config.torch_dtype)
    g_r = init_generator(int(seeds[1]), config.generator_config()).to(config.torch_dtype)
    d_p = init_discriminator(int(seeds[2]), config.discriminator_config()).to(config.torch_dtype)
    d_r = init_discriminator(int(seeds[3]), config.discriminator_config()).to(config.torch_dtype)
    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(itertools.chain(g_p.parameters(), g_r.parameters()), config.learning_rate, betas)
    opt_d = torch.optim.Adam(itertools.chain(d_p.parameters(), d_r.parameters()), config.learning_rate, betas)
    weights = None if config.weights == "auto" else config.resolve_weights(config.weights)
    return TrainState(config, g_p, g_r, d_p, d_r, opt_g, opt_d, 0, weights)


class BatchTensors(NamedTuple):
    young: torch.Tensor
    old: torch.Tensor
    young_cond: torch.Tensor
    old_cond: torch.Tensor


def batch_tensors(batch: OrderedPairBatch, dtype=torch.float32) -> BatchTensors:
    def img(a):
        return torch.from_numpy(np.ascontiguousarray(np.asarray(a).transpose(0, 3, 1, 2))).to(dtype)

    def cond(a):
        return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)

    return BatchTensors(img(batch.young_images), img(batch.old_images),
                        cond(batch.young_conditions), cond(batch.old_conditions))


class CycleLosses(NamedTuple):
    """Loss terms of one cycle (source -> target -> source) as 0-d tensors."""

    gan_g: torch.Tensor
    gan_d: torch.Tensor
    recon: torch.Tensor
    actv: torch.Tensor
    reg_fake: torch.Tensor
    reg_real: torch.Tensor
    translated: GeneratorOutput
    reconstructed: GeneratorOutput

    def values(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in
                ("gan_g", "gan_d", "recon", "actv", "reg_fake", "reg_real")}


def _translate(gen, inverse, src, src_cond, tgt_cond):
    out = gen(src, tgt_cond)
    return out, inverse(out.fused, src_cond)


def _judge(disc, out, back, src, src_cond, tgt_real, tgt_cond, detach_fake=False) -> CycleLosses:
    fake = out.fused.detach() if detach_fake else out.fused
    d_fake = disc(fake)
    # realism is judged against real images of the target domain; the age head
    # also learns from real images of the source domain
    d_real_tgt = disc(tgt_real)
    d_real_src = disc(src)
    return CycleLosses(
        gan_g=lsgan_g_loss(d_fake.patch_scores),
        gan_d=lsgan_d_loss(d_real_tgt.patch_scores, d_fake.patch_scores),
        recon=reconstruction_loss(back.fused, src),
        actv=attention_activation_loss(out.attention),
        reg_fake=age_regression_loss(d_fake.age_vector, tgt_cond),
        reg_real=age_regression_loss(d_real_src.age_vector, src_cond),
        translated=out,
        reconstructed=back,
    )


def _cycle(gen, inverse, disc, src, src_cond, tgt_real, tgt_cond) -> CycleLosses:
    out, back = _translate(gen, inverse, src, src_cond, tgt_cond)
    return _judge(disc, out, back, src, src_cond, tgt_real, tgt_cond)


def _as_tensors(state: TrainState, batch) -> BatchTensors:
    if isinstance(batch, BatchTensors):
        return batch
    return batch_tensors(batch, state.config.torch_dtype)


def _check_finite(losses: CycleLosses, where: str, step: int):
    vals = losses.values()
    bad = [k for k, v in vals.items() if not math.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite {', '.join(bad)} in {where} at step {step}", {"step": step, **vals})


def progression_cycle(state: TrainState, batch) -> CycleLosses:
    """young -> G_p(old condition) -> G_r(young condition), judged by D_p."""
    t = _as_tensors(state, batch)
    losses = _cycle(state.g_p, state.g_r, state.d_p, t.young, t.young_cond, t.old, t.old_cond)
    _check_finite(losses, "progression cycle", state.step)
    return losses


def regression_cycle(state: TrainState, batch) -> CycleLosses:
    """old -> G_r(young condition) -> G_p(old condition), judged by D_r."""
    t = _as_tensors(state, batch)
    losses = _cycle(state.g_r, state.g_p, state.d_r, t.old, t.old_cond, t.young, t.young_cond)
    _check_finite(losses, "regression cycle", state.step)
    return losses


def lambdas_from_losses(gan: float, recon: float, actv: float, reg: float) -> LossWeights:
    """Match each weighted term to the adversarial magnitude, then damp recon/actv by 10."""
    def ratio(name, value):
        if value == 0:
            logger.warning("raw %s loss is exactly 0 at calibration; using weight 1", name)
            return None
        return abs(gan) / abs(value)

    r, a, g = ratio("recon", recon), ratio("actv", actv), ratio("reg", reg)
    return LossWeights(
        lambda_recon=1.0 if r is None else r / 10.0,
        lambda_actv=1.0 if a is None else a / 10.0,
        lambda_reg=1.0 if g is None else g,
    )


def calibrate_lambdas(state: TrainState, batch) -> LossWeights:
    with torch.no_grad():
        p = progression_cycle(state, batch)
        r = regression_cycle(state, batch)
    gan = p.gan_g + p.gan_d + r.gan_g + r.gan_d
    return lambdas_from_losses(
        float(gan),
        float(p.recon + r.recon),
        float(p.actv + r.actv),
        float(p.reg_fake + p.reg_real + r.reg_fake + r.reg_real),
    )


@dataclass(frozen=True)
class StepReport(LossReport):
    """LossReport plus the two optimised objectives and the step number."""

    g_total: float = 0.0
    d_total: float = 0.0
    mean_attention: float = 0.0
    step: int = 0


def _report(p: CycleLosses, r: CycleLosses, w: LossWeights, step: int) -> StepReport:
    gan_g = float((p.gan_g + r.gan_g).detach())
    gan_d = float((p.gan_d + r.gan_d).detach())
    recon = float((p.recon + r.recon).detach())
    actv = float((p.actv + r.actv).detach())
    reg_fake = float((p.reg_fake + r.reg_fake).detach())
    reg_real = float((p.reg_real + r.reg_real).detach())
    reg = reg_fake + reg_real
    mean_att = 0.5 * float((p.translated.attention.mean() + r.translated.attention.mean()).detach())
    return StepReport(
        gan_g=gan_g,
        gan_d=gan_d,
        recon=recon,
        actv=actv,
        reg=reg,
        total=gan_g + gan_d + w.lambda_recon * recon + w.lambda_actv * actv + w.lambda_reg * reg,
        g_total=gan_g + w.lambda_recon * recon + w.lambda_actv * actv + w.lambda_reg * reg_fake,
        d_total=gan_d + w.lambda_reg * reg_real,
        mean_attention=mean_att,
        step=step,
    )


def _set_trainable(modules, flag: bool):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _nonfinite_params(state: TrainState) -> list[str]:
    bad = []
    for net_name, net in state.networks().items():
        for name, p in net.named_parameters():
            if not torch.isfinite(p).all():
                bad.append(f"{net_name}.{name}")
    return bad


def train_step(state: TrainState, batch) -> tuple[TrainState, StepReport]:
    """One discriminator update, plus a generator update every ``g_update_period`` steps.

    The returned report holds the loss values measured before this step's updates.
    """
    if state.weights is None:
        raise InvalidInputError("loss weights are not calibrated; call calibrate_lambdas first")
    cfg, w = state.config, state.weights
    step = state.step + 1
    update_g = step % cfg.g_update_period == 0
    t = _as_tensors(state, batch)

    with torch.set_grad_enabled(update_g):
        out_p, back_p = _translate(state.g_p, state.g_r, t.young, t.young_cond, t.old_cond)
        out_r, back_r = _translate(state.g_r, state.g_p, t.old, t.old_cond, t.young_cond)
    # fakes are detached here, so the discriminator objective reaches only D parameters
    with torch.enable_grad():
        p = _judge(state.d_p, out_p, back_p, t.young, t.young_cond, t.old, t.old_cond, detach_fake=True)
        r = _judge(state.d_r, out_r, back_r, t.old, t.old_cond, t.young, t.young_cond, detach_fake=True)
    for cyc, name in ((p, "progression cycle"), (r, "regression cycle")):
        _check_finite(cyc, name, step)
    report = _report(p, r, w, step)

    d_obj = p.gan_d + r.gan_d + w.lambda_reg * (p.reg_real + r.reg_real)
    if cfg.fake_age_trains_d:
        d_obj = d_obj + w.lambda_reg * (p.reg_fake + r.reg_fake)
    state.opt_d.zero_grad(set_to_none=True)
    d_obj.backward()
    state.opt_d.step()

    if update_g:
        _set_trainable(state.discriminators(), False)
        try:
            dp = state.d_p(p.translated.fused)
            dr = state.d_r(r.translated.fused)
            g_obj = (
                lsgan_g_loss(dp.patch_scores) + lsgan_g_loss(dr.patch_scores)
                + w.lambda_recon * (p.recon + r.recon)
                + w.lambda_actv * (p.actv + r.actv)
                + w.lambda_reg * (
                    age_regression_loss(dp.age_vector, t.old_cond)
                    + age_regression_loss(dr.age_vector, t.young_cond)
                )
            )
            state.opt_g.zero_grad(set_to_none=True)
            g_obj.backward()
            state.opt_g.step()
        finally:
            _set_trainable(state.discriminators(), True)

    bad = _nonfinite_params(state)
    if bad:
        raise DivergenceError(
            f"non-finite parameters after step {step}: {', '.join(bad[:5])}",
            {"step": step, "parameters": bad, **report.to_dict()},
        )
    state.step = step
    return state, report


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state: TrainState, path, extra: dict | None = None) -> Path:
    tensors = {}
    for net_name, net in state.networks().items():
        for name, value in net.state_dict().items():
            tensors[f"{net_name}.{name}"] = value.detach().cpu().numpy()
    opt_meta = {}
    for opt_name in ("opt_g", "opt_d"):
        sd = getattr(state, opt_name).state_dict()
        opt_meta[opt_name] = sd["param_groups"]
        for idx in sorted(sd["state"]):
            for key, value in sd["state"][idx].items():
                tensors[f"{opt_name}.state.{idx}.{key}"] = torch.as_tensor(value).cpu().numpy()
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "weights": None if state.weights is None else asdict(state.weights),
        "optimizers": opt_meta,
        "extra": extra or {},
    }
    return ckpt.write_archive(path, tensors, meta)


def load_checkpoint(path) -> TrainState:
    tensors, meta = ckpt.read_archive(path)
    config = TrainConfig.from_dict(meta["config"])
    state = init_state(config)
    for net_name, net in state.networks().items():
        prefix = net_name + "."
        sd = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
        net.load_state_dict(sd)
    for opt_name in ("opt_g", "opt_d"):
        prefix = opt_name + ".state."
        per_param: dict[int, dict] = {}
        for k, v in tensors.items():
            if k.startswith(prefix):
                idx, key = k[len(prefix):].split(".", 1)
                per_param.setdefault(int(idx), {})[key] = torch.from_numpy(v)
        groups = meta["optimizers"][opt_name]
        for g in groups:
            g["betas"] = tuple(g["betas"])
        getattr(state, opt_name).load_state_dict({"state": per_param, "param_groups": groups})
    state.step = int(meta["step"])
    state.weights = None if meta["weights"] is None else LossWeights(**meta["weights"])
    return state


def checkpoint_meta(path) -> dict:
    return ckpt.read_archive(path)[1]


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    """Face records plus a way to get each record's image."""

    records: list
    image_fn: Callable[[FaceRecord], np.ndarray]
    scheme: GroupScheme
    digest: str = ""

    @classmethod
    def from_manifest(cls, path, resolution: int, scheme: GroupScheme | None = None, n_groups: int = 4):
        scheme = scheme or GroupScheme.uniform(n_groups)
        records = read_manifest(path, scheme)
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        return cls(records, ImageCache(resolution), scheme, digest)

    @classmethod
    def from_arrays(cls, images, groups, subject_ids, scheme: GroupScheme | None = None):
        images = np.asarray(images, dtype=np.float32)
        groups = np.asarray(groups, dtype=int)
        scheme = scheme or GroupScheme.uniform(int(groups.max()) + 1)
        records = [
            FaceRecord(str(s), f"mem:{i}", scheme.representative_age(int(g)), int(g))
            for i, (g, s) in enumerate(zip(groups, subject_ids))
        ]
        lookup = {r.image_path: images[i] for i, r in enumerate(records)}
        h = hashlib.sha256(images.tobytes())
        h.update(groups.tobytes())
        h.update("\0".join(map(str, subject_ids)).encode())
        return cls(records, lambda r: lookup[r.image_path], scheme, h.hexdigest())

    def split(self, train_fraction: float, seed: int):
        return split_by_subject(self.records, train_fraction, seed)

    def images(self, records) -> np.ndarray:
        return np.stack([self.image_fn(r) for r in records])


def batch_for_step(config: TrainConfig, train: Sequence[FaceRecord], image_fn, step: int) -> OrderedPairBatch:
    """The batch consumed at global step ``step`` (1-based); a pure function of (config, step)."""
    return sample_ordered_pair_batch(
        train,
        config.batch_size,
        [config.seed, step],
        n_groups=config.n_groups,
        ordered=config.ordered_input,
        image_fn=image_fn,
        resolution=config.resolution,
    )


def latest_checkpoint(directory) -> Path | None:
    directory = Path(directory)
    found = sorted(directory.glob("epoch_*.ckpt"))
    return found[-1] if found else None


@dataclass
class FitResult:
    checkpoint: Path
    state: TrainState
    history: list = field(default_factory=list)
    test_records: list = field(default_factory=list)


def fit_state(
    config: TrainConfig,
    dataset: Dataset,
    checkpoint_dir=None,
    resume: bool = False,
    on_step: Callable[[StepReport], None] | None = None,
    max_steps: int | None = None,
) -> FitResult:
    """Train from scratch (or resume) and return the final state with its history."""
    torch.set_num_threads(config.num_threads)
    torch.use_deterministic_algorithms(True)
    train, test = dataset.split(config.train_fraction, config.seed)
    per_epoch = steps_per_epoch(len(train), config.batch_size)
    total = config.epochs * per_epoch
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    state = None
    if resume and ckpt_dir is not None:
        last = latest_checkpoint(ckpt_dir)
        if last is not None:
            state = load_checkpoint(last)
            if state.config != config:
                raise InvalidInputError(f"{last} was written with a different config")
            logger.info("resuming from %s at step %d", last, state.step)
    if state is None:
        state = init_state(config)
    if state.weights is None:
        calibrated = calibrate_lambdas(state, batch_for_step(config, train, dataset.image_fn, 1))
        state.weights = config.resolve_weights(calibrated)
        logger.info("calibrated loss weights: %s", state.weights)

    history = []
    path = None
    end = total if max_steps is None else min(total, max_steps)
    extra = {"dataset_sha256": dataset.digest, "steps_per_epoch": per_epoch}
    while state.step < end:
        batch = batch_for_step(config, train, dataset.image_fn, state.step + 1)
        state, report = train_step(state, batch)
        history.append(report)
        if on_step is not None:
            on_step(report)
        if ckpt_dir is not None and state.step % per_epoch == 0:
            path = save_checkpoint(state, ckpt_dir / f"epoch_{state.step // per_epoch:03d}.ckpt", extra)
    if ckpt_dir is not None:
        path = save_checkpoint(state, ckpt_dir / "final.ckpt", extra)
    return FitResult(path, state, history, test)


def fit(config: TrainConfig, dataset: Dataset, checkpoint_dir, resume: bool = False,
        on_step: Callable[[StepReport], None] | None = None) -> Path:
    """Run the full schedule, writing a checkpoint per epoch and a final one; returns the final path."""
    return fit_state(config, dataset, checkpoint_dir, resume, on_step).checkpoint


def jsonl_logger(path) -> Callable[[StepReport], None]:
    fh = open(path, "a", encoding="utf-8")

    def log(report: StepReport):
        fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
        fh.flush()

    log.close = fh.close
    return log


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
