"""Age-translation accuracy and identity-preservation metrics.

Metrics are computed through an :class:`EstimatorBackend`: either the local
oracle (a frozen CNN age-group classifier plus a nearest-subject identity
matcher, both fitted on procedural faces) or a remote HTTP service.

Group errors are in age-group units, not years, and the verifier scores come
from the oracle, so absolute numbers are not comparable to published
face-analysis-service results; only relative comparisons are meaningful.
"""

from __future__ import annotations

import base64
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import requests
import torch
from PIL import Image as PILImage
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import InvalidInputError, check_image_batch
from .data import GroupScheme, assign_age_group, to_uint8

DEFAULT_THRESHOLD = 76.5


class EvaluationError(RuntimeError):
    pass


class RemoteBackendError(EvaluationError):
    pass


@runtime_checkable
class EstimatorBackend(Protocol):
    """Anything that can estimate an age in years and score a same-person pair in [0, 100]."""

    deterministic: bool

    def estimate_age(self, image) -> float: ...

    def verify(self, image_a, image_b) -> float: ...


# ---------------------------------------------------------------- local oracle

class _AgeNet(nn.Module):
    # batch norm matters here: without it the small age signal sits under
    # identity variation and training stalls at chance for some seeds
    def __init__(self, n_groups: int, resolution: int, width: int = 16):
        super().__init__()

        def block(c_in, c_out, **conv):
            return [nn.Conv2d(c_in, c_out, **conv), nn.BatchNorm2d(c_out), nn.ReLU()]

        self.features = nn.Sequential(
            *block(3, width, kernel_size=3, padding=1),
            *block(width, width, kernel_size=4, stride=2, padding=1),
            *block(width, 2 * width, kernel_size=4, stride=2, padding=1),
            *block(2 * width, 2 * width, kernel_size=4, stride=2, padding=1),
        )
        self.head = nn.Linear(2 * width * (resolution // 8) ** 2, n_groups)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


def _nchw(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


class AgeOracle(ClassifierMixin, BaseEstimator):
    """Small CNN age-group classifier trained on ground-truth procedural renders.

    Training applies 8-bit quantization and light Gaussian noise so the
    classifier tolerates PNG round trips and mild generator artifacts.
    """

    def __init__(self, epochs: int = 12, batch_size: int = 32, learning_rate: float = 1e-3,
                 noise: float = 0.02, width: int = 16, seed: int = 0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.noise = noise
        self.width = width
        self.seed = seed

    def fit(self, X, y):
        X = check_image_batch(X)
        y = np.asarray(y, dtype=int)
        if len(X) != len(y):
            raise InvalidInputError("X and y lengths differ")
        torch.manual_seed(self.seed)
        rng = np.random.default_rng(self.seed)
        self.classes_ = np.arange(int(y.max()) + 1)
        self.resolution_ = X.shape[1]
        self.net_ = _AgeNet(len(self.classes_), self.resolution_, self.width)
        opt = torch.optim.Adam(self.net_.parameters(), self.learning_rate)
        n_steps = self.epochs * -(-len(X) // self.batch_size)
        schedule = torch.optim.lr_scheduler.CosineAnnealingLR(opt, n_steps)
        X = to_uint8(X).astype(np.float32) / 127.5 - 1.0
        targets = torch.from_numpy(y)
        self.net_.train()
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                xb = X[idx] + rng.normal(0, self.noise, X[idx].shape).astype(np.float32)
                loss = nn.functional.cross_entropy(self.net_(_nchw(xb)), targets[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                schedule.step()
        self.net_.eval()
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_image_batch(X, self.resolution_)
        out = []
        with torch.no_grad():
            for start in range(0, len(X), 256):
                out.append(torch.softmax(self.net_(_nchw(X[start:start + 256])), dim=1).numpy())
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


def _downsample(images, factor: int) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    b, h, w, c = x.shape
    return x.reshape(b, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4)).reshape(b, -1)


class IdentityOracle(BaseEstimator):
    """Nearest-subject matching in a block-averaged pixel space.

    ``fit`` stores one template per subject (the mean of its downsampled
    images). An image's identity is a softmax over negative squared template
    distances; two images score ``100 * sum(sqrt(p_a * p_b))``, which is 100
    for identical images and near 0 when they resolve to different subjects.
    """

    def __init__(self, block: int = 8, temperature: float = 0.05):
        self.block = block
        self.temperature = temperature

    def fit(self, X, subject_ids):
        X = check_image_batch(X)
        ids = np.asarray(subject_ids)
        feats = _downsample(X, self.block)
        self.subjects_ = np.unique(ids)
        self.templates_ = np.stack([feats[ids == s].mean(axis=0) for s in self.subjects_])
        d = ((self.templates_[:, None] - self.templates_[None]) ** 2).mean(-1)
        off = d[~np.eye(len(d), dtype=bool)]
        # distances are scaled by the typical gap between distinct subjects
        self.scale_ = float(np.median(off)) if off.size else 1.0
        return self

    def _probabilities(self, X) -> np.ndarray:
        check_is_fitted(self, "templates_")
        feats = _downsample(check_image_batch(X), self.block)
        d = ((feats[:, None] - self.templates_[None]) ** 2).mean(-1) / self.scale_
        logits = -d / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def identify(self, X) -> np.ndarray:
        return self.subjects_[self._probabilities(X).argmax(axis=1)]

    def scores(self, A, B) -> np.ndarray:
        pa, pb = self._probabilities(A), self._probabilities(B)
        return 100.0 * np.clip(np.sqrt(pa * pb).sum(axis=1), 0.0, 1.0)


class OracleBackend:
    """Local estimator backend built from an :class:`AgeOracle` and an :class:`IdentityOracle`."""

    deterministic = True

    def __init__(self, age_oracle: AgeOracle, identity_oracle: IdentityOracle, scheme: GroupScheme):
        self.age_oracle = age_oracle
        self.identity_oracle = identity_oracle
        self.scheme = scheme

    def estimate_ages(self, images) -> np.ndarray:
        groups = self.age_oracle.predict(check_image_batch(images))
        return np.array([self.scheme.representative_age(int(g)) for g in groups], dtype=float)

    def estimate_age(self, image) -> float:
        return float(self.estimate_ages(np.asarray(image)[None])[0])

    def verify_pairs(self, images_a, images_b) -> np.ndarray:
        return self.identity_oracle.scores(images_a, images_b)

    def verify(self, image_a, image_b) -> float:
        return float(self.verify_pairs(np.asarray(image_a)[None], np.asarray(image_b)[None])[0])


def build_oracle_backend(
    identity_images,
    identity_subjects,
    n_groups: int = 4,
    resolution: int = 64,
    scheme: GroupScheme | None = None,
    n_oracle_subjects: int = 200,
    seed: int = 12345,
    exclude_subjects: Sequence[str] = (),
) -> OracleBackend:
    """Train the age oracle on fresh procedural subjects and index the given identities.

    ``exclude_subjects`` lists subject ids (``s######``) the age oracle must not see.
    """
    from .synthetic import make_dataset

    scheme = scheme or GroupScheme.uniform(n_groups)
    X, y, _ = make_dataset(n_oracle_subjects, n_groups, resolution, seed, exclude=exclude_subjects)
    age = AgeOracle(seed=seed).fit(X, y)
    ident = IdentityOracle().fit(identity_images, identity_subjects)
    return OracleBackend(age, ident, scheme)


# ---------------------------------------------------------------- remote backend

def encode_png(image) -> str:
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(image)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    with PILImage.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 127.5 - 1.0


class RemoteEstimator:
    """HTTP client for a remote age/verification service.

    Wire contract (JSON, UTF-8)::

        POST {endpoint}/estimate  {"image": <base64 PNG>}                  -> {"age": number}
        POST {endpoint}/verify    {"image_a": <b64>, "image_b": <b64>}     -> {"confidence": number in [0, 100]}

    Connection errors, timeouts and 5xx responses are retried with exponential
    backoff; after ``attempts`` tries the last failure is raised as
    :class:`RemoteBackendError`. Responses are never replaced by defaults.
    """

    deterministic = False

    def __init__(self, endpoint: str, credentials: str | None = None, timeout: float = 10.0,
                 attempts: int = 3, backoff: float = 0.5, max_concurrency: int = 4):
        self.endpoint = endpoint.rstrip("/")
        self.credentials = credentials
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.max_concurrency = max_concurrency
        self._session = requests.Session()

    def _post(self, route: str, payload: dict, field_name: str) -> float:
        url = f"{self.endpoint}/{route}"
        headers = {"Content-Type": "application/json; charset=utf-8"}
        if self.credentials:
            headers["Authorization"] = f"Bearer {self.credentials}"
        body = json.dumps(payload).encode("utf-8")
        last = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._session.post(url, data=body, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise RemoteBackendError(f"POST {url}: HTTP {resp.status_code}: {resp.text[:200]}")
            return self._parse(url, resp.content, field_name)
        raise RemoteBackendError(f"POST {url}: failed after {self.attempts} attempts ({last})")

    @staticmethod
    def _parse(url: str, content: bytes, field_name: str) -> float:
        try:
            doc = json.loads(content.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RemoteBackendError(f"POST {url}: malformed JSON response, expected field '{field_name}': {exc}") from exc
        if not isinstance(doc, dict) or field_name not in doc:
            raise RemoteBackendError(f"POST {url}: response missing field '{field_name}'")
        value = doc[field_name]
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise RemoteBackendError(f"POST {url}: field '{field_name}' is not a finite number: {value!r}")
        return float(value)

    def estimate_age(self, image) -> float:
        return self._post("estimate", {"image": encode_png(image)}, "age")

    def verify(self, image_a, image_b) -> float:
        score = self._post("verify", {"image_a": encode_png(image_a), "image_b": encode_png(image_b)}, "confidence")
        if not 0.0 <= score <= 100.0:
            raise RemoteBackendError(f"verify confidence {score} outside [0, 100]")
        return score

    def _indexed(self, fn, *columns) -> np.ndarray:
        def call(i, *args):
            try:
                return fn(*args)
            except RemoteBackendError as exc:
                raise RemoteBackendError(f"image {i}: {exc}") from exc

        with ThreadPoolExecutor(self.max_concurrency) as pool:
            return np.array(list(pool.map(call, range(len(columns[0])), *map(list, columns))), dtype=float)

    def estimate_ages(self, images) -> np.ndarray:
        return self._indexed(self.estimate_age, images)

    def verify_pairs(self, images_a, images_b) -> np.ndarray:
        return self._indexed(self.verify, images_a, images_b)


def remote_estimator_client(endpoint: str, credentials: str | None = None, **kwargs) -> RemoteEstimator:
    return RemoteEstimator(endpoint, credentials, **kwargs)


# ---------------------------------------------------------------- metrics

def _estimate_all(images, estimator) -> np.ndarray:
    batch = getattr(estimator, "estimate_ages", None)
    if batch is not None:
        return np.asarray(batch(images), dtype=float)
    out = []
    for i, img in enumerate(images):
        try:
            out.append(float(estimator.estimate_age(img)))
        except Exception as exc:
            raise EvaluationError(f"age estimation failed on image {i}: {exc}") from exc
    return np.array(out)


def group_errors(generated: Sequence, estimator, scheme: GroupScheme) -> np.ndarray:
    """Per-image |estimated group - target group| for ``(image, target group)`` pairs."""
    if len(generated) == 0:
        raise InvalidInputError("no generated images to evaluate")
    images = np.stack([np.asarray(img) for img, _ in generated])
    targets = np.array([int(t) for _, t in generated])
    ages = _estimate_all(images, estimator)
    estimated = np.array([assign_age_group(max(a, 0.0), scheme) for a in ages])
    return np.abs(estimated - targets).astype(float)


def group_classification_error(generated: Sequence, estimator, scheme: GroupScheme | None = None) -> float:
    scheme = scheme or getattr(estimator, "scheme", None)
    if scheme is None:
        raise InvalidInputError("a group scheme is required to map estimated ages to groups")
    return float(group_errors(generated, estimator, scheme).mean())


def verification_scores(inputs, outputs, estimator) -> np.ndarray:
    if len(inputs) != len(outputs):
        raise InvalidInputError(f"{len(inputs)} inputs but {len(outputs)} outputs")
    if len(inputs) == 0:
        raise InvalidInputError("no image pairs to verify")
    batch = getattr(estimator, "verify_pairs", None)
    if batch is not None:
        return np.asarray(batch(np.stack(inputs), np.stack(outputs)), dtype=float)
    return np.array([float(estimator.verify(a, b)) for a, b in zip(inputs, outputs)])


def identity_preservation(inputs, outputs, estimator, threshold: float = DEFAULT_THRESHOLD) -> tuple[float, float]:
    """(fraction of pairs scoring >= threshold, mean score)."""
    scores = verification_scores(inputs, outputs, estimator)
    return float(np.mean(scores >= threshold)), float(scores.mean())


@dataclass
class EvalReport:
    mean_group_error: float
    std_group_error: float
    identity_score: float
    mean_verification_score: float
    threshold: float
    n_groups: int
    per_group: list = field(default_factory=list)
    label: str = "model"
    note: str = "group-level error and oracle verification; not comparable to year-scale published numbers"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [
            f"{'':<12} {'Age Est. Error':>18} {'Veri. Rate (%)':>20}",
            f"{self.label:<12} {self.mean_group_error:>8.2f} +- {self.std_group_error:<6.2f}  "
            f"{100 * self.identity_score:>8.2f} ({self.mean_verification_score:.2f})",
            "",
            f"{'target':<8} {'n':>6} {'group error':>12} {'veri. rate (%)':>15}",
        ]
        for row in self.per_group:
            lines.append(
                f"{row['group']:<8} {row['n']:>6} {row['mean_group_error']:>12.3f} {100 * row['identity_rate']:>15.2f}"
            )
        return "\n".join(lines)


def build_report(inputs, outputs, targets, estimator, scheme: GroupScheme, threshold: float = DEFAULT_THRESHOLD,
                 label: str = "model") -> EvalReport:
    targets = np.asarray(targets, dtype=int)
    errors = group_errors(list(zip(outputs, targets)), estimator, scheme)
    scores = verification_scores(inputs, outputs, estimator)
    per_group = []
    for g in range(scheme.n_groups):
        sel = targets == g
        if sel.any():
            per_group.append({
                "group": g,
                "n": int(sel.sum()),
                "mean_group_error": float(errors[sel].mean()),
                "identity_rate": float(np.mean(scores[sel] >= threshold)),
            })
    return EvalReport(
        mean_group_error=float(errors.mean()),
        std_group_error=float(errors.std()),
        identity_score=float(np.mean(scores >= threshold)),
        mean_verification_score=float(scores.mean()),
        threshold=threshold,
        n_groups=scheme.n_groups,
        per_group=per_group,
        label=label,
    )


def chance_group_error(target_groups, n_groups: int) -> float:
    """Expected |guess - target| when the guess is uniform over the groups."""
    t = np.asarray(target_groups)
    guesses = np.arange(n_groups)
    return float(np.abs(guesses[None, :] - t[:, None]).mean())
