"""Age-labelled corpora: group schemes, manifests, splits and ordered-pair sampling."""

from __future__ import annotations

import bisect
import csv
import logging
import math
import queue
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image as PILImage

from ._validation import (
    DatasetDegenerateError,
    InvalidInputError,
    check_fraction,
    check_positive_int,
)

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ("subject_id", "path", "age_years")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class GroupScheme:
    """Contiguous age bins given by ascending inclusive upper bounds.

    ``boundaries=(30, 40, 50)`` gives four groups: 0-30, 31-40, 41-50, 51+.
    """

    boundaries: tuple

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        if len(b) < 1:
            raise InvalidInputError("a group scheme needs at least one boundary (two groups)")
        if any(x < 0 for x in b) or any(lo >= hi for lo, hi in zip(b, b[1:])):
            raise InvalidInputError(f"boundaries must be non-negative and strictly ascending: {b}")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_groups(self) -> int:
        return len(self.boundaries) + 1

    def bounds(self, group: int) -> tuple[int, float]:
        """Inclusive (low, high) ages of ``group``; the last group is open-ended."""
        lo = 0 if group == 0 else self.boundaries[group - 1] + 1
        hi = self.boundaries[group] if group < len(self.boundaries) else math.inf
        return lo, hi

    def representative_age(self, group: int) -> int:
        """Midpoint age of a group; the open last group uses the previous bin width."""
        if not 0 <= group < self.n_groups:
            raise InvalidInputError(f"group {group} outside [0, {self.n_groups})")
        lo, hi = self.bounds(group)
        if math.isinf(hi):
            width = self.boundaries[-1] - (self.boundaries[-2] if len(self.boundaries) > 1 else 0)
            hi = lo + width - 1
        return (lo + int(hi)) // 2

    @classmethod
    def uniform(cls, n_groups: int, first: int = 30, width: int = 10) -> "GroupScheme":
        if n_groups < 2:
            raise InvalidInputError("n_groups must be at least 2")
        return cls(tuple(first + width * k for k in range(n_groups - 1)))


MORPH_SCHEME = GroupScheme((30, 40, 50))
CACD_SCHEME = MORPH_SCHEME
UTKFACE_SCHEME = GroupScheme((3, 11, 17, 29, 40, 55, 65, 80))


def assign_age_group(age_years, scheme: GroupScheme) -> int:
    if age_years < 0:
        raise InvalidInputError(f"age must be non-negative, got {age_years}")
    # bins are inclusive of their upper bound
    return bisect.bisect_left(scheme.boundaries, math.ceil(age_years))


def one_hot(group: int, n_groups: int) -> np.ndarray:
    if not 0 <= group < n_groups:
        raise InvalidInputError(f"group {group} outside [0, {n_groups})")
    vec = np.zeros(n_groups)
    vec[group] = 1.0
    return vec


@dataclass(frozen=True)
class FaceRecord:
    subject_id: str
    image_path: str
    age_years: int
    group: int

    def __post_init__(self):
        if self.age_years < 0:
            raise InvalidInputError(f"negative age for {self.image_path}")


def make_records(rows, scheme: GroupScheme) -> list[FaceRecord]:
    """Build records from (subject_id, path, age) triples, assigning groups."""
    return [FaceRecord(str(s), str(p), int(a), assign_age_group(int(a), scheme)) for s, p, a in rows]


def read_manifest(path, scheme: GroupScheme) -> list[FaceRecord]:
    """Read a ``subject_id,path,age_years`` CSV. Paths resolve against the manifest's directory."""
    path = Path(path)
    root = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise InvalidInputError(
                f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                age = int(row["age_years"])
            except (TypeError, ValueError):
                raise InvalidInputError(f"{path}:{lineno}: bad age_years {row['age_years']!r}") from None
            rows.append((row["subject_id"], str(root / row["path"]), age))
    return make_records(rows, scheme)


def write_manifest(records: Sequence[FaceRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.subject_id, r.image_path, r.age_years])
    return path


_AGE_PREFIX = re.compile(r"^(\d+)_")


def scan_directory(directory, scheme: GroupScheme) -> list[FaceRecord]:
    """Ingest ``AGE_*.ext`` files (UTKFace naming).

    Such corpora carry no subject ids, so the filename stem minus its last
    ``_``-separated field stands in; disjointness then holds only at file level.
    """
    directory = Path(directory)
    rows = []
    for f in sorted(directory.iterdir()):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        m = _AGE_PREFIX.match(f.name)
        if not m:
            logger.warning("skipping %s: no leading age field", f.name)
            continue
        stem = f.stem.rsplit("_", 1)[0] if f.stem.count("_") > 1 else f.stem
        rows.append((stem, str(f), int(m.group(1))))
    if rows:
        logger.warning(
            "%s: no subject ids available; grouping by filename prefix, "
            "subject-disjointness holds only at file granularity",
            directory,
        )
    return make_records(rows, scheme)


def load_image(path, resolution: int = 256) -> np.ndarray:
    """Read an image as H x W x 3 float32 in [-1, 1], bilinearly resized to ``resolution``."""
    try:
        with PILImage.open(path) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 127.5 - 1.0


def to_uint8(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image(image, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(image)).save(path, format="PNG")


def split_by_subject(records: Sequence[FaceRecord], train_fraction: float = 0.8, seed: int = 0):
    """Randomly assign whole subjects to train or test.

    The number of training subjects is ``round(train_fraction * n_subjects)``,
    so the image ratio follows the subject ratio only approximately when
    subjects have unequal image counts.
    """
    if not records:
        raise InvalidInputError("cannot split an empty record list")
    check_fraction(train_fraction, "train_fraction")
    subjects = sorted({r.subject_id for r in records})
    order = np.random.default_rng(seed).permutation(len(subjects))
    n_train = int(round(train_fraction * len(subjects)))
    train_ids = {subjects[i] for i in order[:n_train]}
    train = [r for r in records if r.subject_id in train_ids]
    test = [r for r in records if r.subject_id not in train_ids]
    return train, test


class OrderedPairBatch(NamedTuple):
    young_images: np.ndarray
    old_images: np.ndarray
    young_conditions: np.ndarray
    old_conditions: np.ndarray


def _by_group(records: Sequence[FaceRecord]) -> dict[int, list[FaceRecord]]:
    groups: dict[int, list[FaceRecord]] = {}
    for r in records:
        groups.setdefault(r.group, []).append(r)
    return groups


def sample_group_pairs(groups: Sequence[int], batch_size: int, rng, ordered: bool = True) -> np.ndarray:
    """Draw ``batch_size`` (young, old) group pairs.

    Ordered: uniform over pairs with young < old. Unordered: uniform over all
    pairs of distinct groups, in either order.
    """
    gs = sorted(groups)
    pairs = [(a, b) for a in gs for b in gs if a < b or (not ordered and a != b)]
    idx = rng.integers(len(pairs), size=batch_size)
    return np.array(pairs)[idx]


def sample_ordered_pair_batch(
    train: Sequence[FaceRecord],
    batch_size: int,
    rng_seed,
    *,
    n_groups: int | None = None,
    ordered: bool = True,
    image_fn: Callable[[FaceRecord], np.ndarray] | None = None,
    resolution: int = 256,
) -> OrderedPairBatch:
    """Sample an (unpaired) batch of young/old images with their conditions.

    A group pair is drawn uniformly among the valid pairs, then one record
    uniformly from each group, with replacement. ``image_fn`` maps a record to
    its image (defaults to reading it from disk at ``resolution``).
    """
    check_positive_int(batch_size, "batch_size")
    by_group = _by_group(train)
    if len(by_group) < 2:
        raise DatasetDegenerateError(
            f"ordered pairs need at least 2 distinct age groups, found {sorted(by_group)}"
        )
    n_groups = n_groups or max(by_group) + 1
    if max(by_group) >= n_groups:
        raise InvalidInputError(f"record group {max(by_group)} outside [0, {n_groups})")
    rng = np.random.default_rng(rng_seed)
    pairs = sample_group_pairs(list(by_group), batch_size, rng, ordered)
    image_fn = image_fn or (lambda r: load_image(r.image_path, resolution))
    young, old = [], []
    for gy, go in pairs:
        young.append(image_fn(by_group[gy][rng.integers(len(by_group[gy]))]))
        old.append(image_fn(by_group[go][rng.integers(len(by_group[go]))]))
    eye = np.eye(n_groups, dtype=np.float32)
    return OrderedPairBatch(
        np.stack(young).astype(np.float32),
        np.stack(old).astype(np.float32),
        eye[pairs[:, 0]],
        eye[pairs[:, 1]],
    )


def steps_per_epoch(n_records: int, batch_size: int) -> int:
    return max(1, math.ceil(n_records / batch_size))


class ImageCache:
    """Loads each record's image once; safe to share between producer threads."""

    def __init__(self, resolution: int):
        self.resolution = resolution
        self._images: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def __call__(self, record: FaceRecord) -> np.ndarray:
        img = self._images.get(record.image_path)
        if img is None:
            img = load_image(record.image_path, self.resolution)
            with self._lock:
                self._images[record.image_path] = img
        return img

    def preload(self, records: Sequence[FaceRecord]) -> "ImageCache":
        for r in records:
            self(r)
        return self


def prefetch_batches(
    make_batch: Callable[[int], OrderedPairBatch],
    steps: Sequence[int],
    workers: int = 1,
    depth: int = 4,
) -> Iterator[OrderedPairBatch]:
    """Yield ``make_batch(step)`` for each step, built by background threads.

    Batches come back in step order regardless of ``workers``; the bounded
    queue holds at most ``depth`` finished batches.
    """
    steps = list(steps)
    if workers <= 0:
        for s in steps:
            yield make_batch(s)
        return
    slots: dict[int, "queue.Queue"] = {s: queue.Queue(maxsize=1) for s in steps}
    budget = threading.Semaphore(depth)
    cursor = iter(steps)
    cursor_lock = threading.Lock()
    stop = threading.Event()

    def work():
        while not stop.is_set():
            # reserve a slot before claiming a step so the earliest pending step always has one
            budget.acquire()
            with cursor_lock:
                s = next(cursor, None)
            if s is None or stop.is_set():
                budget.release()
                return
            try:
                slots[s].put((make_batch(s), None))
            except Exception as exc:  # surfaced in the consumer thread
                slots[s].put((None, exc))

    threads = [threading.Thread(target=work, daemon=True) for _ in range(workers)]
    for t in threads:
        t.start()
    try:
        for s in steps:
            batch, exc = slots[s].get()
            budget.release()
            if exc is not None:
                raise exc
            yield batch
    finally:
        stop.set()
        for _ in threads:
            budget.release()
