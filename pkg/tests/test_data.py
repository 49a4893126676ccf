import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy.stats import chisquare

from agecycle import (
    DatasetDegenerateError,
    FaceRecord,
    GroupScheme,
    InvalidInputError,
    MORPH_SCHEME,
    UTKFACE_SCHEME,
    assign_age_group,
    load_image,
    one_hot,
    sample_ordered_pair_batch,
    split_by_subject,
)
from agecycle.data import (
    ImageCache,
    prefetch_batches,
    read_manifest,
    sample_group_pairs,
    scan_directory,
    steps_per_epoch,
    write_manifest,
)


@pytest.mark.parametrize(
    "age, scheme, group",
    [(30, MORPH_SCHEME, 0), (35, MORPH_SCHEME, 1), (0, UTKFACE_SCHEME, 0), (31, MORPH_SCHEME, 1),
     (50, MORPH_SCHEME, 2), (51, MORPH_SCHEME, 3), (116, UTKFACE_SCHEME, 8), (3, UTKFACE_SCHEME, 0),
     (4, UTKFACE_SCHEME, 1), (81, UTKFACE_SCHEME, 8)],
)
def test_assign_age_group(age, scheme, group):
    assert assign_age_group(age, scheme) == group


def test_assign_age_group_rejects_negative():
    with pytest.raises(InvalidInputError):
        assign_age_group(-1, MORPH_SCHEME)


def test_scheme_sizes():
    assert MORPH_SCHEME.n_groups == 4
    assert UTKFACE_SCHEME.n_groups == 9
    with pytest.raises(InvalidInputError):
        GroupScheme((40, 30))
    with pytest.raises(InvalidInputError):
        GroupScheme(())


@pytest.mark.parametrize("scheme", [MORPH_SCHEME, UTKFACE_SCHEME, GroupScheme.uniform(6)])
def test_representative_age_lands_in_its_group(scheme):
    for g in range(scheme.n_groups):
        assert assign_age_group(scheme.representative_age(g), scheme) == g


def test_one_hot():
    np.testing.assert_array_equal(one_hot(0, 4), [1, 0, 0, 0])
    np.testing.assert_array_equal(one_hot(3, 4), [0, 0, 0, 1])
    with pytest.raises(InvalidInputError):
        one_hot(4, 4)


@given(st.integers(2, 12).flatmap(lambda n: st.tuples(st.integers(0, n - 1), st.just(n))))
def test_one_hot_round_trip(gn):
    g, n = gn
    assert int(np.argmax(one_hot(g, n))) == g


def _records(counts):
    recs = []
    for s, n in enumerate(counts):
        for k in range(n):
            recs.append(FaceRecord(f"subj{s}", f"img{s}_{k}.png", 20 + 10 * (k % 4), k % 4))
    return recs


def test_split_ten_subjects():
    train, test = split_by_subject(_records([1] * 10), 0.8, seed=3)
    assert (len(train), len(test)) == (8, 2)
    assert not {r.subject_id for r in train} & {r.subject_id for r in test}


def test_split_single_subject():
    train, test = split_by_subject(_records([5]), 0.8, seed=0)
    assert sorted([len(train), len(test)]) == [0, 5]


def test_split_unequal_counts_enumerated():
    rng = np.random.default_rng(0)
    records = _records(rng.integers(1, 9, size=100))
    train, test = split_by_subject(records, 0.8, seed=11)
    train_ids = {r.subject_id for r in train}
    test_ids = {r.subject_id for r in test}
    # every record lands on exactly one side and no subject straddles
    for r in records:
        assert (r.subject_id in train_ids) != (r.subject_id in test_ids)
    assert len(train) + len(test) == len(records)
    assert (len(train_ids), len(test_ids)) == (80, 20)


def test_split_is_deterministic():
    records = _records([2, 3, 1, 4, 2, 2])
    assert split_by_subject(records, 0.5, 4) == split_by_subject(records, 0.5, 4)


def test_split_errors():
    with pytest.raises(InvalidInputError):
        split_by_subject([], 0.8, 0)
    with pytest.raises(InvalidInputError):
        split_by_subject(_records([1]), 1.0, 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=30), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_always_disjoint(counts, fraction, seed):
    train, test = split_by_subject(_records(counts), fraction, seed)
    assert not {r.subject_id for r in train} & {r.subject_id for r in test}


def _image_fn(record):
    return np.full((4, 4, 3), record.group / 10, dtype=np.float32)


def _grouped(groups, per_group=3):
    return [FaceRecord(f"s{g}_{k}", f"{g}_{k}", 10 * g, g) for g in groups for k in range(per_group)]


def test_pairs_with_two_groups():
    batch = sample_ordered_pair_batch(_grouped([0, 2]), 16, 5, n_groups=4, image_fn=_image_fn)
    assert np.all(batch.young_conditions.argmax(1) == 0)
    assert np.all(batch.old_conditions.argmax(1) == 2)
    assert batch.young_images.shape == (16, 4, 4, 3)
    np.testing.assert_allclose(batch.old_images, 0.2, rtol=1e-6)


def test_pairs_need_two_groups():
    with pytest.raises(DatasetDegenerateError):
        sample_ordered_pair_batch(_grouped([1]), 4, 0, image_fn=_image_fn)


def test_pair_types_uniform_chi_square():
    rng = np.random.default_rng(123)
    pairs = sample_group_pairs([0, 1, 2], 10_000, rng)
    observed = [np.sum((pairs[:, 0] == a) & (pairs[:, 1] == b)) for a, b in [(0, 1), (0, 2), (1, 2)]]
    assert sum(observed) == 10_000
    assert chisquare(observed).pvalue > 0.01


def test_pair_batch_uniform_chi_square():
    batch = sample_ordered_pair_batch(_grouped([0, 1, 2]), 10_000, 99, n_groups=3, image_fn=_image_fn)
    y, o = batch.young_conditions.argmax(1), batch.old_conditions.argmax(1)
    observed = [np.sum((y == a) & (o == b)) for a, b in [(0, 1), (0, 2), (1, 2)]]
    assert sum(observed) == 10_000
    assert chisquare(observed).pvalue > 0.01


@settings(max_examples=25, deadline=None)
@given(st.sets(st.integers(0, 5), min_size=2), st.integers(1, 40), st.integers(0, 10 ** 6))
def test_ordered_batches_respect_order(groups, batch_size, seed):
    batch = sample_ordered_pair_batch(_grouped(sorted(groups), 1), batch_size, seed, n_groups=6,
                                      image_fn=_image_fn)
    assert np.all(batch.young_conditions.argmax(1) < batch.old_conditions.argmax(1))


def test_unordered_sampling_matches_all_distinct_pairs():
    rng = np.random.default_rng(7)
    pairs = sample_group_pairs([0, 1, 2], 12_000, rng, ordered=False)
    assert np.all(pairs[:, 0] != pairs[:, 1])
    reversed_frac = np.mean(pairs[:, 0] > pairs[:, 1])
    # half of the six distinct ordered pairs are reversed
    assert abs(reversed_frac - 0.5) < 0.03


def test_sampling_deterministic():
    recs = _grouped([0, 1, 3])
    a = sample_ordered_pair_batch(recs, 8, [1, 2], n_groups=4, image_fn=_image_fn)
    b = sample_ordered_pair_batch(recs, 8, [1, 2], n_groups=4, image_fn=_image_fn)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def _write_png(path, array):
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def test_load_image_values(tmp_path):
    _write_png(tmp_path / "gray.png", np.full((8, 8, 3), 128))
    _write_png(tmp_path / "black.png", np.zeros((8, 8, 3)))
    gray = load_image(tmp_path / "gray.png", resolution=8)
    np.testing.assert_allclose(gray, 128 / 127.5 - 1, atol=1e-6)
    assert abs(float(gray.mean()) - 0.0039) < 1e-4
    np.testing.assert_array_equal(load_image(tmp_path / "black.png", resolution=8), -1.0)


def test_load_image_resizes(tmp_path):
    rng = np.random.default_rng(0)
    _write_png(tmp_path / "big.png", rng.integers(0, 256, size=(512, 512, 3)))
    img = load_image(tmp_path / "big.png", resolution=256)
    assert img.shape == (256, 256, 3)
    assert img.min() >= -1 and img.max() <= 1


def test_load_image_grayscale_becomes_rgb(tmp_path):
    Image.fromarray(np.full((16, 16), 255, dtype=np.uint8), mode="L").save(tmp_path / "l.png")
    img = load_image(tmp_path / "l.png", resolution=16)
    assert img.shape == (16, 16, 3)
    np.testing.assert_array_equal(img, 1.0)


def test_load_image_errors_name_the_path(tmp_path):
    bad = tmp_path / "corrupt.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError, match="corrupt.png"):
        load_image(bad)
    with pytest.raises(OSError, match="missing.png"):
        load_image(tmp_path / "missing.png")


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2 ** 31))
def test_load_image_range(tmp_path_factory, h, w, seed):
    path = tmp_path_factory.mktemp("img") / "x.png"
    _write_png(path, np.random.default_rng(seed).integers(0, 256, size=(h, w, 3)))
    img = load_image(path, resolution=16)
    assert img.shape == (16, 16, 3)
    assert img.min() >= -1.0 and img.max() <= 1.0


def test_manifest_round_trip(tmp_path):
    (tmp_path / "imgs").mkdir()
    _write_png(tmp_path / "imgs" / "a.png", np.zeros((4, 4, 3)))
    records = [FaceRecord("alice", "imgs/a.png", 33, 1), FaceRecord("bob", "imgs/a.png", 52, 3)]
    path = write_manifest(records, tmp_path / "manifest.csv")
    assert path.read_text(encoding="utf-8").splitlines()[0] == "subject_id,path,age_years"
    loaded = read_manifest(path, MORPH_SCHEME)
    assert [(r.subject_id, r.age_years, r.group) for r in loaded] == [("alice", 33, 1), ("bob", 52, 3)]
    assert loaded[0].image_path == str(tmp_path / "imgs" / "a.png")


def test_manifest_rejects_bad_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,file,age\nx,y,3\n", encoding="utf-8")
    with pytest.raises(InvalidInputError, match="header"):
        read_manifest(p, MORPH_SCHEME)


def test_scan_directory_filename_ages(tmp_path, caplog):
    for name in ["25_0_1_20170109.jpg", "61_1_0_20170110.jpg", "readme.txt", "x_1.png"]:
        if name.endswith(".txt"):
            (tmp_path / name).write_text("hi")
        else:
            _write_png(tmp_path / name, np.zeros((4, 4, 3)))
    with caplog.at_level("WARNING"):
        records = scan_directory(tmp_path, UTKFACE_SCHEME)
    assert [(r.age_years, r.group) for r in records] == [(25, 3), (61, 6)]
    assert "file granularity" in caplog.text
    assert len({r.subject_id for r in records}) == 2


def test_steps_per_epoch():
    assert steps_per_epoch(1600, 24) == 67
    assert steps_per_epoch(24, 24) == 1
    assert steps_per_epoch(1, 24) == 1


def test_image_cache_loads_once(tmp_path):
    _write_png(tmp_path / "a.png", np.zeros((8, 8, 3)))
    rec = FaceRecord("a", str(tmp_path / "a.png"), 20, 0)
    cache = ImageCache(8)
    first = cache(rec)
    (tmp_path / "a.png").unlink()
    assert cache(rec) is first


@pytest.mark.parametrize("workers", [0, 1, 3])
def test_prefetch_preserves_order(workers):
    out = list(prefetch_batches(lambda s: s * s, range(20), workers=workers, depth=2))
    assert out == [s * s for s in range(20)]


def test_prefetch_propagates_errors():
    def make(s):
        if s == 3:
            raise ValueError("boom")
        return s

    with pytest.raises(ValueError, match="boom"):
        list(prefetch_batches(make, range(6), workers=2))
