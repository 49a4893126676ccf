import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agecycle import InvalidInputError, MORPH_SCHEME
from agecycle.evaluation import (
    EstimatorBackend,
    EvalReport,
    IdentityOracle,
    RemoteBackendError,
    build_oracle_backend,
    build_report,
    chance_group_error,
    decode_png,
    encode_png,
    group_classification_error,
    identity_preservation,
    remote_estimator_client,
    verification_scores,
)
from agecycle.synthetic import make_dataset


class MidpointBackend:
    """Returns a fixed age for every image."""

    def __init__(self, age):
        self.age = age

    def estimate_age(self, image):
        return self.age

    def verify(self, a, b):
        return 100.0 if np.array_equal(a, b) else 0.0


class LabelBackend:
    """Looks the age up from the image's first pixel, which tests encode as the group."""

    def estimate_age(self, image):
        return MORPH_SCHEME.representative_age(int(round(float(image[0, 0, 0]) * 10)))

    def verify(self, a, b):
        return 100.0 * float(np.exp(-np.abs(a - b).mean() * 20))


def coded(group):
    img = np.zeros((8, 8, 3))
    img[0, 0, 0] = group / 10
    return img


def test_midpoint_estimator_gives_zero_error():
    generated = [(coded(g), g) for g in range(4) for _ in range(3)]
    assert group_classification_error(generated, LabelBackend(), MORPH_SCHEME) == 0.0


def test_constant_estimator_error_three():
    generated = [(coded(3), 3) for _ in range(5)]
    assert group_classification_error(generated, MidpointBackend(20), MORPH_SCHEME) == 3.0


def test_group_error_needs_images_and_scheme():
    with pytest.raises(InvalidInputError):
        group_classification_error([], LabelBackend(), MORPH_SCHEME)
    with pytest.raises(InvalidInputError):
        group_classification_error([(coded(0), 0)], LabelBackend())


def test_identity_identical_outputs_full_rate():
    imgs = [np.random.default_rng(i).uniform(-1, 1, (8, 8, 3)) for i in range(6)]
    rate, mean = identity_preservation(imgs, imgs, MidpointBackend(30))
    assert rate == 1.0 and mean == 100.0


def test_identity_errors():
    with pytest.raises(InvalidInputError):
        identity_preservation([], [], MidpointBackend(30))
    with pytest.raises(InvalidInputError):
        identity_preservation([coded(0)], [coded(0), coded(1)], MidpointBackend(30))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=20), st.floats(0, 100), st.floats(0, 100))
def test_identity_rate_monotone_in_threshold(scores, t1, t2):
    class Fixed:
        def verify_pairs(self, a, b):
            return np.array(scores)

    imgs = [np.zeros((2, 2, 3))] * len(scores)
    lo, hi = sorted((t1, t2))
    assert identity_preservation(imgs, imgs, Fixed(), hi)[0] <= identity_preservation(imgs, imgs, Fixed(), lo)[0]


def test_chance_level_by_enumeration():
    # uniform guess over 4 groups, target 3: (3 + 2 + 1 + 0) / 4
    assert chance_group_error([3], 4) == pytest.approx(1.5)
    assert chance_group_error([1, 2, 3], 4) == pytest.approx((1.0 + 1.0 + 1.5) / 3)


def test_report_serialisation():
    inputs = [coded(g) for g in (1, 2, 3)]
    report = build_report(inputs, inputs, [1, 2, 3], LabelBackend(), MORPH_SCHEME, label="unit")
    assert isinstance(report, EvalReport)
    assert report.mean_group_error == 0.0 and report.identity_score == 1.0
    assert json.loads(report.to_json())["per_group"][0]["group"] == 1
    table = report.to_table()
    assert "Age Est. Error" in table and "Veri. Rate (%)" in table and "unit" in table


# ------------------------------------------------------------------ local oracles

@pytest.fixture(scope="module")
def procedural():
    images, groups, subjects = make_dataset(40, 4, 64, seed=99)
    return images, groups, subjects


@pytest.fixture(scope="module")
def oracle(procedural):
    images, _, subjects = procedural
    return build_oracle_backend(images, subjects, n_groups=4, resolution=64, exclude_subjects=set(subjects))


def test_oracle_backend_protocol(oracle):
    assert isinstance(oracle, EstimatorBackend)
    assert oracle.deterministic


def test_age_oracle_accuracy_on_renders(oracle, procedural):
    images, groups, _ = procedural
    error = group_classification_error(list(zip(images, groups)), oracle)
    assert error < 0.1


def test_age_oracle_survives_png_round_trip(oracle, procedural):
    images, groups, _ = procedural
    decoded = np.stack([decode_png(encode_png(img)) for img in images[:40]])
    assert group_classification_error(list(zip(decoded, groups[:40])), oracle) < 0.1


def test_identity_oracle_self_consistency(oracle, procedural):
    images, _, subjects = procedural
    # same subject, same group, after an 8-bit round trip
    decoded = np.stack([decode_png(encode_png(img)) for img in images])
    assert np.mean(oracle.identity_oracle.identify(decoded) == subjects) > 0.99
    rate, _ = identity_preservation(list(images), list(decoded), oracle)
    assert rate > 0.99


def test_identity_oracle_rejects_other_subjects(oracle, procedural):
    images, groups, subjects = procedural
    rng = np.random.default_rng(0)
    order = rng.permutation(len(images))
    others = [j for i, j in zip(range(len(images)), order) if subjects[i] != subjects[j]]
    pairs = [(images[i], images[j]) for i, j in zip(range(len(images)), order) if subjects[i] != subjects[j]]
    assert len(others) > 100
    rate, mean = identity_preservation([a for a, _ in pairs], [b for _, b in pairs], oracle)
    assert rate < 0.5


def test_identity_across_age_groups(oracle, procedural):
    images, groups, subjects = procedural
    young = images[groups == 0]
    old = images[groups == 3]
    rate, _ = identity_preservation(list(young), list(old), oracle)
    assert rate > 0.9


def test_identity_oracle_single_subject():
    imgs = np.zeros((2, 8, 8, 3))
    oracle = IdentityOracle().fit(imgs, ["a", "a"])
    assert oracle.scores(imgs, imgs) == pytest.approx([100.0, 100.0])


# ------------------------------------------------------------------ remote client

class _Handler(BaseHTTPRequestHandler):
    mode = "echo"
    calls = 0

    def do_POST(self):
        type(self).calls += 1
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.mode == "fail":
            self.send_response(500)
            self.end_headers()
            return
        if self.mode == "malformed":
            payload = b"{not json"
        elif self.path == "/estimate":
            assert decode_png(body["image"]).shape == (8, 8, 3)
            assert self.headers["Authorization"] == "Bearer secret"
            payload = json.dumps({"age": 35}).encode()
        elif self.path == "/verify":
            payload = json.dumps({"confidence": 88.5 if body["image_a"] == body["image_b"] else 3.0}).encode()
        else:
            self.send_response(404)
            self.end_headers()
            return
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    _Handler.calls = 0
    yield httpd, f"http://127.0.0.1:{httpd.server_address[1]}"
    httpd.shutdown()
    httpd.server_close()


def test_remote_echo(server):
    _, url = server
    _Handler.mode = "echo"
    client = remote_estimator_client(url, "secret", backoff=0.01)
    assert client.estimate_age(np.zeros((8, 8, 3))) == 35.0
    assert client.verify(np.zeros((8, 8, 3)), np.zeros((8, 8, 3))) == 88.5
    ages = client.estimate_ages(np.zeros((5, 8, 8, 3)))
    np.testing.assert_array_equal(ages, 35.0)
    scores = verification_scores([np.zeros((8, 8, 3))] * 2, [np.zeros((8, 8, 3)), np.ones((8, 8, 3))], client)
    np.testing.assert_array_equal(scores, [88.5, 3.0])


def test_remote_retries_then_fails(server):
    _, url = server
    _Handler.mode = "fail"
    client = remote_estimator_client(url, "secret", backoff=0.01)
    with pytest.raises(RemoteBackendError, match="3 attempts"):
        client.estimate_age(np.zeros((8, 8, 3)))
    assert _Handler.calls == 3


def test_remote_malformed_json_names_field(server):
    _, url = server
    _Handler.mode = "malformed"
    client = remote_estimator_client(url, backoff=0.01)
    with pytest.raises(RemoteBackendError, match="'age'"):
        client.estimate_age(np.zeros((8, 8, 3)))


def test_remote_failure_names_image_index(server):
    _, url = server
    _Handler.mode = "fail"
    client = remote_estimator_client(url, backoff=0.0)
    with pytest.raises(RemoteBackendError, match=r"image \d"):
        group_classification_error([(np.zeros((8, 8, 3)), 1)] * 2, client, MORPH_SCHEME)


def test_remote_unreachable():
    client = remote_estimator_client("http://127.0.0.1:9", backoff=0.0, timeout=0.5)
    with pytest.raises(RemoteBackendError):
        client.estimate_age(np.zeros((8, 8, 3)))
