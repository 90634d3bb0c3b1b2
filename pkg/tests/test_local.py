import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdva.errors import CorruptTensor, ImageTooSmall
from cdva.local import (DESC_LEN, Keypoint, ScaleSpace, DetectorConfig, compute_descriptor, detect_log_alp,
                        extract_local, inverse_transform, normalize_descriptor, read_tau, score_keypoints,
                        score_relevance, select_top, ternary_distance, ternary_distance_matrix,
                        ternary_quantize, train_tau, transform, write_tau)

SQRT2 = np.sqrt(2.0)


def blob_image(centers, sigma, size=(128, 128), amp=1.0):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = np.full(size, 0.2)
    for cx, cy in centers:
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
    return img


def textured(seed=0, size=(96, 112)):
    rng = np.random.default_rng(seed)
    from scipy import ndimage
    return ndimage.gaussian_filter(rng.random(size), 2.0)


def test_constant_image():
    assert detect_log_alp(np.full((80, 80), 0.5)) == []


def test_too_small():
    with pytest.raises(ImageTooSmall):
        detect_log_alp(np.zeros((63, 100)))


def test_gaussian_blob_scale():
    img = blob_image([(64, 64)], 8.0)
    kps = detect_log_alp(img)
    top = max(kps, key=lambda k: k.peak_response)
    assert np.hypot(top.x - 64, top.y - 64) < 1.0
    assert abs(top.scale - 8.0 * SQRT2) <= 0.25 * 8.0 * SQRT2
    # brute-force sweep of the scale-normalised LoG at the centre peaks near sigma_b
    from scipy import ndimage
    sig = np.linspace(3, 16, 131)
    resp = [abs(s * s * ndimage.gaussian_laplace(img, s)[64, 64]) for s in sig]
    assert abs(sig[int(np.argmax(resp))] - 8.0) < 0.5


GRID = [(x, y) for x in (24, 56, 88, 120) for y in (24, 56, 88, 120)]


def test_blob_grid_repeatability():
    img = blob_image(GRID, 3.0, size=(144, 144))
    kps = detect_log_alp(img)
    xy = np.array([[k.x, k.y] for k in kps])
    hits = sum(np.min(np.hypot(*(xy - c).T)) <= 1.0 for c in GRID)
    assert hits >= 0.9 * len(GRID)


def test_rotation_equivariance():
    rng = np.random.default_rng(3)
    centers = [(rng.uniform(20, 120), rng.uniform(20, 100)) for _ in range(10)]
    img = blob_image(centers, 3.0, size=(120, 140))
    w = img.shape[1]
    a = detect_log_alp(img)
    b = detect_log_alp(np.rot90(img))
    assert len(a) == len(b) > 0
    bxy = np.array([[k.x, k.y] for k in b])
    bs = np.array([k.scale for k in b])
    for k in a:
        # rot90 maps (x, y) to (y, W - 1 - x)
        d = np.hypot(bxy[:, 0] - k.y, bxy[:, 1] - (w - 1 - k.x))
        j = int(np.argmin(d))
        assert d[j] <= 1.0
        assert abs(bs[j] / k.scale - 1) <= 0.05


def test_relevance_examples():
    k1 = Keypoint(50, 50, 4.0, peak_response=0.9)
    k2 = Keypoint(50, 50, 4.0, peak_response=0.1)
    assert score_relevance(k1, 101, 101) > score_relevance(k2, 101, 101)
    centre = Keypoint(50, 50, 4.0, peak_response=0.5)
    corner = Keypoint(0, 0, 4.0, peak_response=0.5)
    assert score_relevance(centre, 101, 101) > score_relevance(corner, 101, 101)
    assert score_relevance(corner, 101, 101, weights=(0, 0, 0, 0)) == 0.5


def _kps(n, seed):
    rng = np.random.default_rng(seed)
    return [Keypoint(float(rng.uniform(0, 100)), float(rng.uniform(0, 80)), float(rng.uniform(1, 6)),
                     0.0, float(rng.random()), float(rng.integers(0, 4) / 4)) for _ in range(n)]


def test_select_top_examples():
    kps = _kps(10, 0)
    top = select_top(kps, 3)
    rel = sorted((k.relevance for k in kps), reverse=True)
    assert [k.relevance for k in top] == rel[:3]
    assert select_top(kps, 0) == []
    a = Keypoint(1, 1, 2.0, 0.0, 0.3, 0.5)
    b = Keypoint(2, 2, 2.0, 0.0, 0.7, 0.5)
    assert select_top([a, b], 1) == [b]


@given(st.integers(0, 10 ** 6), st.integers(0, 30), st.randoms(use_true_random=False))
def test_select_top_permutation(seed, n_max, r):
    kps = _kps(20, seed)
    shuffled = list(kps)
    r.shuffle(shuffled)
    assert select_top(kps, n_max) == select_top(shuffled, n_max)


def test_flat_patch_descriptor():
    d = compute_descriptor(np.full((80, 80), 0.4), Keypoint(40, 40, 4.0))
    assert np.all(d == 0)


def test_descriptor_unit_norm(rng):
    img = textured()
    d = compute_descriptor(img, Keypoint(50, 40, 5.0, 0.3))
    assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-5)


def test_descriptor_rotation():
    img = textured(1, (100, 100))
    w = img.shape[1]
    for x, y, th in [(50, 50, 0.3), (40, 61, -1.2), (55, 45, 2.5)]:
        k = Keypoint(float(x), float(y), 4.0 * SQRT2, th)
        # a direction (dx, dy) becomes (dy, -dx) under rot90, i.e. angle - pi/2
        kr = Keypoint(float(y), float(w - 1 - x), 4.0 * SQRT2, th - np.pi / 2)
        d1 = compute_descriptor(img, k)
        d2 = compute_descriptor(np.rot90(img).copy(), kr)
        assert np.linalg.norm(d1 - d2) < 1e-3


@given(st.floats(0.1, 50.0))
def test_descriptor_contrast_invariance(k):
    img = textured(2)
    kp = Keypoint(45.3, 50.7, 4.5, 0.7)
    assert np.linalg.norm(compute_descriptor(img, kp) - compute_descriptor(k * img, kp)) < 1e-5


def test_ternary_examples():
    tau = np.full(DESC_LEN, 0.05)
    z = ternary_quantize(np.zeros(DESC_LEN), tau)
    assert z.shape == (DESC_LEN,)
    # the DC element of a zero descriptor is -8/sqrt(128); set τ above it
    assert np.all(ternary_quantize(np.zeros(DESC_LEN), np.full(DESC_LEN, 1.0)) == 0)
    d = normalize_descriptor(np.random.default_rng(0).random(DESC_LEN))
    t = transform(d)
    sym = ternary_quantize(d, np.abs(t))  # every element sits exactly on its threshold
    assert np.all(sym == 0)
    assert ternary_distance(np.ones(DESC_LEN), -np.ones(DESC_LEN)) == 256
    a = np.zeros(DESC_LEN, int)
    b = np.zeros(DESC_LEN, int)
    a[0], a[2], b[2] = 1, -1, -1
    assert ternary_distance(a, b) == 1 and ternary_distance(a, a) == 0


def test_ternary_thirds():
    rng = np.random.default_rng(5)
    from scipy import ndimage
    raw = np.array([normalize_descriptor(ndimage.gaussian_filter1d(rng.exponential(size=DESC_LEN), 1.0))
                    for _ in range(20000)])
    tau = train_tau(raw[:10000])
    sym = ternary_quantize(raw[10000:], tau)
    for v in (-1, 0, 1):
        assert abs(np.mean(sym == v) - 1 / 3) <= 0.05


@given(st.integers(0, 2 ** 31))
def test_ternary_metric(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.integers(-1, 2, (3, DESC_LEN))
    assert ternary_distance(a, c) <= ternary_distance(a, b) + ternary_distance(b, c)
    assert ternary_distance(a, b) == ternary_distance(b, a)
    assert (ternary_distance(a, b) == 0) == np.array_equal(a, b)


@given(st.integers(0, 2 ** 31))
def test_distance_matrix_matches(seed):
    rng = np.random.default_rng(seed)
    A = rng.integers(-1, 2, (5, DESC_LEN))
    B = rng.integers(-1, 2, (4, DESC_LEN))
    M = ternary_distance_matrix(A, B)
    assert all(M[i, j] == ternary_distance(A[i], B[j]) for i in range(5) for j in range(4))


@given(st.integers(0, 2 ** 31))
def test_transform_invertible(seed):
    d = np.random.default_rng(seed).random(DESC_LEN)
    assert np.allclose(inverse_transform(transform(d)), d)


def test_tau_file(tmp_path):
    tau = np.linspace(0.01, 0.2, DESC_LEN)
    p = str(tmp_path / "tau.bin")
    write_tau(p, tau)
    assert np.allclose(read_tau(p), tau, atol=1e-7)
    with open(p, "r+b") as fh:
        fh.truncate(100)
    with pytest.raises(CorruptTensor):
        read_tau(p)


def test_extract_local_budget():
    img = textured(4, (120, 160))
    s = extract_local(img, 25, np.full(DESC_LEN, 0.03))
    assert 0 < len(s) <= 25
    assert np.all(np.diff(s.relevance) <= 0)
    assert np.all((s.xy[:, 0] >= 0) & (s.xy[:, 0] < 160) & (s.xy[:, 1] >= 0) & (s.xy[:, 1] < 120))
