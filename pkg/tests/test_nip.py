import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from cdva.descriptors import NipDescriptor
from cdva.errors import CorruptTensor, EmptyRoi, FormMismatch, ModelMismatch, ShapeMismatch
from cdva.nip import (FeatureMapStack, PoolOps, RoiGrid, WhiteningModel, binarize_nip, extract_nip,
                      fuse_scores, load_feature_maps, nip_pool, nip_similarity, read_whitening, rotate_stack,
                      toy_backbone, train_whitening, whiten, write_feature_maps, write_whitening)


def smooth_rgb(seed, h=96, w=96, wrap=False):
    rng = np.random.default_rng(seed)
    mode = "wrap" if wrap else "reflect"
    img = ndimage.gaussian_filter(rng.random((3, h, w)), (0, 3, 3), mode=mode)
    img = (img - img.min()) / (np.ptp(img) + 1e-12)
    return img * 255.0


def test_backbone_deterministic():
    x = smooth_rgb(0)
    assert np.array_equal(toy_backbone(x, 4).tensor, toy_backbone(x, 4).tensor)


def test_zero_frame_constant_maps():
    t = toy_backbone(np.zeros((3, 96, 96)), 1).tensor[0]
    assert np.allclose(t, t[:1, :1, :], atol=0.0)


def test_backbone_equivariance_r1():
    for seed in range(3):
        x = smooth_rgb(seed)
        a = toy_backbone(np.rot90(x, 1, axes=(1, 2)), 1).tensor[0]
        b = rotate_stack(toy_backbone(x, 1).tensor[0], 1)
        assert np.max(np.abs(a - b)) < 1e-5


def test_rotation_invariance_r4():
    for seed in range(5):
        x = smooth_rgb(seed, 120, 160)
        xr = np.rot90(x, 1, axes=(1, 2)).copy()
        d4 = np.linalg.norm(extract_nip(x, 4).values - extract_nip(xr, 4).values)
        d1 = np.linalg.norm(extract_nip(x, 1).values - extract_nip(xr, 1).values)
        assert d4 < 1e-4
        assert d1 >= 10 * max(d4, 1e-12)


def test_translation_robustness():
    # shifting by one pool5 cell (8 input pixels) on a periodic texture
    dists = []
    for seed in range(5):
        x = smooth_rgb(seed, wrap=True)
        xs = np.roll(x, 8, axis=2)
        dists.append(np.linalg.norm(extract_nip(x, 4).values - extract_nip(xs, 4).values))
    assert max(dists) < 0.10


def test_tensor_file(tmp_path):
    rng = np.random.default_rng(0)
    s = FeatureMapStack(rng.random((2, 3, 5, 8)).astype(np.float32))
    p = str(tmp_path / "t.bin")
    write_feature_maps(p, s)
    assert np.array_equal(load_feature_maps(p).tensor, s.tensor)
    data = open(p, "rb").read()
    open(p, "wb").write(data[:20])
    with pytest.raises(CorruptTensor):
        load_feature_maps(p)
    open(p, "wb").write(data[:-4])
    with pytest.raises(ShapeMismatch):
        load_feature_maps(p)


def test_stack_validation():
    with pytest.raises(ShapeMismatch):
        FeatureMapStack(np.zeros((1, 2, 2, 4)))
    bad = np.zeros((1, 2, 2, 8))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(CorruptTensor):
        FeatureMapStack(bad)


def test_pool_constant_stack():
    d = nip_pool(FeatureMapStack(np.full((4, 6, 6, 64), 0.7)))
    assert np.allclose(d.values, 1 / 8.0)


def test_pool_single_roi():
    t = np.random.default_rng(1).random((1, 4, 5, 16))
    d = nip_pool(FeatureMapStack(t), RoiGrid([[(0, 0, 5, 4)]]))
    g = t[0].mean(axis=(0, 1))
    assert np.allclose(d.values, g / np.linalg.norm(g))


def test_pool_hand_example():
    t = np.zeros((1, 2, 2, 8))
    t[0, :, :, 0] = [[1, 2], [3, 4]]
    t[0, :, :, 1] = 1.0
    grid = RoiGrid([[(0, 0, 1, 2), (1, 0, 1, 2)]])
    d = nip_pool(FeatureMapStack(t), grid, PoolOps("avg", "max", "avg"))
    assert d.values[0] / d.values[1] == pytest.approx(3.0)


@given(st.integers(0, 2 ** 31), st.randoms(use_true_random=False))
def test_pool_roi_permutation(seed, r):
    t = np.random.default_rng(seed).random((2, 6, 6, 8))
    grid = RoiGrid.uniform(6, 6)
    shuf = [list(s) for s in grid.scales]
    for s in shuf:
        r.shuffle(s)
    a = nip_pool(FeatureMapStack(t), grid).values
    b = nip_pool(FeatureMapStack(t), RoiGrid(shuf)).values
    assert np.allclose(a, b)


def test_roi_validation():
    with pytest.raises(EmptyRoi):
        nip_pool(FeatureMapStack(np.ones((1, 4, 4, 8))), RoiGrid([[(2, 2, 3, 3)]]))
    for W, H in [(3, 3), (12, 7), (1, 1)]:
        RoiGrid.uniform(W, H).validate(W, H)


def test_whiten_examples(rng):
    v = rng.normal(size=16)
    d = NipDescriptor(v / np.linalg.norm(v))
    ident = WhiteningModel(np.zeros(16), np.eye(16))
    assert np.allclose(whiten(d, ident).values, d.values)
    w = whiten(d, WhiteningModel(d.values.copy(), np.eye(16)))
    assert w.degenerate and nip_similarity(w, w) == 0.0
    Q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
    assert np.linalg.norm(d.values @ Q.T) == pytest.approx(1.0, abs=1e-5)
    assert np.allclose(whiten(d, WhiteningModel(np.zeros(16), Q)).values, d.values @ Q.T)
    with pytest.raises(ModelMismatch):
        whiten(d, WhiteningModel(np.zeros(8), np.eye(8)))


@pytest.mark.parametrize("shrink", [0.0, 1.0])
def test_train_whitening_orthogonal(rng, shrink, tmp_path):
    X = rng.normal(size=(500, 12)) @ rng.normal(size=(12, 12))
    m = train_whitening(X, eps=0.0, shrink=shrink)
    P = m.projection / np.linalg.norm(m.projection, axis=1, keepdims=True)
    assert np.allclose(P @ P.T, np.eye(12), atol=1e-4)
    if shrink == 0.0:
        Z = (X - m.mean) @ m.projection.T
        assert np.allclose(np.cov(Z, rowvar=False), np.eye(12), atol=1e-3)
    p = str(tmp_path / "w.bin")
    write_whitening(p, m)
    assert np.allclose(read_whitening(p).projection, m.projection, rtol=1e-5)


def test_binarize_examples(rng):
    d = NipDescriptor(np.abs(rng.normal(size=32)) + 0.01)
    assert np.all(binarize_nip(d).bits == 1)
    with pytest.raises(FormMismatch):
        binarize_nip(binarize_nip(d))


@given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3))
def test_binarize_scale_invariant(seed, k):
    v = np.random.default_rng(seed).normal(size=64)
    a = binarize_nip(NipDescriptor(v)).bits
    b = binarize_nip(NipDescriptor(k * v)).bits
    assert np.array_equal(a, b)


def test_similarity_examples():
    e = np.eye(8)
    assert nip_similarity(NipDescriptor(e[0]), NipDescriptor(e[0])) == pytest.approx(1.0)
    assert nip_similarity(NipDescriptor(e[0]), NipDescriptor(e[1])) == 0.0
    a = np.zeros(64, np.uint8)
    b = a.copy()
    b[:16] = 1
    assert nip_similarity(NipDescriptor(bits=a), NipDescriptor(bits=b)) == 0.5
    with pytest.raises(FormMismatch):
        nip_similarity(NipDescriptor(e[0]), NipDescriptor(bits=a[:8]))


def test_fuse_examples():
    assert fuse_scores(0.8, 0.4, 1.0) == 0.8
    assert fuse_scores(0.8, 0.4, 0.0) == 0.4
    assert fuse_scores(0.8, 0.4, 0.5) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        fuse_scores(0.8, 0.4, 1.5)


def test_descriptor_norm():
    d = extract_nip(smooth_rgb(9, 100, 130))
    assert d.C == 64 and np.linalg.norm(d.values) == pytest.approx(1.0, abs=1e-5)
