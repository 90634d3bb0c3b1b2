import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdva.descriptors import ScfvDescriptor
from cdva.errors import BudgetTooSmall, CorruptTensor, EmptyFrameWarning, InsufficientData, ModelMismatch
from cdva.scfv import (FisherVector, GmmModel, aggregate_fv, component_cost, fisher_gradients, read_gmm,
                       scfv_similarity, select_components, train_gmm, write_gmm)


def random_gmm(rng, K=3, dim=4):
    w = rng.dirichlet(np.ones(K))
    return GmmModel(w, rng.normal(size=(K, dim)), rng.uniform(0.3, 2.0, (K, dim)), np.eye(dim), np.zeros(dim))


def fd_mean_gradient(gmm, Y, k, h=1e-5):
    g = np.zeros(gmm.dim)
    for j in range(gmm.dim):
        out = []
        for sgn in (1, -1):
            m = gmm.means.copy()
            m[k, j] += sgn * h
            out.append(GmmModel(gmm.weights, m, gmm.variances, gmm.pca_matrix, gmm.pca_mean).log_likelihood(Y))
        g[j] = (out[0] - out[1]) / (2 * h)
    return g


def analytic_mean_gradient(gmm, Y, k):
    # d/dmu_k sum_i log p(y_i) = sum_i gamma_ik (y_i - mu_k) / var_k; the FV mean part is that
    # times sd_k / (n sqrt(pi_k))
    gm, _ = fisher_gradients(Y, gmm)
    return gm[k] * len(Y) * np.sqrt(gmm.weights[k]) / np.sqrt(gmm.variances[k])


@given(st.integers(0, 2 ** 31))
def test_fv_gradient_check(seed):
    rng = np.random.default_rng(seed)
    gmm = random_gmm(rng, K=int(rng.integers(1, 5)), dim=int(rng.integers(1, 6)))
    Y = rng.normal(size=(int(rng.integers(1, 12)), gmm.dim)) * 1.5
    for k in range(gmm.K):
        a = analytic_mean_gradient(gmm, Y, k)
        f = fd_mean_gradient(gmm, Y, k)
        scale = max(np.linalg.norm(f), 1e-3)
        assert np.linalg.norm(a - f) / scale < 1e-4


def test_hand_set_posteriors():
    gmm = GmmModel(np.array([0.4, 0.6]), np.array([[0.0, 1.0], [2.0, -1.0]]),
                   np.array([[1.0, 4.0], [0.25, 1.0]]), np.eye(2), np.zeros(2))
    Y = np.array([[0.5, 0.5], [1.0, -2.0], [3.0, 0.0]])
    gam = np.array([[0.9, 0.1], [0.3, 0.7], [0.2, 0.8]])
    gm, gv = fisher_gradients(Y, gmm, gam)
    for k in range(2):
        sd = np.sqrt(gmm.variances[k])
        em = sum(gam[i, k] * (Y[i] - gmm.means[k]) / sd for i in range(3)) / (3 * np.sqrt(gmm.weights[k]))
        ev = sum(gam[i, k] * (((Y[i] - gmm.means[k]) / sd) ** 2 - 1) for i in range(3)) / (
            3 * np.sqrt(2 * gmm.weights[k]))
        assert np.allclose(gm[k], em, atol=1e-6)
        assert np.allclose(gv[k], ev, atol=1e-6)


def test_descriptor_at_mean():
    gmm = GmmModel(np.array([0.5, 0.5]), np.array([[0.0, 0.0], [50.0, 50.0]]), np.ones((2, 2)),
                   np.eye(2), np.zeros(2))
    fv = aggregate_fv(np.array([[50.0, 50.0]]), gmm)
    assert np.allclose(fv.mean[1], 0.0)


@given(st.integers(0, 2 ** 31))
def test_duplicate_invariance(seed):
    rng = np.random.default_rng(seed)
    gmm = random_gmm(rng)
    Y = rng.normal(size=(6, 4))
    a = aggregate_fv(Y, gmm)
    b = aggregate_fv(np.concatenate([Y, Y]), gmm)
    assert np.allclose(a.mean, b.mean) and np.allclose(a.var, b.var)
    assert np.linalg.norm(np.concatenate([a.mean.ravel(), a.var.ravel()])) == pytest.approx(1.0)


def test_empty_frame_warning():
    gmm = random_gmm(np.random.default_rng(0))
    with pytest.warns(EmptyFrameWarning):
        fv = aggregate_fv(np.zeros((0, 4)), gmm)
    assert fv.empty and not fv.mean.any()


def test_train_two_gaussians():
    rng = np.random.default_rng(7)
    true = np.array([[10.0, 0, 0, 2], [-10.0, 4, 0, -2]])
    X = np.concatenate([rng.normal(true[0], 1.0, (300, 4)), rng.normal(true[1], 1.0, (300, 4))])
    gmm = train_gmm(X, K=2, dim=4, seed=0)
    proj = gmm.reduce(true)
    est = gmm.means
    if np.linalg.norm(est[0] - proj[0]) > np.linalg.norm(est[0] - proj[1]):
        est = est[::-1]
    for e, t in zip(est, proj):
        assert np.linalg.norm(e - t) <= 0.05 * np.linalg.norm(t)
    assert gmm.weights.sum() == pytest.approx(1.0, abs=1e-6)


def test_train_single_component():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(400, 6)) * [1, 2, 3, 0.5, 1, 1]
    gmm = train_gmm(X, K=1, dim=6, seed=0)
    Y = gmm.reduce(X)
    assert np.allclose(gmm.means[0], Y.mean(axis=0), atol=1e-6)
    assert np.allclose(gmm.variances[0], Y.var(axis=0), rtol=1e-6)


def test_train_insufficient():
    with pytest.raises(InsufficientData):
        train_gmm(np.zeros((199, 8)), K=2, dim=4)


def test_variance_floor():
    X = np.repeat(np.eye(3), 200, axis=0)
    gmm = train_gmm(X, K=3, dim=3, seed=0)
    assert np.all(gmm.variances >= 1e-4)


def test_gmm_file(tmp_path):
    gmm = random_gmm(np.random.default_rng(1))
    p = str(tmp_path / "g.bin")
    write_gmm(p, gmm)
    back = read_gmm(p)
    assert np.allclose(back.means, gmm.means, atol=1e-6) and back.K == 3
    with open(p, "r+b") as fh:
        fh.truncate(40)
    with pytest.raises(CorruptTensor):
        read_gmm(p)


def _fv(rng, K=128, dim=32):
    v = rng.normal(size=(2, K, dim)) * rng.uniform(0.1, 1, (1, K, 1))
    return FisherVector(v[0], v[1])


def test_budget_exact_fit(rng):
    fv = _fv(rng)
    mb, per, _ = component_cost(128, 32, 100)
    for m in (1, 7, 50):
        assert select_components(fv, mb + m * per).mask.sum() == m
    assert select_components(fv, 512).mask.sum() == 124
    with pytest.raises(BudgetTooSmall):
        select_components(fv, mb + per - 1)


def test_zero_fv_tie_rule():
    z = np.zeros((128, 32))
    d = select_components(FisherVector(z, z), 512)
    assert d.selected.tolist() == list(range(124))


@given(st.integers(0, 2 ** 31), st.integers(24, 3000), st.integers(24, 3000))
def test_selection_monotone(seed, b1, b2):
    fv = _fv(np.random.default_rng(seed))
    lo, hi = sorted((b1, b2))
    a, b = select_components(fv, lo), select_components(fv, hi)
    assert np.all(b.mask[a.mask])


@given(st.integers(0, 2 ** 31), st.sampled_from([512, 1024, 4096, 8192]))
def test_binarization_consistency(seed, budget):
    fv = _fv(np.random.default_rng(seed))
    d = select_components(fv, budget)
    assert np.array_equal(d.mean_bits, (fv.mean > 0)[d.mask].astype(np.uint8))
    if budget >= 4096:
        assert d.var_mask is not None and d.var_mask.any()
        assert np.array_equal(d.var_bits, (fv.var > 0)[d.var_mask].astype(np.uint8))
    else:
        assert d.var_mask is None


def _desc(sel, bits, K=128, dim=32):
    mask = np.zeros(K, bool)
    mask[sel] = True
    dense = np.zeros((K, dim), np.uint8)
    for k, b in zip(sel, bits):
        dense[k] = b
    return ScfvDescriptor.from_dense(mask, dense)


def test_similarity_examples(rng):
    bits = rng.integers(0, 2, (5, 32))
    a = _desc([1, 2, 3, 4, 5], bits)
    assert scfv_similarity(a, a) == pytest.approx(1.0)
    assert scfv_similarity(a, _desc([6, 7], bits[:2])) == 0.0
    b1 = np.zeros((4, 32), np.uint8)
    b2 = b1.copy()
    b2[0, :16] = 1
    x = _desc([0, 10, 11, 12], b1)
    y = _desc([0, 20, 21, 22], b2)
    assert scfv_similarity(x, y) == 0.0
    with pytest.raises(ModelMismatch):
        scfv_similarity(a, _desc([1], bits[:1], K=64))


@given(st.integers(0, 2 ** 31))
def test_similarity_properties(seed):
    rng = np.random.default_rng(seed)
    da = select_components(_fv(rng), int(rng.choice([512, 1024, 4096])))
    db = select_components(_fv(rng), int(rng.choice([512, 1024, 4096])))
    assert scfv_similarity(da, da) == pytest.approx(1.0)
    s = scfv_similarity(da, db)
    assert -1.0 <= s <= 1.0 and s == pytest.approx(scfv_similarity(db, da))
