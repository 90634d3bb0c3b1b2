"""Scalable compressed Fisher vectors.

Local descriptors are PCA-reduced, soft-assigned to a diagonal GMM and
aggregated into first- and second-order gradient sub-vectors. The strongest
components (by standard deviation of their mean sub-vector, measured after
power-law and L2 normalisation) are kept as sign bits until the byte budget
runs out.
"""
from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .descriptors import ScfvDescriptor
from .errors import (BudgetTooSmall, CorruptTensor, EmptyFrameWarning, InsufficientData,
                     ModelMismatch)

GMM_MAGIC = b"CDVAGMM1"
VAR_FLOOR = 1e-4
VARIANCE_BUDGET = 4096  # budgets at or above this also carry variance sub-vectors
SCFV_BUDGET = {16: 512, 64: 1024, 256: 4096}


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, dim)
    variances: np.ndarray  # (K, dim)
    pca_matrix: np.ndarray  # (dim, 128)
    pca_mean: np.ndarray  # (128,)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def reduce(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return (X - self.pca_mean) @ self.pca_matrix.T

    def log_joint(self, Y: np.ndarray) -> np.ndarray:
        """(n, K) log pi_k + log N(y_i; mu_k, diag var_k)."""
        iv = 1.0 / self.variances
        quad = ((Y * Y) @ iv.T - 2.0 * Y @ (self.means * iv).T + (self.means ** 2 * iv).sum(1))
        logdet = np.log(self.variances).sum(1)
        return np.log(self.weights) - 0.5 * (quad + logdet + self.dim * np.log(2 * np.pi))

    def posteriors(self, Y: np.ndarray) -> np.ndarray:
        lj = self.log_joint(Y)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def log_likelihood(self, Y: np.ndarray) -> float:
        return float(logsumexp(self.log_joint(Y), axis=1).sum())


def fit_pca(X: np.ndarray, dim: int):
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:dim]
    vecs = vecs[:, order].T
    # deterministic sign: largest-magnitude entry of each axis positive
    flip = np.sign(vecs[np.arange(len(vecs)), np.argmax(np.abs(vecs), axis=1)])
    return vecs * flip[:, None], mean


def train_gmm(descriptors: np.ndarray, K: int = 128, dim: int = 32, seed: int = 0,
              max_iter: int = 200, tol: float = 1e-5) -> GmmModel:
    """PCA to ``dim`` then EM on a diagonal GMM until the relative log-likelihood
    change drops below ``tol``."""
    X = np.asarray(descriptors, dtype=np.float64)
    if len(X) < 100 * K:
        raise InsufficientData(f"need at least {100 * K} descriptors for K={K}, got {len(X)}")
    P, mu0 = fit_pca(X, dim)
    Y = (X - mu0) @ P.T
    rng = np.random.default_rng(seed)
    n, d = Y.shape
    gvar = np.maximum(Y.var(axis=0), VAR_FLOOR)
    means = _kmeanspp(Y, K, rng)
    gmm = GmmModel(np.full(K, 1.0 / K), means, np.tile(gvar, (K, 1)), P, mu0)
    prev = None
    for _ in range(max_iter):
        lj = gmm.log_joint(Y)
        ll_i = logsumexp(lj, axis=1, keepdims=True)
        ll = float(ll_i.sum())
        gam = np.exp(lj - ll_i)
        nk = gam.sum(axis=0) + 1e-12
        means = (gam.T @ Y) / nk[:, None]
        var = (gam.T @ (Y * Y)) / nk[:, None] - means ** 2
        gmm = GmmModel(nk / n, means, np.maximum(var, VAR_FLOOR), P, mu0)
        if prev is not None and abs(ll - prev) < tol * abs(prev):
            break
        prev = ll
    gmm.weights = gmm.weights / gmm.weights.sum()
    return gmm


def _kmeanspp(Y, K, rng):
    n = len(Y)
    centers = [Y[rng.integers(n)]]
    d2 = ((Y - centers[0]) ** 2).sum(1)
    for _ in range(1, K):
        tot = d2.sum()
        i = int(rng.choice(n, p=d2 / tot)) if tot > 0 else int(rng.integers(n))
        centers.append(Y[i])
        d2 = np.minimum(d2, ((Y - Y[i]) ** 2).sum(1))
    return np.array(centers)


def write_gmm(path: str, gmm: GmmModel):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(GMM_MAGIC + struct.pack("<3I", gmm.K, gmm.dim, gmm.pca_matrix.shape[1]))
        for arr in (gmm.pca_matrix, gmm.pca_mean, gmm.means, gmm.variances, gmm.weights):
            fh.write(np.asarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_gmm(path: str) -> GmmModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != GMM_MAGIC or len(data) < 20:
        raise CorruptTensor(f"{path}: not a GMM model file")
    K, dim, D = struct.unpack("<3I", data[8:20])
    sizes = [dim * D, D, K * dim, K * dim, K]
    if len(data) != 20 + 4 * sum(sizes):
        raise CorruptTensor(f"{path}: payload size does not match header (K={K}, dim={dim})")
    flat = np.frombuffer(data[20:], dtype="<f4").astype(np.float64)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    w = parts[4] / parts[4].sum()
    return GmmModel(w, parts[2].reshape(K, dim), parts[3].reshape(K, dim),
                    parts[0].reshape(dim, D), parts[1])


def default_gmm() -> GmmModel | None:
    path = os.path.join(os.path.dirname(__file__), "data", "gmm_default.bin")
    return read_gmm(path) if os.path.exists(path) else None


# ---------------------------------------------------------------- aggregation

def fisher_gradients(Y: np.ndarray, gmm: GmmModel, posteriors: np.ndarray | None = None):
    """Unnormalised FV gradients w.r.t. means and standard deviations, each (K, dim)."""
    Y = np.asarray(Y, dtype=np.float64)
    n = len(Y)
    gam = gmm.posteriors(Y) if posteriors is None else np.asarray(posteriors, dtype=np.float64)
    sd = np.sqrt(gmm.variances)
    s0 = gam.sum(0)
    s1 = gam.T @ Y
    s2 = gam.T @ (Y * Y)
    mu = gmm.means
    # sum_i g_ik (x_i - mu_k) / sd_k  and  sum_i g_ik ((x_i - mu_k)^2 / var_k - 1)
    gm = (s1 - s0[:, None] * mu) / sd
    gv = (s2 - 2 * mu * s1 + s0[:, None] * mu ** 2) / gmm.variances - s0[:, None]
    gm /= n * np.sqrt(gmm.weights)[:, None]
    gv /= n * np.sqrt(2 * gmm.weights)[:, None]
    return gm, gv


@dataclass
class FisherVector:
    mean: np.ndarray  # (K, dim)
    var: np.ndarray  # (K, dim)
    empty: bool = False


def aggregate_fv(Y: np.ndarray, gmm: GmmModel, posteriors=None, reduced: bool = True) -> FisherVector:
    """Signed-square-root and L2-normalised FV of a descriptor set.

    ``Y`` holds reduced descriptors unless ``reduced=False``, in which case the
    model's PCA is applied first.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if not reduced and len(Y):
        Y = gmm.reduce(Y)
    if len(Y) == 0:
        warnings.warn("frame has no local descriptors; FV is zero", EmptyFrameWarning, stacklevel=2)
        z = np.zeros((gmm.K, gmm.dim))
        return FisherVector(z, z.copy(), True)
    gm, gv = fisher_gradients(Y, gmm, posteriors)
    v = np.concatenate([gm.ravel(), gv.ravel()])
    v = np.sign(v) * np.sqrt(np.abs(v))
    nrm = np.linalg.norm(v)
    if nrm > 0:
        v /= nrm
    K, d = gm.shape
    return FisherVector(v[:K * d].reshape(K, d), v[K * d:].reshape(K, d))


def component_cost(K: int, dim: int, budget: int):
    """(mask bytes, mean bytes per component, var bytes per component or 0)."""
    mask = (K + 7) // 8
    per = (dim + 7) // 8
    return mask, per, (per if budget >= VARIANCE_BUDGET else 0)


def select_components(fv: FisherVector, budget_bytes: int) -> ScfvDescriptor:
    """Greedy budget-driven component selection and sign binarisation.

    Mean sub-vectors are bought first in rank order; at budgets of 4 KB and
    above a second mask and variance sub-vectors for the top-ranked selected
    components are bought with what is left, so a larger budget never drops
    a component.
    """
    K, dim = fv.mean.shape
    mask_b, per, var_per = component_cost(K, dim, budget_bytes)
    m = min(K, (budget_bytes - mask_b) // per) if budget_bytes > mask_b else 0
    if m < 1:
        raise BudgetTooSmall(f"{budget_bytes} bytes cannot hold a mask and one {dim}-bit sub-vector")
    strength = fv.mean.std(axis=1)
    rank = np.argsort(-strength, kind="stable")
    mask = np.zeros(K, bool)
    mask[rank[:m]] = True
    mean_bits = (fv.mean > 0).astype(np.uint8)
    var_mask = None
    if var_per:
        left = budget_bytes - mask_b - m * per - mask_b
        v = max(0, min(m, left // var_per))
        var_mask = np.zeros(K, bool)
        var_mask[rank[:v]] = True
    return ScfvDescriptor.from_dense(mask, mean_bits, var_mask,
                                     (fv.var > 0).astype(np.uint8) if var_per else None,
                                     empty=fv.empty, strengths=strength)


def trim_components(desc: ScfvDescriptor, keep: int) -> ScfvDescriptor:
    """Keep the ``keep`` strongest selected components (needs pre-encoding strengths)."""
    sel = desc.selected
    if keep >= len(sel):
        return desc
    st = desc.strengths if desc.strengths is not None else np.zeros(desc.K)
    order = sel[np.argsort(-st[sel], kind="stable")]
    mask = np.zeros(desc.K, bool)
    mask[order[:keep]] = True
    mb, vb = desc.dense_bits()
    vm = None if desc.var_mask is None else desc.var_mask & mask
    return ScfvDescriptor.from_dense(mask, mb, vm, vb, desc.empty, desc.strengths)


def scfv_similarity(a: ScfvDescriptor, b: ScfvDescriptor) -> float:
    """Hamming-based similarity over commonly selected components, in [-1, 1]."""
    if a.K != b.K or a.dim != b.dim:
        raise ModelMismatch(f"SCFV shapes differ: K={a.K}/{b.K}, dim={a.dim}/{b.dim}")
    if a.empty or b.empty:
        return 0.0
    ma, mb = int(a.mask.sum()), int(b.mask.sum())
    if ma == 0 or mb == 0:
        return 0.0
    common = a.mask & b.mask
    if not common.any():
        return 0.0
    am, av = a.dense_bits()
    bm, bv = b.dense_bits()
    ham = (am[common] != bm[common]).sum(1).astype(float)
    L = np.full(len(ham), float(a.dim))
    if av is not None and bv is not None:
        both = (a.var_mask & b.var_mask)[common]
        ham += np.where(both, (av[common] != bv[common]).sum(1), 0)
        L += np.where(both, a.dim, 0)
    s = ((L - 2 * ham) / L).sum()
    return float(s / np.sqrt(ma * mb))


def scfv_extract(raw_descriptors: np.ndarray, gmm: GmmModel, budget_bytes: int) -> ScfvDescriptor:
    Y = gmm.reduce(raw_descriptors) if len(raw_descriptors) else np.zeros((0, gmm.dim))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyFrameWarning)
        fv = aggregate_fv(Y, gmm)
    return select_components(fv, budget_bytes)
