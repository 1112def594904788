"""Initial group decomposition: two-stage PCA, fastICA, back-reconstruction,
scalar mixture fits, and assembly of starting parameter values."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import skew

from .errors import ConvergenceError, DesignError, RankError
from .model import HcicaParams, MoGParams

log = logging.getLogger(__name__)


@dataclass
class TwoStagePca:
    """Group-reduced whitened data plus the projections needed to undo it."""

    group: np.ndarray  # (q, V) whitened group-level data
    stage1: list  # per subject: (R, T_i) reduction matrices F_i
    stage1_reduced: list  # per subject: F_i @ centered data, (R, V)
    expand: np.ndarray  # (N*R, q): maps group-reduced rows back to the stack
    R: int


@dataclass
class GroupIcaResult:
    S0_hat: np.ndarray  # (q, V) group IC maps, unit sample variance rows
    mixing: np.ndarray  # (q, q)
    subject_ics: np.ndarray  # (N, q, V) back-reconstructed subject maps
    R: int


def _fix_signs(U):
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def two_stage_pca(subject_mats, R, q) -> TwoStagePca:
    """Reduce each subject to R principal components, stack, and reduce the
    N*R x V stacked matrix to q whitened rows."""
    if R < q:
        raise RankError(f"R={R} must be >= q={q}")
    N = len(subject_mats)
    if N * R < q:
        raise RankError(f"N*R={N * R} must be >= q={q}")

    stage1, reduced = [], []
    for Y in subject_mats:
        Y = np.asarray(Y, dtype=np.float64)
        Yc = Y - Y.mean(axis=1, keepdims=True)
        U, s, _ = np.linalg.svd(Yc, full_matrices=False)
        if U.shape[1] < R:
            raise RankError(f"subject has rank {U.shape[1]} < R={R}")
        F = _fix_signs(U[:, :R]).T  # (R, T)
        stage1.append(F)
        reduced.append(F @ Yc)

    stacked = np.vstack(reduced)  # (N*R, V)
    V = stacked.shape[1]
    U2, s2, Vt2 = np.linalg.svd(stacked, full_matrices=False)
    if s2[q - 1] <= 0:
        raise RankError("stacked matrix rank below q")
    U2 = _fix_signs(U2[:, :q])
    # whitened rows: group @ group' / V = I
    group = np.sqrt(V) * (U2.T @ stacked) / s2[:q, None]
    expand = U2 * s2[:q][None, :] / np.sqrt(V)  # (N*R, q), stacked ~= expand @ group
    return TwoStagePca(group=group, stage1=stage1, stage1_reduced=reduced, expand=expand, R=R)


def fast_ica_extract(X_white, seed, max_iter=500, tol=1e-6, restarts=3):
    """Symmetric fixed-point fastICA with tanh contrast on whitened rows.

    Returns (S0, mixing): S0 = W X_white with rows sign-fixed to positive
    skewness, mixing = W'. Deterministic given seed.
    """
    X = np.asarray(X_white, dtype=np.float64)
    q, V = X.shape
    rng = np.random.default_rng(seed)
    for attempt in range(restarts):
        W = np.linalg.qr(rng.standard_normal((q, q)))[0]
        converged = False
        for _ in range(max_iter):
            WX = W @ X
            G = np.tanh(WX)
            g_prime_mean = (1.0 - G**2).mean(axis=1)
            W_new = G @ X.T / V - g_prime_mean[:, None] * W
            # symmetric decorrelation
            U, _, Vt = np.linalg.svd(W_new)
            W_new = U @ Vt
            change = np.max(np.abs(1.0 - np.abs(np.sum(W_new * W, axis=1))))
            W = W_new
            if change < tol:
                converged = True
                break
        if converged:
            S0 = W @ X
            signs = np.sign(skew(S0, axis=1))
            signs[signs == 0] = 1.0
            S0 = signs[:, None] * S0
            W = signs[:, None] * W
            return S0, W.T
        log.warning("fastICA attempt %d did not converge; restarting", attempt + 1)
    raise ConvergenceError(f"fastICA failed to converge after {restarts} restarts")


def back_reconstruct(pca: TwoStagePca, mixing, S0_hat) -> np.ndarray:
    """Subject-specific IC maps from the group decomposition.

    The stacked reduced data factorizes as expand @ mixing @ S0; the
    per-subject block of that loading is inverted against the subject's
    stage-1 reduced data.
    """
    N = len(pca.stage1_reduced)
    R = pca.R
    q = S0_hat.shape[0]
    loadings = pca.expand @ mixing  # (N*R, q)
    subject_ics = np.empty((N, q, S0_hat.shape[1]))
    for i in range(N):
        block = loadings[i * R : (i + 1) * R, :]  # (R, q)
        if np.linalg.matrix_rank(block) < q:
            raise RankError(f"subject {i}: singular back-reconstruction block")
        subject_ics[i] = np.linalg.pinv(block) @ pca.stage1_reduced[i]
    return subject_ics


def fit_scalar_mog(values, m=2, seed=0, tol=1e-8, max_iter=2000, var_floor_frac=1e-6):
    """EM fit of a univariate m-component Gaussian mixture.

    Initialized by quantile split; converged on absolute log-likelihood
    change < tol. Returns (weights, means, variances) ordered with the
    smallest-|mean| (background) component first.
    """
    if m not in (2, 3):
        raise ValueError(f"m must be 2 or 3, got {m}")
    x = np.asarray(values, dtype=np.float64).ravel()
    n = x.size
    if n <= 10 * m:
        raise ValueError(f"need more than {10 * m} values, got {n}")
    total_var = x.var()
    if total_var <= 0:
        raise RankError("sample variance is zero; mixture fit undefined")
    floor = var_floor_frac * total_var

    # quantile-split initialization
    xs = np.sort(x)
    blocks = np.array_split(xs, m)
    means = np.array([b.mean() for b in blocks])
    variances = np.maximum(np.array([b.var() for b in blocks]), floor)
    weights = np.full(m, 1.0 / m)

    last_ll = -np.inf
    for _ in range(max_iter):
        logp = (
            np.log(np.maximum(weights, 1e-300))[None, :]
            - 0.5 * np.log(2 * np.pi * variances)[None, :]
            - 0.5 * (x[:, None] - means[None, :]) ** 2 / variances[None, :]
        )
        mx = logp.max(axis=1, keepdims=True)
        norm = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        resp = np.exp(logp - norm[:, None])
        ll = float(norm.sum())

        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        weights = nk / n
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk
        variances = np.maximum(variances, floor)

        if abs(ll - last_ll) < tol:
            break
        last_ll = ll

    order = np.argsort(np.abs(means), kind="stable")
    return weights[order], means[order], variances[order]


def initialize_params(subject_ics, X, whitened, m=2, seed=0) -> HcicaParams:
    """Starting values from the group decomposition.

    Voxelwise OLS of subject IC values on the design gives the initial
    covariate effects and the intercept map; the intercept map seeds the
    mixture fits; per-subject Procrustes of the whitened data onto the
    subject maps gives the mixing matrices and the noise variance.
    """
    subject_ics = np.asarray(subject_ics, dtype=np.float64)
    whitened = np.asarray(whitened, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    N, q, V = subject_ics.shape
    p = X.shape[1]
    if p < 1:
        raise DesignError("model requires at least one covariate column")
    Z = np.column_stack([np.ones(N), X])
    if np.linalg.matrix_rank(Z) < p + 1:
        raise DesignError("design matrix (with intercept) is rank deficient")

    S = subject_ics.reshape(N, q * V)  # row i: subject i maps, IC-major
    coef, *_ = np.linalg.lstsq(Z, S, rcond=None)  # (p+1, q*V)
    coef = coef.reshape(p + 1, q, V)
    s0_init = coef[0]  # (q, V)
    B = coef[1:].transpose(2, 0, 1)  # (V, p, q)

    weights = np.empty((q, m))
    means = np.empty((q, m))
    variances = np.empty((q, m))
    for l in range(q):
        weights[l], means[l], variances[l] = fit_scalar_mog(s0_init[l], m=m, seed=seed)
    mog = MoGParams(weights=weights, means=means, variances=variances)

    A = np.empty((N, whitened.shape[1], q))
    resid_sq = 0.0
    for i in range(N):
        M = whitened[i] @ subject_ics[i].T
        U, _, Vt = np.linalg.svd(M, full_matrices=False)
        A[i] = U @ Vt
        resid_sq += float(((whitened[i] - A[i] @ subject_ics[i]) ** 2).sum())
    sigma0_sq = resid_sq / (N * whitened.shape[1] * V)
    sigma0_sq = max(sigma0_sq, 1e-10 * max(float(whitened.var()), 1e-30))

    fitted = np.einsum("nk,klv->nlv", Z, coef)  # (N, q, V)
    resid = subject_ics - fitted
    D = resid.var(axis=(0, 2))
    D = np.maximum(D, 1e-10 * max(float(subject_ics.var()), 1e-30))

    return HcicaParams(A=A, sigma0_sq=float(sigma0_sq), D=D, mog=mog, B=B)


def select_ics(params: HcicaParams, whitened, subject_ics, keep):
    """Restrict the analysis to a subset of ICs.

    Dropped ICs' estimated contributions (mixing columns times subject maps)
    are subtracted from each subject's whitened data; parameter blocks are
    restricted and the mixing matrices refit by Procrustes against the kept
    subject maps. Returns (params, cleaned_data, subject_ics) for the
    reduced problem.
    """
    keep = sorted(set(int(k) for k in keep))
    q = params.q
    if not keep:
        raise ValueError("keep set must be nonempty")
    if any(k < 0 or k >= q for k in keep):
        raise IndexError(f"keep indices out of range for q={q}")
    drop = [l for l in range(q) if l not in keep]

    whitened = np.asarray(whitened, dtype=np.float64)
    subject_ics = np.asarray(subject_ics, dtype=np.float64)
    N = whitened.shape[0]
    if not drop:
        return params.copy(), whitened.copy(), subject_ics.copy()

    cleaned = np.empty_like(whitened)
    for i in range(N):
        cleaned[i] = whitened[i] - params.A[i][:, drop] @ subject_ics[i][drop, :]

    kept_ics = subject_ics[:, keep, :]
    A = np.empty((N, whitened.shape[1], len(keep)))
    for i in range(N):
        M = cleaned[i] @ kept_ics[i].T
        U, _, Vt = np.linalg.svd(M, full_matrices=False)
        A[i] = U @ Vt

    mog = MoGParams(
        weights=params.mog.weights[keep].copy(),
        means=params.mog.means[keep].copy(),
        variances=params.mog.variances[keep].copy(),
    )
    reduced = HcicaParams(
        A=A,
        sigma0_sq=params.sigma0_sq,
        D=params.D[keep].copy(),
        mog=mog,
        B=params.B[:, :, keep].copy(),
    )
    return reduced, cleaned, kept_ics


def run_initial_analysis(subject_mats, X, whitened, R, q, m=2, seed=0):
    """Full initial pipeline: two-stage PCA, fastICA, back-reconstruction,
    parameter assembly. Returns (GroupIcaResult, HcicaParams)."""
    pca = two_stage_pca(subject_mats, R, q)
    S0_hat, mixing = fast_ica_extract(pca.group, seed=seed)
    subject_ics = back_reconstruct(pca, mixing, S0_hat)
    params = initialize_params(subject_ics, X, whitened, m=m, seed=seed)
    result = GroupIcaResult(S0_hat=S0_hat, mixing=mixing, subject_ics=subject_ics, R=R)
    return result, params
