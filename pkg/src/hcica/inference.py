"""Post-fit quantities: sub-population prediction, covariate-effect
covariance, contrast tests, z-maps, thresholding, FDR, population averages,
and a dual-regression baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import DesignError, NumericalError, RankError
from .em import FittedModel

log = logging.getLogger(__name__)


@dataclass
class ContrastSpec:
    """Per-IC contrast over the p covariate effects."""

    coefficients: np.ndarray  # length p
    name: str = ""

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.ndim != 1:
            raise ValueError("contrast coefficients must be a vector")
        if not np.any(self.coefficients != 0):
            raise ValueError("contrast must have at least one nonzero coefficient")


@dataclass
class ContrastResult:
    estimate: np.ndarray  # (V, q)
    se: np.ndarray  # (V, q)
    z: np.ndarray  # (V, q)
    p: np.ndarray  # (V, q), two-sided


@dataclass
class VolumeMap:
    """Scalar field over the masked voxels."""

    values: np.ndarray  # length V
    unit: str  # intensity | z | p
    ic: int = 0
    label: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericalError(f"non-finite values in map {self.label!r}")


def subpopulation_map(fitted: FittedModel, x_star):
    """Predicted source maps for a covariate setting: s0_hat + beta_hat' x*."""
    x_star = np.asarray(x_star, dtype=np.float64)
    p = fitted.params.p
    if x_star.shape != (p,):
        raise ValueError(f"x_star must have length {p}, got {x_star.shape}")
    pred = fitted.posterior.s0_mean + np.einsum("p,vpl->vl", x_star, fitted.params.B)
    return [
        VolumeMap(values=pred[:, l], unit="intensity", ic=l, label="subpop")
        for l in range(fitted.params.q)
    ]


def _residual_matrices(fitted: FittedModel):
    """Per-subject level-2 residuals r_i(v) = E[s_i] - E[s0] - beta' x_i, (N, V, q)."""
    b = np.einsum("ip,vpl->ivl", fitted.X, fitted.params.B)
    return fitted.posterior.si_mean - fitted.posterior.s0_mean[None, :, :] - b


def beta_covariance(fitted: FittedModel, mode="plug-in"):
    """Per-voxel covariance of vec[beta_hat(v)'].

    plug-in: W(v) = D + sigma0^2 I, the model variance of the combined
    residual. empirical: W(v) = sample covariance over subjects of the
    posterior-mean residuals (falls back to plug-in when singular).

    The design rows are centered before assembly: the baseline map soaks
    up the intercept, so the effective information about the effects comes
    from covariate variation around the sample mean. Without the centering
    the variance is understated for designs with nonzero column means.

    Returns an array of shape (V, p*q, p*q); constant over v in plug-in mode
    but materialized per voxel for a uniform interface.
    """
    params = fitted.params
    N, p, q = fitted.X.shape[0], params.p, params.q
    V = params.V
    Xc = fitted.X - fitted.X.mean(axis=0, keepdims=True)

    if mode not in ("plug-in", "empirical"):
        raise ValueError(f"unknown variance mode {mode!r}")

    def assemble(W):
        # sum_i X_i' W^-1 X_i with X_i = x_i' kron I_q collapses to
        # (X'X) kron W^-1 when W is shared across subjects
        Winv = np.linalg.inv(W)
        info = np.kron(Xc.T @ Xc, Winv)  # = sum_i X_i' W^-1 X_i
        return np.linalg.inv(info)

    if mode == "plug-in":
        W = np.diag(params.D) + params.sigma0_sq * np.eye(q)
        cov = assemble(W)
        return np.broadcast_to(cov, (V, p * q, p * q)).copy()

    resid = _residual_matrices(fitted)  # (N, V, q)
    out = np.empty((V, p * q, p * q))
    Wplug = np.diag(params.D) + params.sigma0_sq * np.eye(q)
    fallback = False
    for v in range(V):
        R = resid[:, v, :]  # (N, q)
        Rc = R - R.mean(axis=0, keepdims=True)
        W = Rc.T @ Rc / max(N - 1, 1)
        if N <= q or np.linalg.matrix_rank(W) < q:
            fallback = True
            W = Wplug
        out[v] = assemble(W)
    if fallback:
        log.warning("empirical W singular at some voxels; used plug-in fallback")
    return out


def contrast_test(fitted: FittedModel, spec: ContrastSpec, variance_mode="plug-in"):
    """Voxelwise z test of the per-IC contrast lambda' beta(v)[:, l]."""
    params = fitted.params
    p, q, V = params.p, params.q, params.V
    lam = spec.coefficients
    if lam.shape != (p,):
        raise ValueError(f"contrast length {lam.shape[0]} != p={p}")

    estimate = np.einsum("p,vpl->vl", lam, params.B)  # (V, q)
    cov = beta_covariance(fitted, mode=variance_mode)  # (V, pq, pq)

    # vec[beta(v)'] stacks beta' rows: entry (k*q + l) is beta_{k,l};
    # the per-IC contrast embeds lambda at stride q with offset l
    se = np.empty((V, q))
    for l in range(q):
        idx = np.arange(p) * q + l
        sub = cov[:, idx[:, None], idx[None, :]]  # (V, p, p)
        var = np.einsum("p,vpk,k->v", lam, sub, lam)
        se[:, l] = np.sqrt(np.maximum(var, 0.0))

    bad = se <= 0
    if bad.any():
        log.warning("non-positive contrast variance at %d voxel/IC cells; masked", int(bad.sum()))
    z = np.zeros((V, q))
    np.divide(estimate, se, out=z, where=~bad)
    pvals = 2.0 * norm.sf(np.abs(z))
    pvals[bad] = 1.0
    return ContrastResult(estimate=estimate, se=se, z=z, p=pvals)


def zscore_map(vmap: VolumeMap) -> VolumeMap:
    """Standardize an intensity map over the mask."""
    if vmap.unit != "intensity":
        raise ValueError(f"expected an intensity map, got unit {vmap.unit!r}")
    sd = vmap.values.std()
    if sd == 0:
        raise NumericalError("constant map has no z-scores")
    z = (vmap.values - vmap.values.mean()) / sd
    return VolumeMap(values=z, unit="z", ic=vmap.ic, label=vmap.label)


def threshold_mask(zmap: VolumeMap, cutoff):
    """Boolean inclusion over masked voxels: |z| >= cutoff."""
    if zmap.unit != "z":
        raise ValueError(f"expected a z map, got unit {zmap.unit!r}")
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    return np.abs(zmap.values) >= cutoff


def bh_fdr(pvals, alpha=0.05):
    """Benjamini-Hochberg step-up. Returns (reject mask, adjusted p)."""
    pvals = np.asarray(pvals, dtype=np.float64)
    n = pvals.size
    if n == 0:
        raise ValueError("empty p-value input")
    if np.any((pvals < 0) | (pvals > 1)):
        raise ValueError("p-values outside [0, 1]")
    order = np.argsort(pvals, kind="stable")
    ranked = pvals[order] * n / np.arange(1, n + 1)
    adj = np.minimum.accumulate(ranked[::-1])[::-1]
    adj = np.minimum(adj, 1.0)
    adjusted = np.empty(n)
    adjusted[order] = adj
    return adjusted <= alpha, adjusted


def dual_regression(subject_mats, S0_hat, X):
    """Three-stage dual-regression baseline.

    Stage 1 regresses each subject's T x V data on the group maps to get
    time courses; stage 2 regresses on the time courses to get subject
    maps; stage 3 runs a voxelwise OLS of subject maps on the design
    (with intercept) using classical standard errors.

    Returns (z, subject_maps): z has shape (V, q, p).
    """
    S0 = np.asarray(S0_hat, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    q, V = S0.shape
    N, p = X.shape

    subject_maps = np.empty((N, q, V))
    gram = S0 @ S0.T
    if np.linalg.matrix_rank(gram) < q:
        raise RankError("group maps are rank deficient")
    for i, Y in enumerate(subject_mats):
        Y = np.asarray(Y, dtype=np.float64)
        Yc = Y - Y.mean(axis=1, keepdims=True)
        tc = np.linalg.solve(gram, S0 @ Yc.T).T  # (T, q)
        tg = tc.T @ tc
        if np.linalg.matrix_rank(tg) < q:
            raise RankError(f"subject {i}: time courses rank deficient")
        subject_maps[i] = np.linalg.solve(tg, tc.T @ Yc)

    Z = np.column_stack([np.ones(N), X])
    k = Z.shape[1]
    if np.linalg.matrix_rank(Z) < k:
        raise DesignError("dual-regression design rank deficient")
    ZtZinv = np.linalg.inv(Z.T @ Z)
    S = subject_maps.reshape(N, q * V)
    coef = ZtZinv @ Z.T @ S  # (k, q*V)
    resid = S - Z @ coef
    dof = max(N - k, 1)
    mse = (resid**2).sum(axis=0) / dof  # (q*V,)
    z = np.empty((V, q, p))
    for j in range(p):
        se = np.sqrt(ZtZinv[j + 1, j + 1] * mse)
        with np.errstate(divide="ignore", invalid="ignore"):
            stat = np.where(se > 0, coef[j + 1] / se, 0.0)
        z[:, :, j] = stat.reshape(q, V).T
    return z, subject_maps


def population_average_map(fitted: FittedModel):
    """Per-IC voxelwise mean of the subject posterior-mean maps."""
    avg = fitted.posterior.si_mean.mean(axis=0)  # (V, q)
    return [
        VolumeMap(values=avg[:, l], unit="intensity", ic=l, label="population")
        for l in range(fitted.params.q)
    ]
