"""E-step, M-step and EM driver for the hierarchical covariate-adjusted model.

Because the mixing matrices are orthogonal and all covariances diagonal, the
posterior factorizes exactly over ICs after rotating each subject's data by
A_i'. The factorized path is the production E-step; an exact enumeration
over all m^q latent-state configurations (full joint-Gaussian conditioning)
is kept as an independent oracle.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DesignError, NumericalError
from .model import EmConfig, EmState, HcicaParams, MoGParams, VoxelPosterior

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


def rotate_to_source_space(Y, params):
    """ytil_i(v) = A_i' y_i(v), stacked as (N, V, q)."""
    N, _, V = Y.shape
    out = np.empty((N, V, params.q))
    for i in range(N):
        out[i] = (params.A[i].T @ Y[i]).T
    return out


def covariate_offsets(X, B):
    """b[i, v, l] = beta_l(v)' x_i for design X (N,p) and B (V,p,q)."""
    return np.einsum("ip,vpl->ivl", X, B)


def estep(Y, X, params: HcicaParams):
    """Factorized E-step over all voxels.

    Parameters
    ----------
    Y : (N, q, V) whitened data
    X : (N, p) design matrix

    Returns
    -------
    (VoxelPosterior, observed-data log-likelihood)
    """
    N, _, V = Y.shape
    q = params.q
    m = params.mog.m
    ytil = rotate_to_source_space(Y, params)  # (N, V, q)
    b = covariate_offsets(X, params.B)  # (N, V, q)

    state_probs = np.empty((V, q, m))
    s0_mean_by_state = np.empty((V, q, m))
    s0_var_by_state = np.empty((V, q, m))
    s0_mean = np.empty((V, q))
    s0_second = np.empty((V, q))
    si_mean = np.empty((N, V, q))
    si_second = np.empty((N, V, q))
    si_s0_cross = np.empty((N, V, q))
    loglik = 0.0

    sigma0 = params.sigma0_sq
    for l in range(q):
        c = params.D[l] + sigma0  # marginal obs variance of ytil given s0
        d = ytil[:, :, l] - b[:, :, l]  # (N, V): noisy observations of s0
        S1 = d.sum(axis=0)
        S2 = (d * d).sum(axis=0)

        logw = np.empty((V, m))
        mj = np.empty((V, m))
        Vj = np.empty(m)
        for j in range(m):
            mu = params.mog.means[l, j]
            s2 = params.mog.variances[l, j]
            r1 = S1 - N * mu
            r2 = S2 - 2.0 * mu * S1 + N * mu * mu
            # marginal of (d_1..d_N) under component j: c I + s2 11'
            logmarg = -0.5 * (
                N * (LOG_2PI + np.log(c))
                + np.log1p(N * s2 / c)
                + r2 / c
                - (s2 / (c * (c + N * s2))) * r1 * r1
            )
            logw[:, j] = np.log(max(params.mog.weights[l, j], 1e-300)) + logmarg
            prec = 1.0 / s2 + N / c
            Vj[j] = 1.0 / prec
            mj[:, j] = (mu / s2 + S1 / c) / prec

        norm = logsumexp(logw, axis=1)
        if not np.all(np.isfinite(norm)):
            raise NumericalError("non-finite posterior state weight")
        loglik += float(norm.sum())
        pj = np.exp(logw - norm[:, None])

        state_probs[:, l, :] = pj
        s0_mean_by_state[:, l, :] = mj
        s0_var_by_state[:, l, :] = Vj[None, :]
        m0 = (pj * mj).sum(axis=1)
        e_s0_sq = (pj * (mj * mj + Vj[None, :])).sum(axis=1)
        s0_mean[:, l] = m0
        s0_second[:, l] = e_s0_sq

        # s_il | s0, y is the precision-weighted blend of prior and data
        w = sigma0 / c  # weight on (s0 + b_i)
        cv = params.D[l] * sigma0 / c  # Var(s_il | s0, y)
        yl = ytil[:, :, l]
        bl = b[:, :, l]
        # conditional mean given state j: w*(mj + b_i) + (1-w)*y
        base = w * bl + (1.0 - w) * yl  # (N, V)
        si_mean[:, :, l] = base + w * m0[None, :]
        # second moment: mix over states of (mean_j^2 + w^2 Vj) + cv
        mean_j = base[:, :, None] + w * mj[None, :, :]  # (N, V, m)
        si_second[:, :, l] = (
            pj[None, :, :] * (mean_j**2 + (w * w) * Vj[None, None, :])
        ).sum(axis=2) + cv
        # cross moment: E[s_il s0_l | z=j] = w E[s0^2|j] + base * m_j
        cross_j = w * (mj * mj + Vj[None, :])[None, :, :] + base[:, :, None] * mj[None, :, :]
        si_s0_cross[:, :, l] = (pj[None, :, :] * cross_j).sum(axis=2)

    post = VoxelPosterior(
        state_probs=state_probs,
        s0_mean_by_state=s0_mean_by_state,
        s0_var_by_state=s0_var_by_state,
        s0_mean=s0_mean,
        s0_second=s0_second,
        si_mean=si_mean,
        si_second=si_second,
        si_s0_cross=si_s0_cross,
    )
    return post, loglik


def observed_loglik(Y, X, params):
    """Observed-data log-likelihood (exact under the factorized model)."""
    _, ll = estep(Y, X, params)
    return ll


def _estep_exact_voxel(y_stack, X, params, B_v):
    """Exact-enumeration posterior at one voxel via full joint-Gaussian algebra.

    Enumerates all m^q state configurations; for each, conditions the joint
    Gaussian of (s0, s_1..s_N) on the stacked observation y = H u + e. Kept
    deliberately independent of the factorized path.
    """
    N, q = y_stack.shape
    m = params.mog.m
    d = q * (N + 1)
    sigma0 = params.sigma0_sq

    # observation operator: y_i = A_i s_i + e_i
    H = np.zeros((N * q, d))
    for i in range(N):
        H[i * q : (i + 1) * q, q * (i + 1) : q * (i + 2)] = params.A[i]
    y = y_stack.reshape(N * q)
    offsets = X @ B_v  # (N, q) of beta' x_i

    configs = list(itertools.product(range(m), repeat=q))
    logws = np.empty(len(configs))
    post_means = np.empty((len(configs), d))
    post_covs = np.empty((len(configs), d, d))
    for k, z in enumerate(configs):
        mu_z = params.mog.means[np.arange(q), z]
        var_z = params.mog.variances[np.arange(q), z]
        prior_mean = np.concatenate([mu_z] + [mu_z + offsets[i] for i in range(N)])
        Sigma = np.zeros((d, d))
        Sz = np.diag(var_z)
        for a in range(N + 1):
            for bb in range(N + 1):
                Sigma[a * q : (a + 1) * q, bb * q : (bb + 1) * q] = Sz
            if a >= 1:
                Sigma[a * q : (a + 1) * q, a * q : (a + 1) * q] += np.diag(params.D)
        S_yy = H @ Sigma @ H.T + sigma0 * np.eye(N * q)
        resid = y - H @ prior_mean
        sign, logdet = np.linalg.slogdet(S_yy)
        sol = np.linalg.solve(S_yy, resid)
        logws[k] = (
            float(np.log(params.mog.weights[np.arange(q), z]).sum())
            - 0.5 * (N * q * LOG_2PI + logdet + resid @ sol)
        )
        K = Sigma @ H.T
        post_means[k] = prior_mean + K @ sol
        post_covs[k] = Sigma - K @ np.linalg.solve(S_yy, K.T)

    logws -= logsumexp(logws)
    w = np.exp(logws)

    state_probs = np.zeros((1, q, m))
    s0_mean_by_state = np.zeros((1, q, m))
    s0_var_by_state = np.zeros((1, q, m))
    for k, z in enumerate(configs):
        for l in range(q):
            state_probs[0, l, z[l]] += w[k]
    # per-state conditional moments of s0
    for l in range(q):
        for j in range(m):
            sel = [k for k, z in enumerate(configs) if z[l] == j]
            wsel = w[sel]
            tot = wsel.sum()
            if tot <= 0:
                s0_mean_by_state[0, l, j] = 0.0
                s0_var_by_state[0, l, j] = params.mog.variances[l, j]
                continue
            mu1 = (wsel * post_means[sel, l]).sum() / tot
            e2 = (wsel * (post_means[sel, l] ** 2 + post_covs[sel, l, l])).sum() / tot
            s0_mean_by_state[0, l, j] = mu1
            s0_var_by_state[0, l, j] = e2 - mu1 * mu1

    first = (w[:, None] * post_means).sum(axis=0)
    second = (w[:, None, None] * (post_covs + post_means[:, :, None] * post_means[:, None, :])).sum(
        axis=0
    )
    s0_mean = first[:q].reshape(1, q)
    s0_second = np.diag(second)[:q].reshape(1, q)
    si_mean = np.empty((N, 1, q))
    si_second = np.empty((N, 1, q))
    si_s0_cross = np.empty((N, 1, q))
    for i in range(N):
        sl = slice(q * (i + 1), q * (i + 2))
        si_mean[i, 0] = first[sl]
        si_second[i, 0] = np.diag(second[sl, sl])
        si_s0_cross[i, 0] = np.diag(second[sl, :q])

    return VoxelPosterior(
        state_probs=state_probs,
        s0_mean_by_state=s0_mean_by_state,
        s0_var_by_state=s0_var_by_state,
        s0_mean=s0_mean,
        s0_second=s0_second,
        si_mean=si_mean,
        si_second=si_second,
        si_s0_cross=si_s0_cross,
    )


def estep_voxel(y_stack, X, params, mode="factorized", voxel=0):
    """Posterior at a single voxel.

    `y_stack` is the (N, q) stack of subject observations at that voxel;
    B is taken from params.B[voxel].
    """
    N, q = y_stack.shape
    if mode == "factorized":
        Y = np.ascontiguousarray(y_stack[:, :, None])  # (N, q, 1)
        pv = HcicaParams(
            A=params.A,
            sigma0_sq=params.sigma0_sq,
            D=params.D,
            mog=params.mog,
            B=params.B[voxel : voxel + 1],
        )
        post, _ = estep(Y, X, pv)
        return post
    if mode == "exact-enumeration":
        return _estep_exact_voxel(y_stack, X, params, params.B[voxel])
    raise ValueError(f"unknown estep mode {mode!r}")


def _expected_level2_residual_sq(post, b):
    """E[(s_il - s0_l - b_il)^2] per (i, v, l), b = covariate offsets."""
    return (
        post.si_second
        - 2.0 * post.si_s0_cross
        - 2.0 * b * post.si_mean
        + post.s0_second[None, :, :]
        + 2.0 * b * post.s0_mean[None, :, :]
        + b * b
    )


def q_function(post: VoxelPosterior, Y, X, params: HcicaParams):
    """Expected complete-data log-likelihood under the stored posteriors."""
    N, q_data, V = Y.shape
    q = params.q
    m = params.mog.m
    ytil = rotate_to_source_space(Y, params)
    b = covariate_offsets(X, params.B)

    # first level: y_i | s_i
    ysq = np.einsum("nqv->n", Y**2)
    cross = np.einsum("nvq,nvq->", ytil, post.si_mean)
    s_sq = post.si_second.sum()
    term1 = -0.5 * N * q_data * V * (LOG_2PI + np.log(params.sigma0_sq)) - 0.5 * (
        ysq.sum() - 2.0 * cross + s_sq
    ) / params.sigma0_sq

    # second level: s_i | s0, beta
    resid2 = _expected_level2_residual_sq(post, b)  # (N, V, q)
    term2 = (
        -0.5 * N * V * (q * LOG_2PI + np.log(params.D).sum())
        - 0.5 * (resid2.sum(axis=(0, 1)) / params.D).sum()
    )

    # MoG prior on s0 and state prior
    term3 = 0.0
    for l in range(q):
        pj = post.state_probs[:, l, :]  # (V, m)
        mj = post.s0_mean_by_state[:, l, :]
        vj = post.s0_var_by_state[:, l, :]
        for j in range(m):
            mu = params.mog.means[l, j]
            s2 = params.mog.variances[l, j]
            quad = vj[:, j] + (mj[:, j] - mu) ** 2
            term3 += float(
                (pj[:, j] * (-0.5 * (LOG_2PI + np.log(s2)) - 0.5 * quad / s2)).sum()
            )
            term3 += float(pj[:, j].sum()) * np.log(max(params.mog.weights[l, j], 1e-300))
    total = term1 + term2 + term3
    if not np.isfinite(total):
        raise NumericalError("non-finite Q value")
    return float(total)


def mstep_update(post: VoxelPosterior, Y, X, params: HcicaParams) -> HcicaParams:
    """One M-step: closed-form maximizers of the expected log-likelihood."""
    N, q_data, V = Y.shape
    q = params.q
    m = params.mog.m
    p = X.shape[1]

    # (a) local covariate effects by GLS-free least squares on posterior means
    G = X.T @ X
    if np.linalg.matrix_rank(G) < p:
        raise DesignError("X'X is singular; cannot update covariate effects")
    diff = post.si_mean - post.s0_mean[None, :, :]  # (N, V, q)
    rhs = np.einsum("ip,ivl->pvl", X, diff).reshape(p, V * q)
    B = np.linalg.solve(G, rhs).reshape(p, V, q).transpose(1, 0, 2)

    # (b) mixing matrices by orthogonal Procrustes
    A = np.empty_like(params.A)
    for i in range(N):
        M = Y[i] @ post.si_mean[i]  # (q_data, V) @ (V, q)
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
        if s[-1] < 1e-12 * max(s[0], 1.0):
            log.warning("rank-deficient Procrustes target for subject %d; completing by SVD", i)
        A[i] = U @ Vt

    # (c) first-level noise variance
    ytil = np.empty((N, V, q))
    for i in range(N):
        ytil[i] = (A[i].T @ Y[i]).T
    ysq = float((Y**2).sum())
    cross = float(np.einsum("nvq,nvq->", ytil, post.si_mean))
    sigma0_sq = (ysq - 2.0 * cross + float(post.si_second.sum())) / (N * q_data * V)

    # (d) between-subject variances, with the updated B
    b = covariate_offsets(X, B)
    resid2 = _expected_level2_residual_sq(post, b)
    D = resid2.sum(axis=(0, 1)) / (N * V)

    # (e) mixture parameters from posterior state moments
    weights = np.empty((q, m))
    means = np.empty((q, m))
    variances = np.empty((q, m))
    for l in range(q):
        pj = post.state_probs[:, l, :]
        denom = pj.sum(axis=0)
        denom = np.maximum(denom, 1e-300)
        weights[l] = pj.sum(axis=0) / V
        means[l] = (pj * post.s0_mean_by_state[:, l, :]).sum(axis=0) / denom
        sq = post.s0_var_by_state[:, l, :] + (
            post.s0_mean_by_state[:, l, :] - means[l][None, :]
        ) ** 2
        variances[l] = (pj * sq).sum(axis=0) / denom

    # floors against degenerate collapse
    data_var = float(Y.var())
    floor = 1e-10 * max(data_var, 1e-30)
    sigma0_sq = max(sigma0_sq, floor)
    D = np.maximum(D, floor)
    s0_var = post.s0_mean.var(axis=0)
    mog_floor = np.maximum(1e-6 * s0_var, 1e-12)
    variances = np.maximum(variances, mog_floor[:, None])
    weights = weights / weights.sum(axis=1, keepdims=True)

    mog, _ = MoGParams(weights=weights, means=means, variances=variances).sorted_background_first()
    return HcicaParams(A=A, sigma0_sq=float(sigma0_sq), D=D, mog=mog, B=B)


def _rel_change(prev, nxt):
    denom = np.linalg.norm(prev)
    delta = np.linalg.norm(nxt - prev)
    if denom == 0.0:
        log.warning("zero-norm parameter block; reporting absolute change")
        return float(delta)
    return float(delta / denom)


def convergence_metrics(prev: HcicaParams, nxt: HcicaParams):
    """(delta_global, delta_local): relative Frobenius change per block."""
    dg = _rel_change(prev.global_vector(), nxt.global_vector())
    dl = _rel_change(prev.local_vector(), nxt.local_vector())
    return dg, dl


@dataclass
class FittedModel:
    """Final parameters with the matching posteriors and inputs."""

    params: HcicaParams
    posterior: VoxelPosterior
    X: np.ndarray
    loglik: float


def em_run(
    Y,
    X,
    init: HcicaParams,
    config: EmConfig,
    progress_sink=None,
    stop_signal=None,
    snapshot_writer=None,
):
    """Run EM to convergence, iteration cap, or cooperative stop.

    `progress_sink(record)` receives a dict per completed iteration;
    `stop_signal` (object with is_set()) is honored at iteration boundaries;
    `snapshot_writer(state)` is called per the snapshot cadence and at exit.

    Returns (EmState, FittedModel).
    """
    init.validate()
    params = init.copy()
    state = EmState(iteration=0, params=params)
    post = None
    loglik = None
    for it in range(1, config.max_iterations + 1):
        post, loglik = estep(Y, X, params)
        try:
            new_params = mstep_update(post, Y, X, params)
        except Exception as exc:
            raise type(exc)(f"iteration {it}: {exc}") from exc
        dg, dl = convergence_metrics(params, new_params)
        params = new_params
        state.iteration = it
        state.params = params
        state.history.append((dg, dl))
        state.loglik_history.append(loglik)
        if progress_sink is not None:
            progress_sink(
                {
                    "iteration": it,
                    "delta_global": dg,
                    "delta_local": dl,
                    "loglik": loglik,
                    "timestamp": time.time(),
                }
            )
        if snapshot_writer is not None and it % config.snapshot_every == 0:
            snapshot_writer(state)

        if stop_signal is not None and stop_signal.is_set():
            state.termination = "user-stop"
            break
        if dg < config.eps_global and dl < config.eps_local:
            state.termination = "converged"
            break
    else:
        state.termination = "max-iterations"

    post, loglik = estep(Y, X, params)
    if snapshot_writer is not None:
        snapshot_writer(state)
    fitted = FittedModel(params=params, posterior=post, X=np.asarray(X, dtype=float), loglik=loglik)
    return state, fitted
