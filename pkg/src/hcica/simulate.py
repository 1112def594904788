"""Synthetic data generation from the two-level model, for tests and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import HcicaParams, MoGParams


@dataclass
class SyntheticFit:
    """Ground truth plus whitened-domain observations."""

    Y: np.ndarray  # (N, q, V)
    X: np.ndarray  # (N, p)
    s0: np.ndarray  # (V, q)
    B: np.ndarray  # (V, p, q)
    s_i: np.ndarray  # (N, V, q)
    params: HcicaParams  # generating parameter values


def random_orthogonal(q, rng):
    M = rng.standard_normal((q, q))
    Q, R = np.linalg.qr(M)
    return Q * np.sign(np.diag(R))


def default_mog(q, rng, m=2):
    """Background-heavy mixtures with a clearly separated active component."""
    weights = np.tile([0.85, 0.15], (q, 1))[:, :m]
    weights = weights / weights.sum(axis=1, keepdims=True)
    means = np.column_stack([np.zeros(q), 3.0 + rng.uniform(0, 1, q)])[:, :m]
    variances = np.column_stack([np.full(q, 0.5), np.full(q, 1.0)])[:, :m]
    return MoGParams(weights=weights, means=means, variances=variances)


def sample_model(
    N=20,
    q=3,
    V=2000,
    p=2,
    seed=0,
    sigma0_sq=0.1,
    nu_sq=0.2,
    beta_scale=1.0,
    beta_sparsity=0.2,
    mog=None,
    X=None,
) -> SyntheticFit:
    """Draw one dataset from the generative model.

    Covariate effects are nonzero on a `beta_sparsity` fraction of voxels per
    (covariate, IC) pair; set beta_scale=0 for a null dataset.
    """
    rng = np.random.default_rng(seed)
    if mog is None:
        mog = default_mog(q, rng)
    m = mog.m

    if X is None:
        X = np.column_stack(
            [rng.standard_normal(N) if j % 2 == 0 else (np.arange(N) % 2).astype(float) for j in range(p)]
        )
    X = np.asarray(X, dtype=np.float64)

    # population sources from the mixture
    s0 = np.empty((V, q))
    for l in range(q):
        z = rng.choice(m, size=V, p=mog.weights[l])
        s0[:, l] = rng.normal(mog.means[l, z], np.sqrt(mog.variances[l, z]))

    B = np.zeros((V, p, q))
    if beta_scale != 0:
        for k in range(p):
            for l in range(q):
                active = rng.random(V) < beta_sparsity
                B[active, k, l] = beta_scale * rng.normal(1.5, 0.3, active.sum()) * rng.choice(
                    [-1, 1]
                )

    D = np.full(q, nu_sq)
    gamma = rng.normal(0.0, np.sqrt(nu_sq), size=(N, V, q))
    s_i = s0[None, :, :] + np.einsum("ip,vpl->ivl", X, B) + gamma

    A = np.stack([random_orthogonal(q, rng) for _ in range(N)])
    noise = rng.normal(0.0, np.sqrt(sigma0_sq), size=(N, q, V))
    Y = np.einsum("nab,nvb->nav", A, s_i) + noise

    params = HcicaParams(A=A, sigma0_sq=sigma0_sq, D=D, mog=mog, B=B)
    return SyntheticFit(Y=Y, X=X, s0=s0, B=B, s_i=s_i, params=params)


def sample_timeseries_dataset(N=24, q=3, T=50, dims=(6, 6, 6), seed=0, beta_scale=1.0):
    """Raw T x V time-series volumes for an end-to-end pipeline run.

    Each subject's data is a smooth time-course mixing of its level-2 source
    maps plus white noise. Returns (volumes, mask_flags, covariate_rows,
    truth) where volumes is a list of (T, X, Y, Z) arrays.
    """
    rng = np.random.default_rng(seed)
    V = int(np.prod(dims))

    # covariates mirroring a score / group / gender layout
    score = rng.integers(20, 50, N).astype(float)
    group = rng.permutation(np.array(["Trt", "Ctrl"] * ((N + 1) // 2))[:N])
    gender = rng.integers(0, 2, N).astype(float)
    X = np.column_stack([score, (group == "Trt").astype(float), gender])

    sim = sample_model(
        N=N, q=q, V=V, p=3, seed=seed + 1, beta_scale=beta_scale,
        X=np.column_stack([(score - score.mean()) / score.std(), (group == "Trt").astype(float), gender]),
    )

    volumes = []
    for i in range(N):
        tc = rng.standard_normal((T, q))
        # mild temporal smoothing so the leading subspace is stable
        kernel = np.array([0.25, 0.5, 0.25])
        for l in range(q):
            tc[:, l] = np.convolve(tc[:, l], kernel, mode="same")
        data = tc @ sim.s_i[i].T + 0.05 * rng.standard_normal((T, V))
        volumes.append(np.reshape(data.T, tuple(dims) + (T,), order="F"))

    mask = np.ones(dims, dtype=bool)
    rows = [["subject", "Score", "Group", "Gender"]]
    for i in range(N):
        rows.append([f"subj{i + 1}.nii", str(int(score[i])), str(group[i]), str(int(gender[i]))])
    return volumes, mask, rows, sim
