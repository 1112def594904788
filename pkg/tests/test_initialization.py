"""Group decomposition: two-stage PCA, fastICA, back-reconstruction, mixture
fits, starting values, and IC subset selection."""

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from hcica.errors import ConvergenceError, DesignError, RankError
from hcica.initialization import (
    back_reconstruct,
    fast_ica_extract,
    fit_scalar_mog,
    initialize_params,
    select_ics,
    two_stage_pca,
)
from hcica.simulate import sample_model


def shared_source_subjects(N, q, T, V, noise=0.05, seed=0):
    rng = np.random.default_rng(seed)
    S = rng.laplace(size=(q, V))
    mats = []
    for _ in range(N):
        A = rng.standard_normal((T, q))
        mats.append(A @ S + noise * rng.standard_normal((T, V)))
    return mats, S


# ------------------------------------------------------------ two-stage PCA


def test_single_subject_collapse():
    mats, _ = shared_source_subjects(N=1, q=3, T=20, V=150)
    pca = two_stage_pca(mats, R=3, q=3)
    Y = mats[0] - mats[0].mean(axis=1, keepdims=True)
    U, s, _ = np.linalg.svd(Y, full_matrices=False)
    top = (U[:, :3].T @ Y)
    angles = subspace_angles(pca.group.T, top.T)
    assert np.max(angles) < 1e-8


def test_shared_subspace_recovered():
    mats, S = shared_source_subjects(N=5, q=4, T=30, V=400, noise=0.01, seed=1)
    pca = two_stage_pca(mats, R=10, q=4)
    Sc = S - S.mean(axis=1, keepdims=True)
    angles = subspace_angles(pca.group.T, Sc.T)
    assert np.max(angles) < 1e-3


def test_stacked_dims_bookkeeping():
    mats, _ = shared_source_subjects(N=3, q=2, T=12, V=100)
    pca = two_stage_pca(mats, R=6, q=2)
    assert np.vstack(pca.stage1_reduced).shape == (18, 100)
    assert pca.expand.shape == (18, 2)
    assert pca.group.shape == (2, 100)
    # whitened rows
    assert np.allclose(pca.group @ pca.group.T / 100, np.eye(2), atol=1e-10)


def test_R_below_q_rejected():
    mats, _ = shared_source_subjects(N=2, q=2, T=10, V=50)
    with pytest.raises(RankError):
        two_stage_pca(mats, R=1, q=2)


# ----------------------------------------------------------------- fastICA


def test_laplace_bss_recovery():
    rng = np.random.default_rng(2)
    S = rng.laplace(size=(2, 4000))
    S = (S - S.mean(axis=1, keepdims=True)) / S.std(axis=1, keepdims=True)
    Q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    X = Q @ S
    S_hat, mixing = fast_ica_extract(X, seed=0)
    C = np.abs(np.corrcoef(np.vstack([S, S_hat]))[:2, 2:])
    # permutation/sign: the best match per true source
    assert C.max(axis=1).min() > 0.99
    # mixing inverts the unmixing on the whitened data
    assert np.allclose(mixing @ S_hat, X, atol=1e-6)


def test_gaussian_input_unidentifiable():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((3, 3000))
    X = np.linalg.cholesky(np.linalg.inv(X @ X.T / 3000)) @ X  # whiten
    with pytest.raises(ConvergenceError):
        fast_ica_extract(X, seed=1, max_iter=30, tol=1e-12)


def test_fastica_deterministic():
    rng = np.random.default_rng(4)
    S = rng.laplace(size=(3, 2000))
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    X = Q @ ((S - S.mean(axis=1, keepdims=True)) / S.std(axis=1, keepdims=True))
    a1 = fast_ica_extract(X, seed=7)
    a2 = fast_ica_extract(X.copy(), seed=7)
    assert np.array_equal(a1[0], a2[0])
    assert np.array_equal(a1[1], a2[1])


# ------------------------------------------------------ back-reconstruction


def test_identical_subjects_reproduce_group_maps():
    mats, _ = shared_source_subjects(N=1, q=3, T=25, V=300, noise=0.0, seed=5)
    mats = [mats[0]] * 3
    pca = two_stage_pca(mats, R=3, q=3)
    S0, mixing = fast_ica_extract(pca.group, seed=0)
    subject_ics = back_reconstruct(pca, mixing, S0)
    for i in range(3):
        assert np.max(np.abs(subject_ics[i] - S0)) < 1e-8


def test_back_reconstruction_tracks_subject_shift():
    sim = sample_model(N=6, q=3, V=1500, p=2, seed=6)
    # build time series per subject from its level-2 sources
    rng = np.random.default_rng(6)
    mats = []
    for i in range(6):
        tc = rng.standard_normal((30, 3))
        mats.append(tc @ sim.s_i[i].T + 0.05 * rng.standard_normal((30, 1500)))
    pca = two_stage_pca(mats, R=6, q=3)
    S0, mixing = fast_ica_extract(pca.group, seed=0)
    subject_ics = back_reconstruct(pca, mixing, S0)
    for i in range(6):
        C = np.abs(np.corrcoef(np.vstack([sim.s_i[i].T.reshape(3, -1), subject_ics[i]]))[:3, 3:])
        assert C.max(axis=1).min() > 0.9


# ------------------------------------------------------------- mixture fits


def test_mog_monte_carlo_consistency():
    rng = np.random.default_rng(7)
    n = 100_000
    z = rng.random(n) < 0.1
    x = np.where(z, rng.normal(4.0, 1.0, n), rng.normal(0.0, 1.0, n))
    w, mu, var = fit_scalar_mog(x, m=2, seed=0)
    assert abs(w[0] - 0.9) < 0.02
    assert abs(mu[0] - 0.0) < 0.1
    assert abs(mu[1] - 4.0) < 0.1
    assert abs(mu[0]) <= abs(mu[1])  # background first


def test_mog_constant_input_rejected():
    with pytest.raises(RankError):
        fit_scalar_mog(np.ones(500), m=2)


def test_mog_symmetric_gaussian_keeps_invariants():
    rng = np.random.default_rng(8)
    w, mu, var = fit_scalar_mog(rng.standard_normal(5000), m=2, seed=0)
    assert np.isclose(w.sum(), 1.0)
    assert np.all(var > 0)
    assert np.all(w >= 0)


def test_mog_bad_m_rejected():
    with pytest.raises(ValueError):
        fit_scalar_mog(np.random.default_rng(0).standard_normal(500), m=4)


# --------------------------------------------------------- starting values


def test_two_point_ols_identity():
    # two identical-geometry subjects, X = (0, 1)': beta0 = s_2 - s_1
    rng = np.random.default_rng(9)
    q, V = 2, 120
    subject_ics = rng.standard_normal((2, q, V))
    whitened = subject_ics.copy()
    X = np.array([[0.0], [1.0]])
    params = initialize_params(subject_ics, X, whitened, m=2)
    expected = (subject_ics[1] - subject_ics[0]).T  # (V, q)
    assert np.allclose(params.B[:, 0, :], expected, atol=1e-8)


def test_initial_beta_correlates_with_truth():
    sim = sample_model(N=20, q=3, V=1500, p=2, seed=10)
    ytil = np.einsum("nba,nbv->nav", sim.params.A, sim.Y)  # rotate by A'
    params = initialize_params(ytil, sim.X, sim.Y, m=2)
    for k in range(2):
        for l in range(3):
            c = abs(np.corrcoef(params.B[:, k, l], sim.B[:, k, l])[0, 1])
            assert c > 0.7


def test_empty_design_rejected():
    rng = np.random.default_rng(11)
    with pytest.raises(DesignError):
        initialize_params(rng.standard_normal((3, 2, 50)), np.empty((3, 0)), rng.standard_normal((3, 2, 50)))


# --------------------------------------------------------------- select_ics


def test_keep_all_identity():
    sim = sample_model(N=4, q=3, V=200, p=1, seed=12)
    subject_ics = np.einsum("nba,nbv->nav", sim.params.A, sim.Y)
    reduced, cleaned, kept = select_ics(sim.params, sim.Y, subject_ics, keep=[0, 1, 2])
    assert np.max(np.abs(cleaned - sim.Y)) < 1e-12
    assert reduced.q == 3


def test_drop_one_reduces_rank():
    sim = sample_model(N=1, q=2, V=500, p=1, seed=13, sigma0_sq=1e-6, nu_sq=1e-6)
    subject_ics = np.einsum("nba,nbv->nav", sim.params.A, sim.Y)
    reduced, cleaned, kept = select_ics(sim.params, sim.Y, subject_ics, keep=[1])
    s = np.linalg.svd(cleaned[0], compute_uv=False)
    assert s[0] / max(s[1], 1e-30) > 10
    assert reduced.A.shape == (1, 2, 1)
    assert reduced.B.shape == (500, 1, 1)
    reduced.validate()


def test_dropped_subset_recovers_like_ground_truth():
    # a 4-IC dataset whose 4th IC is pure nuisance: dropping it should fit
    # the remaining sources about as well as a 3-IC ground-truth run
    from hcica.em import em_run
    from hcica.model import EmConfig

    sim4 = sample_model(N=10, q=4, V=800, p=1, seed=14)
    subject_ics = np.einsum("nba,nbv->nav", sim4.params.A, sim4.Y)
    reduced, cleaned, kept = select_ics(sim4.params, sim4.Y, subject_ics, keep=[0, 1, 2])
    cfg = EmConfig(max_iterations=10, eps_global=1e-9, eps_local=1e-9)
    _, fit_drop = em_run(cleaned, sim4.X, reduced, cfg)

    sim3 = sample_model(N=10, q=3, V=800, p=1, seed=15)
    _, fit_ref = em_run(sim3.Y, sim3.X, sim3.params.copy(), cfg)

    def mean_corr(fit, s0_true, q):
        C = np.abs(
            np.corrcoef(np.vstack([s0_true.T, fit.posterior.s0_mean.T]))[:q, q:]
        )
        return C.max(axis=1).mean()

    c_drop = mean_corr(fit_drop, sim4.s0[:, [0, 1, 2]], 3)
    c_ref = mean_corr(fit_ref, sim3.s0, 3)
    assert c_drop > c_ref - 0.02


def test_bad_keep_sets_rejected():
    sim = sample_model(N=2, q=2, V=50, p=1, seed=16)
    subject_ics = np.einsum("nba,nbv->nav", sim.params.A, sim.Y)
    with pytest.raises(ValueError):
        select_ics(sim.params, sim.Y, subject_ics, keep=[])
    with pytest.raises(IndexError):
        select_ics(sim.params, sim.Y, subject_ics, keep=[5])
