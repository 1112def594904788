"""E-step, Q function, M-step, convergence metrics, and the EM driver."""

import numpy as np
import pytest

from hcica.em import (
    convergence_metrics,
    em_run,
    estep,
    estep_voxel,
    mstep_update,
    q_function,
)
from hcica.model import EmConfig, HcicaParams, MoGParams, VoxelPosterior
from hcica.simulate import random_orthogonal, sample_model


def posterior_fields(post):
    return {
        "state_probs": post.state_probs,
        "s0_mean_by_state": post.s0_mean_by_state,
        "s0_var_by_state": post.s0_var_by_state,
        "s0_mean": post.s0_mean,
        "s0_second": post.s0_second,
        "si_mean": post.si_mean,
        "si_second": post.si_second,
        "si_s0_cross": post.si_s0_cross,
    }


def assert_posteriors_close(a, b, atol):
    fa, fb = posterior_fields(a), posterior_fields(b)
    for name in fa:
        x = fa[name]
        y = fb[name]
        if name in ("si_mean", "si_second", "si_s0_cross"):
            # voxel layouts differ: (N, 1, q) vs (N, V, q) slices
            x = x.reshape(y.shape)
        assert np.max(np.abs(x - y)) < atol, name


def test_factorized_matches_exact_enumeration():
    sim = sample_model(N=3, q=2, V=5, p=2, seed=0)
    for v in range(5):
        y_stack = sim.Y[:, :, v]
        fac = estep_voxel(y_stack, sim.X, sim.params, mode="factorized", voxel=v)
        exact = estep_voxel(y_stack, sim.X, sim.params, mode="exact-enumeration", voxel=v)
        assert_posteriors_close(fac, exact, 1e-10)


def test_noise_free_collapse():
    # sigma0 -> 0 with identity mixing: s_1 posterior mean is the datum and
    # states follow the mixture responsibilities of y - beta x under the
    # component-plus-subject variance
    mog = MoGParams(
        weights=np.array([[0.7, 0.3]]),
        means=np.array([[0.0, 3.0]]),
        variances=np.array([[0.5, 1.0]]),
    )
    nu_sq = 0.4
    beta = 0.8
    x = np.array([[0.5]])
    y = 1.9
    params = HcicaParams(
        A=np.ones((1, 1, 1)),
        sigma0_sq=1e-12,
        D=np.array([nu_sq]),
        mog=mog,
        B=np.array([[[beta]]]),
    )
    post = estep_voxel(np.array([[y]]), x, params)
    assert abs(post.si_mean[0, 0, 0] - y) < 1e-6

    d = y - beta * 0.5
    dens = mog.weights[0] * np.exp(
        -0.5 * (d - mog.means[0]) ** 2 / (mog.variances[0] + nu_sq)
    ) / np.sqrt(2 * np.pi * (mog.variances[0] + nu_sq))
    resp = dens / dens.sum()
    assert np.max(np.abs(post.state_probs[0, 0] - resp)) < 1e-5


def test_zero_data_symmetry():
    mog = MoGParams(
        weights=np.array([[0.6, 0.4]]),
        means=np.array([[0.0, 0.0]]),
        variances=np.array([[0.5, 2.0]]),
    )
    N = 4
    params = HcicaParams(
        A=np.stack([np.eye(1)] * N),
        sigma0_sq=0.1,
        D=np.array([0.3]),
        mog=mog,
        B=np.zeros((1, 1, 1)),
    )
    X = np.zeros((N, 1))
    post = estep_voxel(np.zeros((N, 1)), X, params)
    assert np.max(np.abs(post.s0_mean)) < 1e-14
    assert np.max(np.abs(post.si_mean)) < 1e-14
    # state probabilities proportional to pi_j times the marginal at zero
    c = 0.3 + 0.1
    logm = -0.5 * (N * np.log(2 * np.pi * c) + np.log1p(N * mog.variances[0] / c))
    w = mog.weights[0] * np.exp(logm)
    assert np.max(np.abs(post.state_probs[0, 0] - w / w.sum())) < 1e-12


def test_q_value_nondecreasing_over_mstep():
    sim = sample_model(N=6, q=2, V=300, p=2, seed=1)
    post, _ = estep(sim.Y, sim.X, sim.params)
    q_before = q_function(post, sim.Y, sim.X, sim.params)
    new_params = mstep_update(post, sim.Y, sim.X, sim.params)
    q_after = q_function(post, sim.Y, sim.X, new_params)
    assert q_after >= q_before - 1e-9 * abs(q_before)


def test_q_function_hand_computed_toy():
    # one subject, one voxel, one IC, two states; every moment chosen by hand
    y = 0.7
    x = 0.5
    beta = 0.3
    sigma0_sq = 0.2
    nu_sq = 0.4
    pi = np.array([0.6, 0.4])
    mu = np.array([0.0, 2.0])
    s2 = np.array([0.5, 1.0])
    pj = np.array([0.55, 0.45])
    mj = np.array([0.1, 1.2])
    vj = np.array([0.3, 0.25])
    s0_mean = float((pj * mj).sum())
    s0_second = float((pj * (mj**2 + vj)).sum())
    si_mean = 0.65
    si_second = 0.71
    cross = 0.33

    params = HcicaParams(
        A=np.ones((1, 1, 1)),
        sigma0_sq=sigma0_sq,
        D=np.array([nu_sq]),
        mog=MoGParams(weights=pi[None], means=mu[None], variances=s2[None]),
        B=np.array([[[beta]]]),
    )
    post = VoxelPosterior(
        state_probs=pj[None, None, :],
        s0_mean_by_state=mj[None, None, :],
        s0_var_by_state=vj[None, None, :],
        s0_mean=np.array([[s0_mean]]),
        s0_second=np.array([[s0_second]]),
        si_mean=np.array([[[si_mean]]]),
        si_second=np.array([[[si_second]]]),
        si_s0_cross=np.array([[[cross]]]),
    )

    log2pi = np.log(2 * np.pi)
    b = beta * x
    term1 = -0.5 * (log2pi + np.log(sigma0_sq)) - 0.5 * (
        y * y - 2 * y * si_mean + si_second
    ) / sigma0_sq
    resid2 = (
        si_second - 2 * cross - 2 * b * si_mean + s0_second + 2 * b * s0_mean + b * b
    )
    term2 = -0.5 * (log2pi + np.log(nu_sq)) - 0.5 * resid2 / nu_sq
    term3 = 0.0
    for j in range(2):
        quad = vj[j] + (mj[j] - mu[j]) ** 2
        term3 += pj[j] * (-0.5 * (log2pi + np.log(s2[j])) - 0.5 * quad / s2[j])
        term3 += pj[j] * np.log(pi[j])
    expected = term1 + term2 + term3

    got = q_function(post, np.array([[[y]]]), np.array([[x]]), params)
    assert abs(got - expected) < 1e-12


def point_mass_instance(seed=2, N=8, q=2, V=400, p=2):
    """Synthetic data crafted so the complete-data MLE equals the generating
    values: gamma orthogonal to the design, noise orthogonal to the sources,
    both rescaled to their exact second moments."""
    rng = np.random.default_rng(seed)
    sigma0_sq = 0.15
    nu_sq = np.array([0.3, 0.5])
    X = rng.standard_normal((N, p))
    s0 = rng.standard_normal((V, q))
    B = rng.standard_normal((V, p, q))

    gamma = rng.standard_normal((N, V, q))
    proj = X @ np.linalg.solve(X.T @ X, X.T)  # (N, N)
    gamma -= np.einsum("ij,jvl->ivl", proj, gamma)
    for l in range(q):
        gamma[:, :, l] *= np.sqrt(nu_sq[l] * N * V / (gamma[:, :, l] ** 2).sum())

    s_i = s0[None] + np.einsum("ip,vpl->ivl", X, B) + gamma
    A = np.stack([random_orthogonal(q, rng) for _ in range(N)])
    E = rng.standard_normal((N, q, V))
    for i in range(N):
        S = s_i[i].T  # (q, V)
        E[i] -= (E[i] @ S.T) @ np.linalg.solve(S @ S.T, S)
    E *= np.sqrt(sigma0_sq * N * q * V / (E**2).sum())
    Y = np.einsum("nab,nvb->nav", A, s_i) + E

    mog = MoGParams(
        weights=np.full((q, 2), 0.5),
        means=np.column_stack([np.zeros(q), np.ones(q)]),
        variances=np.ones((q, 2)),
    )
    truth = HcicaParams(A=A, sigma0_sq=sigma0_sq, D=nu_sq.copy(), mog=mog, B=B)
    post = VoxelPosterior(
        state_probs=np.dstack([np.ones((V, q)), np.zeros((V, q))]),
        s0_mean_by_state=np.dstack([s0, np.zeros((V, q))]),
        s0_var_by_state=np.zeros((V, q, 2)),
        s0_mean=s0.copy(),
        s0_second=s0**2,
        si_mean=s_i.copy(),
        si_second=s_i**2,
        si_s0_cross=s_i * s0[None],
    )
    return Y, X, truth, post


def test_mstep_point_mass_recovers_generating_values():
    Y, X, truth, post = point_mass_instance()
    new = mstep_update(post, Y, X, truth)
    assert np.max(np.abs(new.B - truth.B)) < 1e-10
    assert abs(new.sigma0_sq - truth.sigma0_sq) < 1e-10
    assert np.max(np.abs(new.D - truth.D)) < 1e-10
    assert np.max(np.abs(new.A - truth.A)) < 1e-8


def test_procrustes_fixed_point():
    # when the cross-product target is already orthogonal the update keeps it
    rng = np.random.default_rng(3)
    q, V, N = 2, 300, 1
    A0 = random_orthogonal(q, rng)
    s = rng.standard_normal((V, q))
    # make the source second-moment matrix the identity so Y E[s]' = A0
    s = s @ np.linalg.inv(np.linalg.cholesky(s.T @ s / V)).T
    Y = np.einsum("ab,vb->av", A0, s)[None]
    X = np.ones((1, 1))
    params = HcicaParams(
        A=A0[None],
        sigma0_sq=1e-8,
        D=np.array([1e-6, 1e-6]),
        mog=MoGParams(
            weights=np.full((2, 2), 0.5),
            means=np.column_stack([np.zeros(2), np.ones(2)]),
            variances=np.ones((2, 2)),
        ),
        B=np.zeros((V, 1, 2)),
    )
    post, _ = estep(Y, X, params)
    new = mstep_update(post, Y, X, params)
    assert np.max(np.abs(new.A[0] - A0)) < 1e-6


def test_pi_update_uniform_state_probs():
    sim = sample_model(N=4, q=2, V=100, p=1, seed=4)
    post, _ = estep(sim.Y, sim.X, sim.params)
    post.state_probs[:] = 0.5
    new = mstep_update(post, sim.Y, sim.X, sim.params)
    assert np.allclose(new.mog.weights, 0.5, atol=1e-12)


# ------------------------------------------------------ convergence metrics


def test_identical_params_zero_change():
    sim = sample_model(N=2, q=2, V=50, p=1, seed=5)
    assert convergence_metrics(sim.params, sim.params.copy()) == (0.0, 0.0)


def test_doubling_gives_unit_change():
    sim = sample_model(N=2, q=2, V=50, p=1, seed=6)
    doubled = sim.params.copy()
    doubled.A = 2 * doubled.A
    doubled.sigma0_sq = 2 * doubled.sigma0_sq
    doubled.D = 2 * doubled.D
    doubled.mog.weights = 2 * doubled.mog.weights
    doubled.mog.means = 2 * doubled.mog.means
    doubled.mog.variances = 2 * doubled.mog.variances
    doubled.B = 2 * doubled.B
    dg, dl = convergence_metrics(sim.params, doubled)
    assert abs(dg - 1.0) < 1e-14
    assert abs(dl - 1.0) < 1e-14


def test_random_pair_matches_direct_norms():
    rng = np.random.default_rng(7)
    a = sample_model(N=3, q=2, V=40, p=2, seed=8).params
    b = a.copy()
    b.B = b.B + 0.1 * rng.standard_normal(b.B.shape)
    b.A = b.A + 0.01 * rng.standard_normal(b.A.shape)
    dg, dl = convergence_metrics(a, b)
    assert abs(dg - np.linalg.norm(b.global_vector() - a.global_vector()) / np.linalg.norm(a.global_vector())) < 1e-14
    assert abs(dl - np.linalg.norm(b.B - a.B) / np.linalg.norm(a.B)) < 1e-14


# ----------------------------------------------------------------- driver


def test_fixed_point_converges_at_iteration_one():
    sim = sample_model(N=5, q=2, V=200, p=1, seed=9)
    tight = EmConfig(max_iterations=1000, eps_global=1e-6, eps_local=1e-6)
    state, fitted = em_run(sim.Y, sim.X, sim.params.copy(), tight)
    assert state.termination == "converged"
    loose = EmConfig(max_iterations=50, eps_global=1e-4, eps_local=1e-4)
    state2, _ = em_run(sim.Y, sim.X, fitted.params.copy(), loose)
    assert state2.iteration == 1
    assert state2.termination == "converged"


class StopAfter:
    def __init__(self, n):
        self.n = n
        self.seen = 0

    def sink(self, record):
        self.seen = record["iteration"]

    def is_set(self):
        return self.seen >= self.n


def test_user_stop_at_iteration_boundary():
    sim = sample_model(N=5, q=2, V=200, p=1, seed=10)
    stopper = StopAfter(3)
    config = EmConfig(max_iterations=50, eps_global=1e-12, eps_local=1e-12)
    state, _ = em_run(
        sim.Y, sim.X, sim.params.copy(), config,
        progress_sink=stopper.sink, stop_signal=stopper,
    )
    assert state.iteration == 3
    assert state.termination == "user-stop"
    assert len(state.history) == 3


def test_max_iterations_termination():
    sim = sample_model(N=4, q=2, V=100, p=1, seed=11)
    config = EmConfig(max_iterations=2, eps_global=1e-14, eps_local=1e-14)
    state, _ = em_run(sim.Y, sim.X, sim.params.copy(), config)
    assert state.iteration == 2
    assert state.termination == "max-iterations"


def test_loglik_monotone_short_run():
    sim = sample_model(N=10, q=2, V=500, p=2, seed=12)
    config = EmConfig(max_iterations=20, eps_global=1e-12, eps_local=1e-12)
    state, _ = em_run(sim.Y, sim.X, sim.params.copy(), config)
    ll = np.array(state.loglik_history)
    assert np.all(np.diff(ll) >= -1e-8 * np.abs(ll[:-1]))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        EmConfig(max_iterations=0)
    with pytest.raises(ValueError):
        EmConfig(eps_global=0.0)
    with pytest.raises(ValueError):
        EmConfig(estep_mode="bogus")
