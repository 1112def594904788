"""Model parameter containers and EM bookkeeping types.

The two-level decomposition is
    y_i(v) = A_i s_i(v) + e_i(v),          e_i ~ N(0, sigma0^2 I_q)
    s_i(v) = s0(v) + B(v)' x_i + gamma_i,  gamma_i ~ N(0, diag(nu^2))
with each population source s0_l(v) following an m-component Gaussian
mixture. Parameters split into a global block (A_i, sigma0^2, nu^2,
mixture parameters) and a local block (the per-voxel B(v)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass
class MoGParams:
    """Per-IC Gaussian-mixture parameters; rows indexed by IC."""

    weights: np.ndarray  # (q, m), rows on the simplex
    means: np.ndarray  # (q, m)
    variances: np.ndarray  # (q, m), strictly positive

    @property
    def q(self):
        return self.weights.shape[0]

    @property
    def m(self):
        return self.weights.shape[1]

    def validate(self, atol=1e-8):
        if not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-10):
            raise NumericalError("mixture weights off the simplex")
        if np.any(self.variances <= 0):
            raise NumericalError("non-positive mixture variance")

    def sorted_background_first(self):
        """Reorder components per IC by ascending |mean| (ties: lower index).

        Component 1 is the background component. Returns (params, order)
        where order[l] is the permutation applied to IC l.
        """
        q, m = self.weights.shape
        w = np.empty_like(self.weights)
        mu = np.empty_like(self.means)
        var = np.empty_like(self.variances)
        orders = np.empty((q, m), dtype=int)
        for l in range(q):
            order = np.argsort(np.abs(self.means[l]), kind="stable")
            orders[l] = order
            w[l] = self.weights[l, order]
            mu[l] = self.means[l, order]
            var[l] = self.variances[l, order]
        return MoGParams(weights=w, means=mu, variances=var), orders


@dataclass
class HcicaParams:
    """Full parameter set for one analysis."""

    A: np.ndarray  # (N, q_data, q) mixing matrices with orthonormal columns
    # (square in a full analysis; rectangular after an IC subset selection)
    sigma0_sq: float  # isotropic first-level noise variance
    D: np.ndarray  # (q,) between-subject variances nu_l^2
    mog: MoGParams
    B: np.ndarray  # (V, p, q) local covariate effects beta(v)

    @property
    def N(self):
        return self.A.shape[0]

    @property
    def q(self):
        return self.A.shape[2]

    @property
    def V(self):
        return self.B.shape[0]

    @property
    def p(self):
        return self.B.shape[1]

    def validate(self, atol=1e-8):
        eye = np.eye(self.q)
        for i in range(self.N):
            if np.max(np.abs(self.A[i].T @ self.A[i] - eye)) > atol:
                raise NumericalError(f"A[{i}] columns not orthonormal within {atol}")
        if not self.sigma0_sq > 0:
            raise NumericalError("sigma0_sq must be positive")
        if np.any(self.D <= 0):
            raise NumericalError("between-subject variances must be positive")
        self.mog.validate(atol)
        if not np.all(np.isfinite(self.B)):
            raise NumericalError("non-finite covariate effects")

    def copy(self):
        return HcicaParams(
            A=self.A.copy(),
            sigma0_sq=float(self.sigma0_sq),
            D=self.D.copy(),
            mog=MoGParams(self.mog.weights.copy(), self.mog.means.copy(), self.mog.variances.copy()),
            B=self.B.copy(),
        )

    def global_vector(self):
        """Concatenated global block, fixed order, for convergence norms."""
        return np.concatenate(
            [
                self.A.ravel(),
                [self.sigma0_sq],
                self.D.ravel(),
                self.mog.weights.ravel(),
                self.mog.means.ravel(),
                self.mog.variances.ravel(),
            ]
        )

    def local_vector(self):
        return self.B.ravel()


@dataclass
class VoxelPosterior:
    """E-step moments. Per-voxel fields are stacked over all voxels.

    All quantities factorize over ICs: state probabilities and the mixture
    moments of s0 are per (voxel, IC, state); subject-source moments are
    marginal over states.
    """

    state_probs: np.ndarray  # (V, q, m)
    s0_mean_by_state: np.ndarray  # (V, q, m) E[s0_l | z_l=j, y]
    s0_var_by_state: np.ndarray  # (V, q, m) Var[s0_l | z_l=j, y]
    s0_mean: np.ndarray  # (V, q) marginal E[s0_l | y]
    s0_second: np.ndarray  # (V, q) marginal E[s0_l^2 | y]
    si_mean: np.ndarray  # (N, V, q) E[s_il | y]
    si_second: np.ndarray  # (N, V, q) E[s_il^2 | y]
    si_s0_cross: np.ndarray  # (N, V, q) E[s_il s0_l | y]

    @property
    def V(self):
        return self.state_probs.shape[0]


@dataclass
class EmConfig:
    max_iterations: int = 100
    eps_global: float = 1e-4
    eps_local: float = 1e-3
    estep_mode: str = "factorized"  # or "exact-enumeration"
    snapshot_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.eps_global <= 0 or self.eps_local <= 0:
            raise ValueError("convergence thresholds must be positive")
        if self.estep_mode not in ("factorized", "exact-enumeration"):
            raise ValueError(f"unknown estep_mode {self.estep_mode!r}")


@dataclass
class EmState:
    iteration: int
    params: HcicaParams
    history: list = field(default_factory=list)  # (delta_global, delta_local) per iteration
    loglik_history: list = field(default_factory=list)
    termination: str = "running"  # converged | max-iterations | user-stop
