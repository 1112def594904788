"""Per-subject dimension reduction and whitening prior to model fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankError


@dataclass
class WhitenedSubject:
    """q x V whitened data plus the spectral quantities that produced it."""

    Y: np.ndarray  # (q, V)
    sigma_sq: float  # residual variance: mean of the T-q trailing eigenvalues
    eigenvalues: np.ndarray  # leading q eigenvalues (per-voxel scale)
    U: np.ndarray  # (T, q) leading left singular vectors


def _fix_signs(U):
    """Largest-magnitude entry of each column made positive (reproducible SVD)."""
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, signs


def reduce_and_whiten(Y_tilde: np.ndarray, q: int, center_axis="rows") -> WhitenedSubject:
    """Project a T x V data matrix to its q leading whitened components.

    Rows are mean-centered, the SVD taken with eigenvalues on the per-voxel
    scale (squared singular values / V), and the retained components scaled
    by (lambda_k - sigma^2)^(-1/2) where sigma^2 is the mean of the T-q
    trailing eigenvalues.

    `center_axis` is "rows" (default: remove each timepoint's spatial mean)
    or "cols" (remove each voxel's temporal mean) for sensitivity checks.
    """
    Y_tilde = np.asarray(Y_tilde, dtype=np.float64)
    T, V = Y_tilde.shape
    if not 1 <= q < T:
        raise RankError(f"q={q} must satisfy 1 <= q < T={T}")

    if center_axis == "rows":
        Yc = Y_tilde - Y_tilde.mean(axis=1, keepdims=True)
    elif center_axis == "cols":
        Yc = Y_tilde - Y_tilde.mean(axis=0, keepdims=True)
    else:
        raise ValueError(f"center_axis must be 'rows' or 'cols', got {center_axis!r}")

    U, s, _ = np.linalg.svd(Yc, full_matrices=False)
    eigenvalues = s**2 / V
    sigma_sq = float(eigenvalues[q:T].mean())
    lead = eigenvalues[:q]
    if np.any(lead <= sigma_sq):
        raise RankError(
            f"degenerate spectrum: retained eigenvalue <= residual variance {sigma_sq:.3e}"
        )
    Uq, _ = _fix_signs(U[:, :q])
    scale = 1.0 / np.sqrt(lead - sigma_sq)
    Y = (scale[:, None] * Uq.T) @ Yc
    return WhitenedSubject(Y=Y, sigma_sq=sigma_sq, eigenvalues=lead, U=Uq)
