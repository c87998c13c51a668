"""Sparse solutions of ``X w = y`` for design matrices with an intercept column.

Two solvers share one contract: regularized orthogonal matching pursuit
(:func:`romp_solve`) and an alternating-direction method for the L1
problem ``min ||w||_1  s.t.  ||X w - y|| <= delta`` (:func:`l1_admm_solve`).

Both standardize the voxel columns (zero mean, unit variance) and centre
``y`` before solving, then map the coefficients back to the raw columns.
The intercept is therefore fitted in closed form as
``mean(y) - mean(X_voxels) @ w`` and never competes with voxel atoms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

__all__ = [
    "SolverConfig", "SparseWeights", "LstsqResult", "DesignMatrixError",
    "design_matrix", "check_design_matrix", "least_squares_on_support",
    "romp_solve", "l1_admm_solve", "solve", "DECODER_CONFIG",
]

PRUNE_REL = 1e-10
_ADAPT_EVERY = 10


class DesignMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters shared by both solvers.

    ``delta`` is the noise allowance relative to ``||y - mean(y)||``; zero
    means the equality-constrained problem. ``residual_tol`` is relative to
    the same norm.
    """

    solver: str = "romp"
    sparsity_k: int = 32
    residual_tol: float = 1e-9
    max_iterations: int = 20000
    rho: float = 1.0
    delta: float = 0.0
    standardize: bool = True

    def __post_init__(self):
        if self.solver not in ("romp", "l1_admm"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.sparsity_k < 1:
            raise ValueError("sparsity_k must be >= 1")
        if self.residual_tol <= 0 or self.rho <= 0:
            raise ValueError("residual_tol and rho must be > 0")
        if self.delta < 0 or self.max_iterations < 1:
            raise ValueError("delta must be >= 0 and max_iterations >= 1")


DECODER_CONFIG = SolverConfig(solver="romp", sparsity_k=32, residual_tol=1e-6, delta=0.05)


@dataclass(frozen=True)
class SparseWeights:
    """Sparse coefficient vector of length ``dim`` (voxels plus intercept)."""

    dim: int
    indices: np.ndarray
    coefficients: np.ndarray
    converged: bool = True
    iterations: int = 0
    rank_deficient: bool = False

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        coef = np.asarray(self.coefficients, dtype=np.float64)
        if idx.shape != coef.shape or idx.ndim != 1:
            raise ValueError("indices and coefficients must be 1-D and equally long")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dim):
            raise ValueError("indices must be strictly increasing within [0, dim)")
        if np.any(coef == 0) or not np.all(np.isfinite(coef)):
            raise ValueError("coefficients must be nonzero and finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "coefficients", coef)

    @classmethod
    def from_dense(cls, w, prune_rel: float = 0.0, **meta) -> "SparseWeights":
        w = np.asarray(w, dtype=np.float64)
        thresh = prune_rel * np.max(np.abs(w)) if w.size else 0.0
        idx = np.flatnonzero(np.abs(w) > thresh)
        return cls(w.size, idx, w[idx], **meta)

    @property
    def support_size(self) -> int:
        return int(self.indices.size)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), float(c)) for i, c in zip(self.indices, self.coefficients)]

    @property
    def intercept(self) -> float:
        if self.indices.size and self.indices[-1] == self.dim - 1:
            return float(self.coefficients[-1])
        return 0.0

    @property
    def voxel_support(self) -> np.ndarray:
        return self.indices[self.indices < self.dim - 1]

    def to_dense(self) -> np.ndarray:
        w = np.zeros(self.dim)
        w[self.indices] = self.coefficients
        return w

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X[..., self.indices] @ self.coefficients


def design_matrix(voxels) -> np.ndarray:
    """Append the intercept column of ones to an ``m x n`` response matrix."""
    voxels = np.atleast_2d(np.asarray(voxels, dtype=np.float64))
    return np.hstack([voxels, np.ones((voxels.shape[0], 1))])


def check_design_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 2:
        raise DesignMatrixError(f"design matrix must be m x (n+1) with m, n >= 1, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DesignMatrixError("design matrix contains non-finite values")
    if not np.all(X[:, -1] == 1.0):
        raise DesignMatrixError("last column of the design matrix must be all ones")
    return X


def _check_target(X, y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise DesignMatrixError(f"target length {y.shape} does not match {X.shape[0]} rows")
    if not np.all(np.isfinite(y)):
        raise DesignMatrixError("target contains non-finite values")
    return y


class LstsqResult(NamedTuple):
    coef: np.ndarray
    rank_deficient: bool


def least_squares_on_support(X, y, support) -> LstsqResult:
    """Least squares on the columns in ``support`` (minimum norm if rank deficient)."""
    X = np.asarray(X, dtype=np.float64)
    support = np.asarray(support, dtype=np.int64)
    if support.size == 0:
        return LstsqResult(np.zeros(0), False)
    if support.min() < 0 or support.max() >= X.shape[1]:
        raise IndexError("support index out of range")
    A = X[:, support]
    coef, _, rank, _ = scipy.linalg.lstsq(A, y, lapack_driver="gelsd")
    return LstsqResult(coef, rank < support.size)


class _Standardized(NamedTuple):
    Z: np.ndarray
    mu: np.ndarray
    sd: np.ndarray
    y_mean: float
    yc: np.ndarray


def _standardize(X, y, standardize: bool) -> _Standardized:
    A = X[:, :-1]
    mu = A.mean(axis=0) if standardize else np.zeros(A.shape[1])
    sd = A.std(axis=0) if standardize else np.ones(A.shape[1])
    live = sd > 0
    Z = np.zeros_like(A)
    Z[:, live] = (A[:, live] - mu[live]) / sd[live]
    sd = np.where(live, sd, 1.0)
    if standardize:
        y_mean = float(y.mean())
        return _Standardized(Z, mu, sd, y_mean, y - y_mean)
    return _Standardized(np.hstack([Z, X[:, -1:]]), mu, sd, 0.0, y)


def _unscale(st: _Standardized, coef_z: np.ndarray, standardize: bool, prune_rel: float,
             intercept_rel: float = PRUNE_REL, **meta):
    n = st.mu.size
    full = np.zeros(n + 1)
    if standardize:
        w = coef_z / st.sd
        if w.size and np.max(np.abs(w)) > 0:
            w[np.abs(w) <= prune_rel * np.max(np.abs(w))] = 0.0
        full[:n] = w
        b = st.y_mean - float(st.mu @ w)
        scale = max(np.max(np.abs(w)) if w.size else 0.0, abs(st.y_mean))
        full[n] = 0.0 if abs(b) <= intercept_rel * scale else b
        return SparseWeights.from_dense(full, **meta)
    return SparseWeights.from_dense(coef_z, prune_rel=prune_rel, **meta)


def _regularize(mags: np.ndarray) -> np.ndarray:
    """Positions (into descending ``mags``) of the comparable-magnitude run of maximal energy."""
    best, best_energy = (0, 1), -1.0
    energy = np.concatenate([[0.0], np.cumsum(mags ** 2)])
    end = 0
    for start in range(mags.size):
        end = max(end, start + 1)
        while end < mags.size and mags[start] <= 2.0 * mags[end]:
            end += 1
        e = energy[end] - energy[start]
        if e > best_energy:
            best, best_energy = (start, end), e
    return np.arange(*best)


def romp_solve(X, y, cfg: SolverConfig = SolverConfig(), history: list | None = None) -> SparseWeights:
    """Regularized orthogonal matching pursuit.

    Each iteration correlates the residual with every unused column, keeps
    the ``sparsity_k`` largest magnitudes, adds the run of comparable
    magnitudes (within a factor of two) carrying the most energy, and refits
    by least squares. Stops once ``||r|| <= residual_tol * ||y||``, the
    support reaches ``2 * sparsity_k``, or ``max_iterations`` is spent.
    Support sizes per iteration are appended to ``history`` when given.
    """
    X = check_design_matrix(X)
    y = _check_target(X, y)
    st = _standardize(X, y, cfg.standardize)
    Z, yc = st.Z, st.yc
    k = cfg.sparsity_k
    ynorm = np.linalg.norm(yc)
    coef = np.zeros(0)
    support = np.zeros(0, dtype=np.int64)
    converged = ynorm == 0.0
    rank_def = False
    r = yc.copy()
    it = 0
    while not converged and it < cfg.max_iterations:
        it += 1
        u = Z.T @ r
        u[support] = 0.0
        mags = np.abs(u)
        candidates = np.flatnonzero(mags > 0)
        if candidates.size == 0:
            break
        order = candidates[np.argsort(-mags[candidates], kind="stable")][:k]
        chosen = order[_regularize(mags[order])]
        support = np.sort(np.concatenate([support, chosen]))
        coef, rank_def = least_squares_on_support(Z, yc, support)
        r = yc - Z[:, support] @ coef
        if history is not None:
            history.append(support.size)
        if np.linalg.norm(r) <= cfg.residual_tol * ynorm or support.size >= 2 * k:
            converged = True
    dense = np.zeros(Z.shape[1])
    dense[support] = coef
    if support.size and np.max(np.abs(coef)) > 0:
        keep = support[np.abs(coef) > PRUNE_REL * np.max(np.abs(coef))]
        if keep.size < support.size:
            refit, rank_def = least_squares_on_support(Z, yc, keep)
            dense[:] = 0.0
            dense[keep] = refit
    return _unscale(st, dense, cfg.standardize, 0.0, converged=bool(converged),
                    iterations=it, rank_deficient=bool(rank_def))


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def l1_admm_solve(X, y, cfg: SolverConfig = SolverConfig(solver="l1_admm")) -> SparseWeights:
    """Alternating-direction method for ``min ||w||_1  s.t.  ||X w - y|| <= delta``.

    Splitting: ``w = z`` and ``X w - y = r`` with ``||r|| <= delta``. Each
    sweep solves ``(I + X^T X) w = ...`` (factored once), soft-thresholds
    ``z``, projects ``r`` onto the noise ball and updates the scaled duals.
    The penalty adapts by a factor of two whenever the primal and dual
    residuals differ by more than ten. The soft-thresholded ``z`` is returned,
    with entries below ``1e-10 * max|z|`` pruned.

    ``delta = 0`` with ``y`` outside the range of ``X`` never converges; set
    ``delta > 0`` for noisy targets.
    """
    X = check_design_matrix(X)
    y = _check_target(X, y)
    st = _standardize(X, y, cfg.standardize)
    Z = st.Z
    ynorm = np.linalg.norm(st.yc)
    m, n = Z.shape
    if ynorm == 0.0:
        return _unscale(st, np.zeros(n), cfg.standardize, PRUNE_REL, converged=True, iterations=0)
    b = st.yc / ynorm
    delta = cfg.delta
    tol = cfg.residual_tol

    if m <= n:
        chol = scipy.linalg.cho_factor(np.eye(m) + Z @ Z.T)

        def solve_w(rhs):
            return rhs - Z.T @ scipy.linalg.cho_solve(chol, Z @ rhs)
    else:
        chol = scipy.linalg.cho_factor(np.eye(n) + Z.T @ Z)

        def solve_w(rhs):
            return scipy.linalg.cho_solve(chol, rhs)

    rho = cfg.rho
    z = np.zeros(n)
    r = np.zeros(m)
    u1 = np.zeros(n)
    u2 = np.zeros(m)
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        w = solve_w(z - u1 + Z.T @ (b + r - u2))
        Zw = Z @ w
        z_old, r_old = z, r
        z = _soft(w + u1, 1.0 / rho)
        v = Zw - b + u2
        vn = np.linalg.norm(v)
        r = v if vn <= delta else v * (delta / vn)
        p1 = w - z
        p2 = Zw - b - r
        u1 = u1 + p1
        u2 = u2 + p2
        pri = np.sqrt(p1 @ p1 + p2 @ p2)
        dual = rho * np.linalg.norm((z - z_old) + Z.T @ (r - r_old))
        eps_pri = tol * max(np.linalg.norm(w), np.linalg.norm(z), 1.0)
        eps_dual = tol * rho * max(np.linalg.norm(u1 + Z.T @ u2), 1.0)
        if pri <= eps_pri and dual <= eps_dual:
            converged = True
            break
        if it % _ADAPT_EVERY:
            continue
        if pri > 10.0 * dual:
            rho *= 2.0
            u1 /= 2.0
            u2 /= 2.0
        elif dual > 10.0 * pri:
            rho /= 2.0
            u1 *= 2.0
            u2 *= 2.0
    # the intercept inherits the iterate's error, so it is pruned at the solver tolerance
    return _unscale(st, z * ynorm, cfg.standardize, PRUNE_REL, intercept_rel=max(tol, PRUNE_REL),
                    converged=converged, iterations=it)


def solve(X, y, cfg: SolverConfig) -> SparseWeights:
    if cfg.solver == "romp":
        return romp_solve(X, y, cfg)
    return l1_admm_solve(X, y, cfg)
