"""Asymptotic covariance of the GMM estimator under a candidate selection ratio.

From per-moment plug-in estimates of G = E[∂g̃/∂θ] and Ω = E[g̃ g̃ᵀ], the
covariance under ratio κ is Σ = [G*ᵀ Ω*⁻¹ G*]⁻¹ with G* row-scaled by
m̄(κ) = Σ_i κ_i m(i) and Ω* entry-scaled by m*_Ω(κ) = Σ_i κ_i m(i) m(i)ᵀ,
restricted to the moments κ actually activates.  The target variance is the
quadratic form of Σ with the target functional's gradient; configurations
whose active moments cannot identify θ map to +inf instead of raising, so a
simplex search can discard them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._linalg import symmetrize
from .gmm_engine import EstimationData
from .moment_model import History, MomentModel

ACTIVE_TOL = 1e-12
RANK_TOL = 1e-10


@dataclass(frozen=True)
class PluginMatrices:
    """Per-moment plug-in G and Ω with the observation counts behind each entry.

    Entries with zero support are flagged by the support arrays (and carry
    NaN), never silently zeroed.
    """

    g_hat: np.ndarray          # (M, D), support-normalized
    omega_hat: np.ndarray      # (M, M), NaN where never co-observed
    g_support: np.ndarray      # (M,)
    omega_support: np.ndarray  # (M, M)


def check_simplex(kappa: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    kappa = np.asarray(kappa, dtype=float)
    if kappa.ndim != 1 or kappa.size < 2:
        raise ValueError("selection ratio must be a vector of length >= 2")
    if np.any(kappa < -tol) or abs(kappa.sum() - 1.0) > max(tol, 1e-12 * kappa.size):
        raise ValueError(f"{kappa} is not on the probability simplex")
    return np.clip(kappa, 0.0, None)


def plugin_matrices(history: History, model: MomentModel, theta: np.ndarray) -> PluginMatrices:
    """Estimate G and Ω per moment from exactly the records that observed it."""
    theta = model.check_theta(theta)
    data = EstimationData(history, model)
    m, d = model.n_moments, model.n_params

    g_acc = np.zeros((m, d))
    omega_acc = np.zeros((m, m))
    omega_support = np.zeros((m, m), dtype=np.int64)
    for i, arrays in data.blocks.items():
        rows = data.block_rows[i]
        n_i = data.counts[i]
        jac = model.jacobian_block(rows, arrays, theta)
        g_acc[rows] += jac.sum(axis=0)
        vals = model.row_block(rows, arrays, theta)
        omega_acc[np.ix_(rows, rows)] += vals.T @ vals
        omega_support[np.ix_(rows, rows)] += n_i

    g_support = data.moment_support
    with np.errstate(invalid="ignore", divide="ignore"):
        g_hat = np.where(g_support[:, None] > 0, g_acc / np.maximum(g_support, 1)[:, None], np.nan)
        omega_hat = np.where(omega_support > 0, omega_acc / np.maximum(omega_support, 1), np.nan)
    return PluginMatrices(g_hat, symmetrize_nan(omega_hat), g_support, omega_support)


def symmetrize_nan(a: np.ndarray) -> np.ndarray:
    # NaN-tolerant symmetrization: averages where both entries are finite.
    out = 0.5 * (a + a.T)
    mask = np.isnan(a) & ~np.isnan(a.T)
    out[mask] = a.T[mask]
    mask = ~np.isnan(a) & np.isnan(a.T)
    out[mask] = a[mask]
    return out


def exact_matrices(g: np.ndarray, omega: np.ndarray) -> PluginMatrices:
    """Wrap analytically computed G and Ω as fully supported plug-ins."""
    g = np.asarray(g, dtype=float)
    omega = np.asarray(omega, dtype=float)
    m = omega.shape[0]
    big = np.iinfo(np.int64).max
    return PluginMatrices(g, symmetrize(omega), np.full(m, big), np.full((m, m), big))


class SandwichEvaluator:
    """Σ(·, κ) from fixed plug-in matrices, with κ-independent work hoisted."""

    def __init__(self, pm: PluginMatrices, model: MomentModel):
        self.pm = pm
        self.n_params = model.n_params
        self.masks = model.mask_matrix
        # stack of m(i) m(i)ᵀ outer products, contracted with κ per evaluation
        self.outer_stack = self.masks[:, :, None] * self.masks[:, None, :]
        self._outer_flat = self.outer_stack.reshape(len(self.masks), -1)
        self.g_unsupported = pm.g_support == 0
        self.omega_filled = np.where(pm.omega_support > 0, np.nan_to_num(pm.omega_hat), 0.0)
        self.omega_unsupported = pm.omega_support == 0
        self.any_unsupported = bool(self.g_unsupported.any() or self.omega_unsupported.any())

    def eig(self, kappa: np.ndarray):
        """Eigendecomposition of G*ᵀ Ω*⁻¹ G* on the active moments, or None."""
        mbar = self.masks.T @ kappa
        active = mbar > ACTIVE_TOL
        if not active.all():
            return self._eig_restricted(kappa, mbar, active)
        m = mbar.size
        scale = (kappa @ self._outer_flat).reshape(m, m)
        if self.any_unsupported:
            if np.any(self.g_unsupported):
                return None
            if np.any((scale > 0) & self.omega_unsupported):
                return None
        omega_star = self.omega_filled * scale
        g_star = self.pm.g_hat * mbar[:, None]
        return self._finish(omega_star, g_star)

    def _eig_restricted(self, kappa, mbar, active):
        if int(active.sum()) < self.n_params:
            return None
        if np.any(self.g_unsupported[active]):
            return None
        sub = np.ix_(active, active)
        scale = np.tensordot(kappa, self.outer_stack, axes=1)[sub]
        needed = scale > 0
        # Pairs with disjoint source support always have m*_Ω = 0, so flagged
        # entries cannot leak into a finite result.
        if np.any(needed & self.omega_unsupported[sub]):
            return None
        omega_star = self.omega_filled[sub] * scale
        g_star = self.pm.g_hat[active] * mbar[active, None]
        return self._finish(omega_star, g_star)

    def _finish(self, omega_star, g_star):
        # omega_star is symmetric by construction; invert in pinv semantics
        w, v = np.linalg.eigh(omega_star)
        cutoff = 1e-12 * max(float(w[-1]), 1.0)
        inv_w = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
        half = g_star.T @ v
        sandwich = (half * inv_w) @ half.T
        w2, v2 = np.linalg.eigh(0.5 * (sandwich + sandwich.T))
        if w2[0] <= RANK_TOL * max(float(w2.sum()), 1e-300):
            return None
        return w2, v2

    def sigma(self, kappa: np.ndarray) -> np.ndarray | None:
        decomposed = self.eig(check_simplex(kappa))
        if decomposed is None:
            return None
        w, v = decomposed
        return symmetrize((v / w) @ v.T)


class VarianceObjective:
    """κ ↦ V(θ, κ) (optionally times κᵀc) for fast simplex sweeps."""

    def __init__(self, pm: PluginMatrices, model: MomentModel, theta: np.ndarray,
                 costs: np.ndarray | None = None):
        self._sandwich = SandwichEvaluator(pm, model)
        self.grad = np.asarray(model.grad_f_tar(np.asarray(theta, dtype=float)), dtype=float)
        self.costs = None if costs is None else np.asarray(costs, dtype=float)
        if self.costs is not None and np.any(self.costs <= 0):
            raise ValueError("costs must be strictly positive")

    def __call__(self, kappa: np.ndarray) -> float:
        kappa = np.asarray(kappa, dtype=float)
        if kappa.min() < -1e-9 or abs(kappa.sum() - 1.0) > 1e-9:
            raise ValueError(f"{kappa} is not on the probability simplex")
        decomposed = self._sandwich.eig(kappa)
        if decomposed is None:
            return math.inf
        w, v = decomposed
        proj = v.T @ self.grad
        value = float(np.sum(proj * proj / w))
        if self.costs is not None:
            value *= float(kappa @ self.costs)
        return max(value, 0.0)

    def batch(self, kappas: np.ndarray) -> np.ndarray:
        """Evaluate a whole lattice at once via stacked eigendecompositions.

        Points that deactivate moments or touch unsupported plug-in entries
        take the scalar path; the (typical) full-support interior points are
        handled in two batched eigh calls.
        """
        kappas = np.asarray(kappas, dtype=float)
        sw = self._sandwich
        out = np.full(len(kappas), math.inf)
        mbar_all = kappas @ sw.masks
        interior = np.all(mbar_all > ACTIVE_TOL, axis=1)
        if np.any(sw.g_unsupported) or np.any(sw.omega_unsupported):
            interior = np.zeros(len(kappas), dtype=bool)  # play safe, scalar path
        for i in np.nonzero(~interior)[0]:
            out[i] = self(kappas[i])
        if not np.any(interior):
            return out
        idx = np.nonzero(interior)[0]
        scale = np.tensordot(kappas[idx], sw.outer_stack, axes=1)
        omega_star = sw.omega_filled[None, :, :] * scale
        w, v = np.linalg.eigh(0.5 * (omega_star + omega_star.transpose(0, 2, 1)))
        cutoff = 1e-12 * np.maximum(w[:, -1], 1.0)[:, None]
        inv_w = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
        omega_inv = (v * inv_w[:, None, :]) @ v.transpose(0, 2, 1)
        g_star = sw.pm.g_hat[None, :, :] * mbar_all[idx][:, :, None]
        sandwich = g_star.transpose(0, 2, 1) @ omega_inv @ g_star
        sandwich = 0.5 * (sandwich + sandwich.transpose(0, 2, 1))
        w2, v2 = np.linalg.eigh(sandwich)
        proj = np.einsum("lde,d->le", v2, self.grad)
        with np.errstate(invalid="ignore", divide="ignore"):
            vals = np.sum(proj * proj / w2, axis=1)
        deficient = w2[:, 0] <= RANK_TOL * np.maximum(w2.sum(axis=1), 1e-300)
        vals = np.where(deficient, math.inf, np.maximum(vals, 0.0))
        if self.costs is not None:
            vals = vals * (kappas[idx] @ self.costs)
        out[idx] = vals
        return out


def asymptotic_sigma(pm: PluginMatrices, model: MomentModel,
                     kappa: np.ndarray) -> np.ndarray | None:
    """Σ(θ, κ), or None when the active moments cannot identify θ (+inf marker)."""
    return SandwichEvaluator(pm, model).sigma(kappa)


def target_variance(pm: PluginMatrices, model: MomentModel, theta: np.ndarray,
                    kappa: np.ndarray) -> float:
    """V(θ, κ) = ∇f_tarᵀ Σ ∇f_tar; +inf when Σ is unavailable."""
    return VarianceObjective(pm, model, theta)(kappa)


def budgeted_objective(pm: PluginMatrices, model: MomentModel, theta: np.ndarray,
                       kappa: np.ndarray, costs: np.ndarray) -> float:
    """V(θ, κ) · (κᵀc): the per-budget variance under a cost structure."""
    return VarianceObjective(pm, model, theta, costs=costs)(kappa)
