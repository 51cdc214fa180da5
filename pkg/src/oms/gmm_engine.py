"""Two-step GMM estimation from an adaptively collected history.

The empirical objective is Q(θ) = ḡ(θ)ᵀ W ḡ(θ) with ḡ the masked moment
mean over all records.  Estimation compresses the history into per-source
sufficient statistics once, then minimizes with Nelder-Mead under the
parameter box, restarting from the box center, a warm start when available,
and a seeded uniform draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._linalg import floored_inverse, symmetrize
from ._neldermead import minimize_box
from .errors import ConfigError, StateError, UnderIdentifiedError
from .moment_model import History, MomentModel

NM_MAX_ITER = 2000
NM_FATOL = 1e-12
NM_XATOL = 1e-9


@dataclass(frozen=True)
class WeightSpec:
    """GMM weight matrix choice for the second step."""

    kind: str  # identity | efficient | regularized | fixed
    lam: float = 0.01
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "efficient", "regularized", "fixed"):
            raise ConfigError(f"unknown weight kind {self.kind!r}")
        if self.kind == "regularized" and not self.lam > 0:
            raise ConfigError("regularized weight needs lam > 0")
        if self.kind == "fixed":
            w = self.matrix
            if w is None or not np.allclose(w, w.T, atol=1e-10):
                raise ConfigError("fixed weight must be a symmetric matrix")
            if np.linalg.eigvalsh(symmetrize(w)).min() < -1e-10:
                raise ConfigError("fixed weight must be PSD")

    @classmethod
    def identity(cls) -> "WeightSpec":
        return cls("identity")

    @classmethod
    def efficient(cls) -> "WeightSpec":
        return cls("efficient")

    @classmethod
    def regularized(cls, lam: float = 0.01) -> "WeightSpec":
        return cls("regularized", lam=lam)

    @classmethod
    def fixed(cls, matrix: np.ndarray) -> "WeightSpec":
        return cls("fixed", matrix=np.asarray(matrix, dtype=float))


@dataclass
class OptimizerReport:
    iterations: int
    converged: bool
    restarts_used: int


@dataclass
class GmmEstimate:
    theta_hat: np.ndarray
    objective: float
    weight_used: np.ndarray
    optimizer_report: OptimizerReport
    theta_onestep: np.ndarray | None = None


class EstimationData:
    """History compiled to per-source blocks in a canonical record order.

    Records within each source are sorted lexicographically by value, which
    makes every downstream quantity invariant to the order the records were
    collected in.
    """

    def __init__(self, history: History, model: MomentModel):
        if len(history) == 0:
            raise StateError("empty history")
        self.model = model
        self.total = len(history)
        self.counts = history.counts
        self.blocks: dict[int, dict[str, np.ndarray]] = {}
        self.block_rows: dict[int, np.ndarray] = {}
        m, p = model.n_moments, model.n_basis

        stat = np.zeros((m, p))
        for i in range(len(model.sources)):
            if self.counts[i] == 0:
                continue
            cols = history.source_columns(i)
            names = sorted(cols)
            order = np.lexsort(tuple(cols[v] for v in reversed(names)))
            arrays = {v: cols[v][order] for v in names}
            rows = np.nonzero(model.mask_matrix[i])[0]
            self.blocks[i] = arrays
            self.block_rows[i] = rows
            s_i = model.row_stats(rows, arrays)
            stat[rows] += (self.counts[i] / self.total) * s_i
        self.stat_matrix = stat  # gbar(theta) = stat_matrix @ phi(theta)

        support = (model.mask_matrix * self.counts[:, None]).sum(axis=0)
        self.moment_support = support.astype(np.int64)

    def gbar(self, theta: np.ndarray) -> np.ndarray:
        return self.stat_matrix @ self.model.phi(theta)

    def objective(self, theta: np.ndarray, weight: np.ndarray) -> float:
        # callers wrap minimization in np.errstate; non-finite maps to +inf
        g = self.gbar(theta)
        val = float(g @ weight @ g)
        return val if math.isfinite(val) else math.inf

    def omega(self, theta: np.ndarray) -> np.ndarray:
        """Ω̂(θ) = (1/T) Σ_t g_t g_tᵀ accumulated per source block."""
        m = self.model.n_moments
        out = np.zeros((m, m))
        for i, arrays in self.blocks.items():
            rows = self.block_rows[i]
            vals = self.model.row_block(rows, arrays, theta)  # (n, r)
            out[np.ix_(rows, rows)] += vals.T @ vals
        return symmetrize(out / self.total)

    def mean_jacobian(self, theta: np.ndarray) -> np.ndarray:
        """Support-normalized mean Jacobian per moment row (plug-in Ĝ)."""
        m, d = self.model.n_moments, self.model.n_params
        acc = np.zeros((m, d))
        for i, arrays in self.blocks.items():
            rows = self.block_rows[i]
            jac = self.model.jacobian_block(rows, arrays, theta)  # (n, r, D)
            acc[rows] += jac.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = acc / np.maximum(self.moment_support, 1)[:, None]
        return out


def empirical_objective(history: History, model: MomentModel, theta: np.ndarray,
                        weight: np.ndarray) -> float:
    """ḡᵀ W ḡ with ḡ the masked moment mean over the whole history."""
    if len(history) == 0:
        raise StateError("empty history")
    theta = model.check_theta(theta)
    weight = np.asarray(weight, dtype=float)
    total = len(history)
    gbar = np.zeros(model.n_moments)
    counts = history.counts
    for i in range(len(model.sources)):
        if counts[i] == 0:
            continue
        rows = np.nonzero(model.mask_matrix[i])[0]
        vals = model.row_block(rows, history.source_columns(i), theta)
        gbar[rows] += vals.sum(axis=0) / total
    return max(float(gbar @ weight @ gbar), 0.0)


def estimate_omega(history: History, model: MomentModel, theta: np.ndarray) -> np.ndarray:
    """Second-moment matrix of the masked moments, (1/T) Σ g_t g_tᵀ."""
    theta = model.check_theta(theta)
    return EstimationData(history, model).omega(theta)


def _nm_minimize(objective, x0: np.ndarray, box: np.ndarray):
    return minimize_box(objective, x0, box[:, 0], box[:, 1],
                        fatol=NM_FATOL, xatol=NM_XATOL, maxiter=NM_MAX_ITER)


def _finite_start(objective, x0: np.ndarray, box: np.ndarray) -> np.ndarray | None:
    """Nudge a start point off singular spots (e.g. 1/θ_i at the box center)."""
    if np.isfinite(objective(x0)):
        return x0
    span = box[:, 1] - box[:, 0]
    for k in range(1, 21):
        cand = np.clip(x0 + (0.02 * k) * span, box[:, 0], box[:, 1])
        if np.isfinite(objective(cand)):
            return cand
    return None


def _minimize_multistart(objective, starts, box: np.ndarray, rng: np.random.Generator):
    attempts = list(starts) + [rng.uniform(box[:, 0], box[:, 1])]
    best_x, best_f = None, np.inf
    iters, converged, used = 0, False, 0
    with np.errstate(all="ignore"):
        for raw in attempts:
            x0 = _finite_start(objective, np.asarray(raw, dtype=float), box)
            if x0 is None:
                continue
            used += 1
            x, f, nit, ok = _nm_minimize(objective, x0, box)
            iters += nit
            converged = converged or ok
            if f < best_f or best_x is None:
                best_x, best_f = x, f
    if best_x is None:
        raise UnderIdentifiedError("objective non-finite at every start point")
    return best_x, best_f, iters, converged, used


def _efficient_weight(omega: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Invert the block of moments observed at least twice; zero elsewhere."""
    m = omega.shape[0]
    keep = np.nonzero(support >= 2)[0]
    weight = np.zeros((m, m))
    if keep.size:
        sub = omega[np.ix_(keep, keep)]
        weight[np.ix_(keep, keep)] = floored_inverse(sub)
    return weight


def resolve_weight(spec: WeightSpec, omega: np.ndarray | None,
                   support: np.ndarray | None, n_moments: int) -> np.ndarray:
    if spec.kind == "identity":
        return np.eye(n_moments)
    if spec.kind == "fixed":
        return spec.matrix
    if omega is None:
        raise StateError("efficient/regularized weights need an omega estimate")
    if spec.kind == "regularized":
        return floored_inverse(omega + spec.lam * np.eye(n_moments))
    return _efficient_weight(omega, support)


def estimate(history: History, model: MomentModel, spec: WeightSpec,
             rng_seed: int, warm_start: np.ndarray | None = None) -> GmmEstimate:
    """Two-step GMM estimate over the history.

    Identity weights use a single minimization pass; efficient/regularized
    weights first compute the one-step estimate under W = I, then re-minimize
    under the inverted (or regularized) second-moment matrix.  Never-observed
    moment rows contribute nothing; under-identification is detected from the
    rank of the observed-moment Jacobian at the returned point.
    """
    data = EstimationData(history, model)
    m, d = model.n_moments, model.n_params
    if spec.kind in ("efficient", "regularized") and data.total < d + 1:
        raise ConfigError(
            f"{spec.kind} weight needs at least D+1={d + 1} records, have {data.total}"
        )
    box = model.theta_box
    center = box.mean(axis=1)
    rng = np.random.default_rng(rng_seed)

    identity = np.eye(m)
    starts = [center]
    if warm_start is not None:
        starts.append(np.clip(warm_start, box[:, 0], box[:, 1]))
    obj1 = lambda th: data.objective(th, identity)
    theta_os, f_os, it1, conv1, used1 = _minimize_multistart(obj1, starts, box, rng)

    if spec.kind == "identity":
        theta_hat, f_hat = theta_os, f_os
        weight = identity
        iters, converged, used = it1, conv1, used1
        theta_onestep = None
    else:
        if spec.kind == "fixed":
            weight = spec.matrix
        else:
            omega = data.omega(theta_os)
            weight = resolve_weight(spec, omega, data.moment_support, m)
        obj2 = lambda th: data.objective(th, weight)
        starts2 = [center, theta_os]
        if warm_start is not None:
            starts2.append(np.clip(warm_start, box[:, 0], box[:, 1]))
        theta_hat, f_hat, it2, conv2, used2 = _minimize_multistart(obj2, starts2, box, rng)
        iters, converged, used = it1 + it2, conv1 and conv2, max(used1, used2)
        theta_onestep = theta_os

    observed = np.nonzero(data.moment_support > 0)[0]
    g_hat = data.mean_jacobian(theta_hat)[observed]
    if np.linalg.matrix_rank(g_hat) < d:
        raise UnderIdentifiedError(
            f"observed moments (rows {observed.tolist()}) have Jacobian rank "
            f"{np.linalg.matrix_rank(g_hat)} < D={d}"
        )

    return GmmEstimate(
        theta_hat=theta_hat,
        objective=max(float(data.objective(theta_hat, weight)), 0.0),
        weight_used=weight,
        optimizer_report=OptimizerReport(iters, converged, used),
        theta_onestep=theta_onestep,
    )
