"""Simplex geometry: projections, feasible regions, and integer allocation.

Feasible regions describe which final selection ratios remain reachable given
the samples (or budget) already committed.  Commit-phase regions are affine
images of the simplex and project in closed form; cost-weighted regions are
rational images and project by dense grid search plus Nelder-Mead refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from ._neldermead import minimize_box
from .errors import DegenerateObjectiveError
from .variance_engine import check_simplex

# Search box for the (dims-1)-dimensional refinement parametrization; points
# are pushed through simplex_project, so the box only bounds the search.
_REFINE_LO, _REFINE_HI = -2.0, 3.0

COST_GRID_POINTS = 200
LATTICE_STEP_SMALL = 0.02   # dims <= 3
LATTICE_STEP_LARGE = 0.05   # dims 4-5


def simplex_project(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the standard simplex (sorting algorithm)."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size < 2:
        raise ValueError("need a vector of length >= 2")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


@dataclass(frozen=True)
class FeasibleRegion:
    """Reachable final ratios, parametrized by the free allocation κ.

    kind 'etc':        e·base + (1−e)·κ
    kind 'round':      (j·base + κ)/(j+1)
    kind 'cost_etc':   [e(κᵀc)·base + (1−e)(baseᵀc)·κ] / [e(κᵀc) + (1−e)(baseᵀc)]
    kind 'cost_round': [j(κᵀc)·base + (baseᵀc)·κ] / [j(κᵀc) + (baseᵀc)]

    `rounds` may be fractional for cost kinds: it is the committed spend
    divided by the next chunk's budget.
    """

    kind: str
    base: np.ndarray
    fraction: float = math.nan  # e, for etc kinds
    rounds: float = math.nan    # j, for round kinds
    costs: np.ndarray | None = None

    @classmethod
    def etc(cls, e: float, kappa_explore: np.ndarray) -> "FeasibleRegion":
        if not 0 < e < 1:
            raise ValueError("exploration fraction must be in (0, 1)")
        return cls("etc", check_simplex(kappa_explore), fraction=e)

    @classmethod
    def round_(cls, j: float, kappa_current: np.ndarray) -> "FeasibleRegion":
        if not j > 0:
            raise ValueError("round count must be positive")
        return cls("round", check_simplex(kappa_current), rounds=j)

    @classmethod
    def cost_etc(cls, e: float, kappa_explore: np.ndarray, costs: np.ndarray) -> "FeasibleRegion":
        if not 0 < e < 1:
            raise ValueError("exploration fraction must be in (0, 1)")
        return cls("cost_etc", check_simplex(kappa_explore), fraction=e,
                   costs=np.asarray(costs, dtype=float))

    @classmethod
    def cost_round(cls, j: float, kappa_current: np.ndarray, costs: np.ndarray) -> "FeasibleRegion":
        if not j > 0:
            raise ValueError("round count must be positive")
        return cls("cost_round", check_simplex(kappa_current), rounds=j,
                   costs=np.asarray(costs, dtype=float))

    def member(self, kappa: np.ndarray) -> np.ndarray:
        """Image of a free allocation κ: the realized final ratio."""
        kappa = np.asarray(kappa, dtype=float)
        if self.kind == "etc":
            return self.fraction * self.base + (1.0 - self.fraction) * kappa
        if self.kind == "round":
            return (self.rounds * self.base + kappa) / (self.rounds + 1.0)
        c = self.costs
        if self.kind == "cost_etc":
            a = self.fraction * (kappa @ c)
            b = (1.0 - self.fraction) * (self.base @ c)
        else:  # cost_round
            a = self.rounds * (kappa @ c)
            b = self.base @ c
        return (a * self.base + b * kappa) / (a + b)

    def member_grid(self, kappas: np.ndarray) -> np.ndarray:
        """Vectorized member() over rows of `kappas`."""
        if self.kind == "etc":
            return self.fraction * self.base + (1.0 - self.fraction) * kappas
        if self.kind == "round":
            return (self.rounds * self.base + kappas) / (self.rounds + 1.0)
        c = self.costs
        scale = self.fraction if self.kind == "cost_etc" else self.rounds
        a = scale * (kappas @ c)
        if self.kind == "cost_etc":
            b = (1.0 - self.fraction) * float(self.base @ c)
        else:
            b = float(self.base @ c)
        return (a[:, None] * self.base + b * kappas) / (a + b)[:, None]


def simplex_lattice(dims: int, step: float) -> np.ndarray:
    """All simplex points whose coordinates are multiples of `step`."""
    levels = int(round(1.0 / step))
    pts = []
    # stars and bars over `levels` units in `dims` cells
    for cuts in combinations(range(levels + dims - 1), dims - 1):
        prev, parts = -1, []
        for c in cuts:
            parts.append(c - prev - 1)
            prev = c
        parts.append(levels + dims - 2 - prev)
        pts.append(parts)
    return np.asarray(pts, dtype=float) / levels


def project_to_region(target: np.ndarray, region: FeasibleRegion) -> np.ndarray:
    """Member of the region closest to `target` in Euclidean norm."""
    target = np.asarray(target, dtype=float)
    kind = region.kind
    if kind.startswith("cost") and region.costs is not None and np.ptp(region.costs) == 0:
        # equal costs collapse the rational image to the affine one exactly
        kind = "etc" if kind == "cost_etc" else "round"
    if kind in ("etc", "round"):
        if kind == "etc":
            offset = region.fraction * region.base
            scale = 1.0 - region.fraction
        else:
            offset = region.rounds * region.base / (region.rounds + 1.0)
            scale = 1.0 / (region.rounds + 1.0)
        pre = simplex_project((target - offset) / scale)
        return offset + scale * pre

    grid = simplex_lattice(region.base.size, 1.0 / (COST_GRID_POINTS - 1))
    images = region.member_grid(grid)
    dist = np.linalg.norm(images - target, axis=1)
    best = int(np.argmin(dist))
    pre0 = grid[best]

    def objective(u: np.ndarray) -> float:
        kappa = simplex_project(np.append(u, 1.0 - u.sum()))
        return float(np.sum((region.member(kappa) - target) ** 2))

    k = region.base.size
    x, fx, _, _ = minimize_box(objective, pre0[:-1],
                               np.full(k - 1, _REFINE_LO), np.full(k - 1, _REFINE_HI),
                               fatol=1e-16, xatol=1e-10, maxiter=2000)
    if fx <= dist[best] ** 2:
        return region.member(simplex_project(np.append(x, 1.0 - x.sum())))
    return region.member(pre0)


def minimize_over_simplex(objective, dims: int) -> np.ndarray:
    """argmin of a (possibly +inf valued) objective over the simplex.

    Coarse lattice scan, then Nelder-Mead refinement of the five best lattice
    points in the (dims-1)-dimensional parametrization with projection.
    Deterministic: ties resolve to the first lattice point in generation order.
    """
    step = LATTICE_STEP_SMALL if dims <= 3 else LATTICE_STEP_LARGE
    lattice = simplex_lattice(dims, step)
    refine_xatol = 1e-7  # allocation granularity is far coarser than this
    batch = getattr(objective, "batch", None)
    with np.errstate(all="ignore"):
        if batch is not None:
            values = np.asarray(batch(lattice), dtype=float)
        else:
            values = np.array([objective(k) for k in lattice])
    values = np.where(np.isnan(values), np.inf, values)
    if not np.any(np.isfinite(values)):
        raise DegenerateObjectiveError("objective is +inf on the whole simplex")

    order = np.argsort(values, kind="stable")[:5]
    best_kappa = lattice[order[0]]
    best_value = float(values[order[0]])

    def param_objective(u: np.ndarray) -> float:
        kappa = simplex_project(np.append(u, 1.0 - u.sum()))
        v = objective(kappa)
        return v if math.isfinite(v) else math.inf

    with np.errstate(all="ignore"):
        for i in order:
            if not np.isfinite(values[i]):
                continue
            x, val, _, _ = minimize_box(param_objective, lattice[i][:-1],
                                        np.full(dims - 1, _REFINE_LO),
                                        np.full(dims - 1, _REFINE_HI),
                                        fatol=1e-14, xatol=refine_xatol,
                                        maxiter=400 * dims)
            if val < best_value:
                best_value = val
                best_kappa = simplex_project(np.append(x, 1.0 - x.sum()))
    return best_kappa


def integer_allocate(target: np.ndarray, counts_so_far: np.ndarray, n_new: int) -> np.ndarray:
    """Split `n_new` queries so the running ratio lands l-inf closest to target.

    Among optimal allocations, surplus goes to the lowest source index
    (lexicographically largest allocation), keeping replay deterministic.
    """
    target = check_simplex(target)
    counts = np.asarray(counts_so_far, dtype=np.int64)
    if np.any(counts < 0):
        raise ValueError("counts_so_far must be nonnegative")
    if n_new < 1:
        raise ValueError("n_new must be >= 1")
    k = target.size
    total = counts.sum() + n_new
    desired = target * total - counts  # ideal (possibly negative) new counts

    def bounds(t: float):
        lb = np.maximum(0, np.ceil(desired - t - 1e-12).astype(np.int64))
        ub = np.floor(desired + t + 1e-12).astype(np.int64)
        return lb, ub

    def feasible(t: float) -> bool:
        lb, ub = bounds(t)
        return bool(np.all(ub >= lb) and np.all(ub >= 0) and lb.sum() <= n_new <= ub.sum())

    # The optimal radius is always |m - desired_i| for some coordinate i and
    # integer m in [0, n_new]; feasibility in t is monotone, so binary search.
    marks = np.arange(n_new + 1, dtype=float)
    ts = np.unique(np.abs(marks[None, :] - desired[:, None]).ravel())
    lo_i, hi_i = 0, len(ts) - 1
    if not feasible(ts[hi_i]):
        raise AssertionError("integer allocation feasibility violated")
    while lo_i < hi_i:
        mid = (lo_i + hi_i) // 2
        if feasible(ts[mid]):
            hi_i = mid
        else:
            lo_i = mid + 1
    lb, ub = bounds(ts[lo_i])

    out = np.zeros(k, dtype=np.int64)
    remaining = n_new
    for i in range(k):
        tail_min = lb[i + 1:].sum()
        out[i] = min(ub[i], remaining - tail_min)
        out[i] = max(out[i], lb[i])
        remaining -= out[i]
    return out
