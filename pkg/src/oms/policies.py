"""Data-collection policies: fixed/oracle, explore-then-commit, explore-then-greedy,
and their budgeted variants.

Every policy is a deterministic function of (seed, history so far): exploration
is round-robin over sources, interim re-estimation uses the regularized weight,
and the final estimate always uses the efficient two-step weight.  Failures of
an interim estimation (under-identification, optimizer trouble early in an
episode) keep the previous ratio target, which starts at the simplex center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .allocator import FeasibleRegion, integer_allocate, minimize_over_simplex, project_to_region
from .errors import (
    ConfigError,
    DegenerateObjectiveError,
    PoleError,
    UnderIdentifiedError,
)
from .gmm_engine import GmmEstimate, WeightSpec, estimate
from .moment_model import History, MomentModel
from .scm_models import EpisodeSampler, RegisteredModel, exact_moment_matrices
from .variance_engine import VarianceObjective, plugin_matrices

_SEED_STRIDE = 1000003
_FINAL_SEED = 999999


@dataclass(frozen=True)
class PolicyKind:
    """Parsed policy specification."""

    name: str  # fixed | oracle | etc | etg | etc_cs | etg_fs | etg_fb
    fraction: float | None = None
    ratio: tuple[float, ...] | None = None
    label: str = ""

    def __post_init__(self):
        if self.name in ("etc", "etg", "etc_cs", "etg_fs", "etg_fb"):
            if self.fraction is None or not 0 < self.fraction < 1:
                raise ConfigError(f"{self.name} needs a fraction in (0, 1)")


def parse_policy(text: str) -> PolicyKind:
    """Parse labels like 'etc:0.2', 'etg_fb:0.1', 'fixed:0.5,0.5', 'oracle'."""
    text = text.strip()
    if text == "oracle":
        return PolicyKind("oracle", label=text)
    if text == "fixed_equal":
        return PolicyKind("fixed", label=text)
    name, sep, arg = text.partition(":")
    if name == "fixed":
        if not sep:
            raise ConfigError("fixed policy needs a ratio, e.g. fixed:0.5,0.5")
        ratio = tuple(float(x) for x in arg.split(","))
        return PolicyKind("fixed", ratio=ratio, label=text)
    if name in ("etc", "etg", "etc_cs", "etg_fs", "etg_fb"):
        if not sep:
            raise ConfigError(f"{name} policy needs a fraction, e.g. {name}:0.1")
        return PolicyKind(name, fraction=float(arg), label=text)
    raise ConfigError(f"unknown policy {text!r}")


@dataclass
class PolicyState:
    """Loop variables and audit trail of one policy episode."""

    kind: PolicyKind
    phase: str = "explore"
    current_target: np.ndarray | None = None
    budget_left: float = 0.0
    horizon: int | None = None
    budget: float | None = None
    rounds: int = 0
    interim_estimates: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)


def _center(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


def interleaved_sequence(counts: np.ndarray) -> np.ndarray:
    """Round-robin query order realizing the given per-source counts."""
    remaining = np.asarray(counts, dtype=np.int64).copy()
    seq = np.empty(int(remaining.sum()), dtype=np.int64)
    pos = 0
    while remaining.sum() > 0:
        for i in range(len(remaining)):
            if remaining[i] > 0:
                seq[pos] = i
                pos += 1
                remaining[i] -= 1
    return seq


def greedy_purchase(target: np.ndarray, counts: np.ndarray, costs: np.ndarray,
                    budget: float) -> list[int]:
    """Buy one query at a time, tracking the target ratio in running l-inf
    distance, until no source is affordable.  Ties go to the lowest index."""
    k = len(target)
    tgt = [float(t) for t in target]
    cnt = [int(c) for c in counts]
    cst = [float(c) for c in costs]
    left = float(budget)
    total = sum(cnt)
    seq: list[int] = []
    while True:
        best_i, best_d = -1, None
        t1 = total + 1
        for i in range(k):
            if cst[i] > left + 1e-9:
                continue
            d = 0.0
            for j in range(k):
                cj = cnt[j] + (1 if j == i else 0)
                e = abs(cj - t1 * tgt[j])
                if e > d:
                    d = e
            if best_d is None or d < best_d - 1e-12:
                best_i, best_d = i, d
        if best_i < 0:
            break
        seq.append(best_i)
        cnt[best_i] += 1
        total = t1
        left -= cst[best_i]
    return seq


def _collect(history: History, env: EpisodeSampler, seq: np.ndarray) -> None:
    if len(seq) == 0:
        return
    for idx, cols in env.observe_sequence(np.asarray(seq, dtype=np.int64)):
        history.extend_columns(idx, cols)


def _batch_cost(target, counts, costs, n):
    if n == 0:
        return 0.0, np.zeros(len(costs), dtype=np.int64)
    alloc = integer_allocate(target, counts, n)
    return float(alloc @ costs), alloc


def buy_toward(target: np.ndarray, counts: np.ndarray, costs: np.ndarray,
               budget: float) -> list[int]:
    """Spend a budget chunk tracking `target`: the largest affordable
    integer-allocated batch, topped up greedily until nothing is affordable.

    With equal costs this reduces exactly to `integer_allocate` of the whole
    chunk, which keeps the unit-cost policies coincident with their horizon
    counterparts.
    """
    if budget < costs.min():
        return []
    # cost(n) is monotone up to the integer-rounding band, so binary search
    # plus a local fix-up finds the largest affordable batch
    lo, hi = 0, int(budget / costs.min())
    while lo < hi:
        mid = (lo + hi + 1) // 2
        cost, _ = _batch_cost(target, counts, costs, mid)
        if cost <= budget + 1e-9:
            lo = mid
        else:
            hi = mid - 1
    n = lo
    while n > 0 and _batch_cost(target, counts, costs, n)[0] > budget + 1e-9:
        n -= 1
    while _batch_cost(target, counts, costs, n + 1)[0] <= budget + 1e-9:
        n += 1
    cost, alloc = _batch_cost(target, counts, costs, n)
    seq = list(interleaved_sequence(alloc))
    leftover = budget - cost
    if leftover >= costs.min():
        seq += greedy_purchase(target, counts + alloc, costs, leftover)
    return seq


def _interim(history: History, model: MomentModel, weight: WeightSpec, seed: int,
             warm: np.ndarray | None, costs: np.ndarray | None,
             state: PolicyState) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Re-estimate θ and the oracle-ratio plug-in; None on recoverable failure."""
    try:
        est = estimate(history, model, weight, seed, warm_start=warm)
        pm = plugin_matrices(history, model, est.theta_hat)
        objective = VarianceObjective(pm, model, est.theta_hat, costs=costs)
        khat = minimize_over_simplex(objective, len(model.sources))
    except (UnderIdentifiedError, PoleError, DegenerateObjectiveError, ConfigError):
        return None, None
    state.interim_estimates.append((len(history), est.theta_hat.copy(), khat.copy()))
    return est.theta_hat, khat


def _final_estimate(history: History, model: MomentModel, seed: int,
                    warm: np.ndarray | None) -> GmmEstimate:
    return estimate(history, model, WeightSpec.efficient(),
                    seed * _SEED_STRIDE + _FINAL_SEED, warm_start=warm)


def _interim_weight(weight: WeightSpec | None) -> WeightSpec:
    return weight if weight is not None else WeightSpec.regularized(0.01)


# ---------------------------------------------------------------------------
# Unit-cost policies


def fixed_run(model: MomentModel, horizon_or_budget, kappa: np.ndarray,
              costs: np.ndarray | None, env: EpisodeSampler, seed: int,
              kind: PolicyKind | None = None):
    """Query sources at a pre-specified ratio for the whole episode."""
    kind = kind or PolicyKind("fixed", ratio=tuple(kappa), label="fixed")
    state = PolicyState(kind, phase="committed", current_target=np.asarray(kappa, dtype=float))
    history = History(model.sources)
    k = len(model.sources)
    if costs is None:
        state.horizon = int(horizon_or_budget)
        seq = greedy_purchase(kappa, np.zeros(k), np.ones(k), float(state.horizon))
    else:
        state.budget = float(horizon_or_budget)
        seq = greedy_purchase(kappa, np.zeros(k), costs, state.budget)
        state.budget_left = state.budget - sum(costs[i] for i in seq)
    _collect(history, env, np.asarray(seq, dtype=np.int64))
    est = _final_estimate(history, model, seed, None)
    state.rounds = 1
    return history, est, state


def oracle_kappa(entry: RegisteredModel, costs: np.ndarray | None) -> np.ndarray:
    """Oracle selection ratio from the true parameters and exact moments."""
    key = (entry.name, str(entry.scm.metadata), None if costs is None else tuple(costs))
    cached = _ORACLE_CACHE.get(key)
    if cached is not None:
        return cached.copy()
    pm = exact_moment_matrices(entry.scm, entry.model, entry.scm.true_theta)
    objective = VarianceObjective(pm, entry.model, entry.scm.true_theta, costs=costs)
    kappa = minimize_over_simplex(objective, len(entry.model.sources))
    _ORACLE_CACHE[key] = kappa.copy()
    return kappa


_ORACLE_CACHE: dict = {}


def etc_run(model: MomentModel, horizon: int, e: float, env: EpisodeSampler, seed: int,
            interim_weight: WeightSpec | None = None, kind: PolicyKind | None = None):
    """Explore uniformly, estimate the oracle ratio once, commit to it."""
    k = len(model.sources)
    n = int(horizon * e)
    if n < k:
        raise ConfigError(f"exploration {n} smaller than the number of sources {k}")
    if n < model.n_params + 1:
        raise ConfigError(f"exploration {n} too small for D+1={model.n_params + 1}")
    kind = kind or PolicyKind("etc", fraction=e, label=f"etc:{e}")
    state = PolicyState(kind, horizon=horizon)
    history = History(model.sources)

    explore_counts = integer_allocate(_center(k), np.zeros(k, dtype=np.int64), n)
    _collect(history, env, interleaved_sequence(explore_counts))

    theta_i, khat = _interim(history, model, _interim_weight(interim_weight),
                             seed * _SEED_STRIDE + 1, None, None, state)
    if khat is None:
        khat = _center(k)
    state.phase = "committed"
    region = FeasibleRegion.etc(n / horizon, history.selection_ratio())
    target = project_to_region(khat, region)
    state.current_target = target
    if horizon > n:
        commit_counts = integer_allocate(target, history.counts, horizon - n)
        _collect(history, env, interleaved_sequence(commit_counts))
    est = _final_estimate(history, model, seed, theta_i)
    state.rounds = 2
    return history, est, state


def etg_run(model: MomentModel, horizon: int, s: float, env: EpisodeSampler, seed: int,
            interim_weight: WeightSpec | None = None, kind: PolicyKind | None = None):
    """Re-estimate the oracle ratio after every batch and re-target greedily."""
    k = len(model.sources)
    b = int(horizon * s)
    rounds = int(1.0 / s + 1e-9)
    if b < k:
        raise ConfigError(f"batch size {b} smaller than the number of sources {k}")
    if rounds < 2:
        raise ConfigError("explore-then-greedy needs at least two rounds")
    kind = kind or PolicyKind("etg", fraction=s, label=f"etg:{s}")
    state = PolicyState(kind, horizon=horizon)
    history = History(model.sources)

    batch_sizes = [b] * (rounds - 1) + [horizon - b * (rounds - 1)]
    khat = _center(k)
    theta_prev: np.ndarray | None = None
    for j, size in enumerate(batch_sizes, start=1):
        if j == 1:
            target = _center(k)
        else:
            region = FeasibleRegion.round_(len(history) / size, history.selection_ratio())
            target = project_to_region(khat, region)
        state.current_target = target
        counts_j = integer_allocate(target, history.counts, size)
        _collect(history, env, interleaved_sequence(counts_j))
        state.phase = f"round({j})"
        if j < len(batch_sizes):
            theta_j, khat_j = _interim(history, model, _interim_weight(interim_weight),
                                       seed * _SEED_STRIDE + j, theta_prev, None, state)
            if khat_j is not None:
                theta_prev, khat = theta_j, khat_j
    est = _final_estimate(history, model, seed, theta_prev)
    state.rounds = rounds
    return history, est, state


# ---------------------------------------------------------------------------
# Cost-structured policies


def etc_cs_run(model: MomentModel, budget: float, e: float, costs: np.ndarray,
               env: EpisodeSampler, seed: int, interim_weight: WeightSpec | None = None,
               kind: PolicyKind | None = None):
    """Explore-then-commit under a per-source cost structure and total budget."""
    costs = np.asarray(costs, dtype=float)
    k = len(model.sources)
    total_cost = float(costs.sum())
    n_e = int(budget * e / total_cost)
    if n_e < 1:
        raise ConfigError(f"exploration budget {budget * e} below one sweep cost {total_cost}")
    if budget * (1 - e) < costs.max():
        raise ConfigError("commit budget below the most expensive source")
    kind = kind or PolicyKind("etc_cs", fraction=e, label=f"etc_cs:{e}")
    state = PolicyState(kind, budget=float(budget))
    history = History(model.sources)

    explore_counts = np.full(k, n_e, dtype=np.int64)
    _collect(history, env, interleaved_sequence(explore_counts))
    spent = n_e * total_cost
    state.budget_left = budget - spent

    theta_i, khat = _interim(history, model, _interim_weight(interim_weight),
                             seed * _SEED_STRIDE + 1, None, costs, state)
    if khat is None:
        khat = _center(k)
    state.phase = "committed"
    region = FeasibleRegion.cost_etc(spent / budget, history.selection_ratio(), costs)
    target = project_to_region(khat, region)
    state.current_target = target
    seq = buy_toward(target, history.counts, costs, budget - spent)
    _collect(history, env, np.asarray(seq, dtype=np.int64))
    spent += sum(costs[i] for i in seq)
    state.budget_left = budget - spent
    est = _final_estimate(history, model, seed, theta_i)
    state.rounds = 2
    return history, est, state


def etg_fs_run(model: MomentModel, budget: float, s: float, costs: np.ndarray,
               env: EpisodeSampler, seed: int, interim_weight: WeightSpec | None = None,
               kind: PolicyKind | None = None):
    """Explore-then-greedy spending with a fixed number of samples per round."""
    costs = np.asarray(costs, dtype=float)
    k = len(model.sources)
    c_max = float(costs.max())
    b = int(budget * s / c_max)
    if b < k:
        raise ConfigError(f"per-round samples {b} smaller than the number of sources {k}")
    kind = kind or PolicyKind("etg_fs", fraction=s, label=f"etg_fs:{s}")
    state = PolicyState(kind, budget=float(budget), budget_left=float(budget))
    history = History(model.sources)

    khat = _center(k)
    theta_prev: np.ndarray | None = None
    spent = 0.0
    j = 0
    while state.budget_left > 0:
        j += 1
        last_step = state.budget_left / c_max <= b
        if not last_step:
            if j == 1:
                target = _center(k)
            else:
                region = FeasibleRegion.round_(len(history) / b, history.selection_ratio())
                target = project_to_region(khat, region)
            state.current_target = target
            counts_j = integer_allocate(target, history.counts, b)
            _collect(history, env, interleaved_sequence(counts_j))
            spent += float(counts_j @ costs)
            state.budget_left = budget - spent
            state.phase = f"round({j})"
            theta_j, khat_j = _interim(history, model, _interim_weight(interim_weight),
                                       seed * _SEED_STRIDE + j, theta_prev, costs, state)
            if khat_j is not None:
                theta_prev, khat = theta_j, khat_j
        else:
            if len(history) > 0:
                region = FeasibleRegion.cost_round(spent / state.budget_left,
                                                   history.selection_ratio(), costs)
                target = project_to_region(khat, region)
            else:
                target = khat
            state.current_target = target
            seq = buy_toward(target, history.counts, costs, state.budget_left)
            _collect(history, env, np.asarray(seq, dtype=np.int64))
            spent += sum(costs[i] for i in seq)
            state.budget_left = budget - spent
            state.phase = f"round({j})"
            break
    est = _final_estimate(history, model, seed, theta_prev)
    state.rounds = j
    return history, est, state


def etg_fb_run(model: MomentModel, budget: float, s: float, costs: np.ndarray,
               env: EpisodeSampler, seed: int, interim_weight: WeightSpec | None = None,
               kind: PolicyKind | None = None):
    """Explore-then-greedy spending a fixed fraction of the budget per round."""
    costs = np.asarray(costs, dtype=float)
    k = len(model.sources)
    if budget * s < costs.max():
        raise ConfigError("per-round budget below the most expensive source")
    rounds = int(1.0 / s + 1e-9)
    if rounds < 2:
        raise ConfigError("explore-then-greedy needs at least two rounds")
    kind = kind or PolicyKind("etg_fb", fraction=s, label=f"etg_fb:{s}")
    state = PolicyState(kind, budget=float(budget), budget_left=float(budget))
    history = History(model.sources)

    khat = _center(k)
    theta_prev: np.ndarray | None = None
    spent = 0.0
    for j in range(1, rounds + 1):
        allowance = budget if j == rounds else budget * s * j
        chunk = allowance - spent
        if j == 1:
            target = _center(k)
        else:
            region = FeasibleRegion.cost_round(spent / chunk, history.selection_ratio(), costs)
            target = project_to_region(khat, region)
        state.current_target = target
        # per-round sample count is the chunk over the target's per-sample cost
        n_round = int(chunk / float(target @ costs))
        while n_round > 0:
            counts_j = integer_allocate(target, history.counts, n_round)
            if float(counts_j @ costs) <= min(chunk, budget - spent) + 1e-9:
                break
            n_round -= 1
        if n_round > 0:
            _collect(history, env, interleaved_sequence(counts_j))
            spent += float(counts_j @ costs)
        state.budget_left = budget - spent
        state.phase = f"round({j})"
        if j < rounds:
            theta_j, khat_j = _interim(history, model, _interim_weight(interim_weight),
                                       seed * _SEED_STRIDE + j, theta_prev, costs, state)
            if khat_j is not None:
                theta_prev, khat = theta_j, khat_j
    est = _final_estimate(history, model, seed, theta_prev)
    state.rounds = rounds
    return history, est, state
