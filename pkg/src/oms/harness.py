"""Monte Carlo experiment runner: paired episodes, MSE/relative-regret tables,
bootstrap confidence intervals, and file outputs (CSV, config echo, SVG).

Episode seeds are base_seed + run_index, shared across policies, so policy
comparisons are paired on the same underlying joint sample stream.  Cells are
aggregated in run-index order regardless of worker scheduling, keeping the
output bitwise deterministic.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EpisodeError, OmsError
from .gmm_engine import WeightSpec
from .moment_model import History
from .policies import (
    PolicyKind,
    PolicyState,
    etc_cs_run,
    etc_run,
    etg_fb_run,
    etg_fs_run,
    etg_run,
    fixed_run,
    oracle_kappa,
    parse_policy,
)
from .scm_models import EpisodeSampler, RegisteredModel, get_model
from .variance_engine import check_simplex

BOOTSTRAP_RESAMPLES = 2000
CSV_COLUMNS = ("policy", "horizon", "mse", "mse_se", "rr_pct", "rr_lo", "rr_hi")


@dataclass
class ExperimentConfig:
    model: str
    policies: list[str]
    horizons: list[int]
    runs: int = 2000
    seed: int = 0
    budget_mode: bool = False
    costs: list[float] | None = None
    out_dir: str | None = None
    lambda_w: float = 0.01
    ihdp_covariates: str | None = None
    workers: int | None = None

    def __post_init__(self):
        if not self.policies:
            raise ConfigError("policy list must be nonempty")
        if self.runs < 2:
            raise ConfigError("need at least 2 runs")
        if not self.horizons:
            raise ConfigError("need at least one horizon/budget")
        if any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise ConfigError("horizons must be strictly increasing")
        if self.lambda_w < 0:
            raise ConfigError("lambda_w must be >= 0")
        for p in self.policies:
            parse_policy(p)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class RegretRow:
    policy: str
    horizon: int
    mse: float
    mse_se: float
    rr_pct: float
    rr_lo: float
    rr_hi: float
    error: str | None = None


@dataclass
class RegretTable:
    rows: list[RegretRow]
    metadata: dict = field(default_factory=dict)


def _interim_for(lambda_w: float) -> WeightSpec:
    # lambda_w = 0 means the plain (unregularized) efficient interim weight.
    return WeightSpec.regularized(lambda_w) if lambda_w > 0 else WeightSpec.efficient()


def run_episode(kind: PolicyKind, entry: RegisteredModel, horizon_or_budget,
                seed: int, *, budget_mode: bool = False,
                costs: np.ndarray | None = None, lambda_w: float = 0.01,
                oracle_ratio: np.ndarray | None = None
                ) -> tuple[float, np.ndarray, PolicyState, History]:
    """One policy episode; returns the plug-in target estimate and final ratio."""
    model = entry.model
    env = EpisodeSampler(entry.scm, seed)
    interim = _interim_for(lambda_w)
    costs_arr = None if costs is None else np.asarray(costs, dtype=float)
    try:
        if kind.name == "fixed":
            kappa = np.asarray(kind.ratio, dtype=float) if kind.ratio is not None \
                else np.full(len(model.sources), 1.0 / len(model.sources))
            kappa = check_simplex(kappa)
            hist, est, state = fixed_run(model, horizon_or_budget, kappa,
                                         costs_arr if budget_mode else None, env, seed, kind)
        elif kind.name == "oracle":
            kappa = oracle_ratio if oracle_ratio is not None else \
                oracle_kappa(entry, costs_arr if budget_mode else None)
            hist, est, state = fixed_run(model, horizon_or_budget, kappa,
                                         costs_arr if budget_mode else None, env, seed, kind)
        elif kind.name == "etc":
            if budget_mode:
                raise ConfigError("etc is a horizon policy; use etc_cs with budgets")
            hist, est, state = etc_run(model, int(horizon_or_budget), kind.fraction,
                                       env, seed, interim, kind)
        elif kind.name == "etg":
            if budget_mode:
                raise ConfigError("etg is a horizon policy; use etg_fs/etg_fb with budgets")
            hist, est, state = etg_run(model, int(horizon_or_budget), kind.fraction,
                                       env, seed, interim, kind)
        elif kind.name == "etc_cs":
            if not budget_mode:
                raise ConfigError("etc_cs needs budget mode")
            hist, est, state = etc_cs_run(model, float(horizon_or_budget), kind.fraction,
                                          costs_arr, env, seed, interim, kind)
        elif kind.name == "etg_fs":
            if not budget_mode:
                raise ConfigError("etg_fs needs budget mode")
            hist, est, state = etg_fs_run(model, float(horizon_or_budget), kind.fraction,
                                          costs_arr, env, seed, interim, kind)
        elif kind.name == "etg_fb":
            if not budget_mode:
                raise ConfigError("etg_fb needs budget mode")
            hist, est, state = etg_fb_run(model, float(horizon_or_budget), kind.fraction,
                                          costs_arr, env, seed, interim, kind)
        else:
            raise ConfigError(f"unknown policy kind {kind.name!r}")
        beta_hat = float(model.f_tar(est.theta_hat))
    except ConfigError:
        raise
    except OmsError as exc:
        raise EpisodeError(f"{type(exc).__name__}: {exc} (seed={seed})") from exc
    return beta_hat, hist.selection_ratio(), state, hist


# -- multiprocessing plumbing -------------------------------------------------

_ENTRY_CACHE: dict = {}


def _cached_entry(model_name: str, ihdp_path: str | None) -> RegisteredModel:
    key = (model_name, ihdp_path)
    if key not in _ENTRY_CACHE:
        _ENTRY_CACHE[key] = get_model(model_name, ihdp_path)
    return _ENTRY_CACHE[key]


def _episode_task(args):
    (p_idx, h_idx, run_idx, model_name, ihdp_path, label, ratio, horizon,
     seed, budget_mode, costs, lambda_w) = args
    entry = _cached_entry(model_name, ihdp_path)
    kind = parse_policy(label)
    if ratio is not None:
        kind = PolicyKind(kind.name, fraction=kind.fraction, ratio=tuple(ratio),
                          label=kind.label)
    try:
        beta, kappa, _, _ = run_episode(
            kind, entry, horizon, seed, budget_mode=budget_mode,
            costs=None if costs is None else np.array(costs),
            lambda_w=lambda_w,
        )
        return p_idx, h_idx, run_idx, beta, tuple(kappa), None
    except (EpisodeError, ConfigError) as exc:
        return p_idx, h_idx, run_idx, math.nan, None, str(exc)


def _resolve_workers(cfg: ExperimentConfig) -> int:
    workers = cfg.workers if cfg.workers is not None else (os.cpu_count() or 1)
    env_cap = os.environ.get("OMS_THREADS")
    if env_cap:
        workers = min(workers, max(1, int(env_cap)))
    return max(1, workers)


def mse_curve(cfg: ExperimentConfig) -> RegretTable:
    """MSE and relative regret for every (policy, horizon) cell of the config."""
    entry = get_model(cfg.model, cfg.ihdp_covariates)
    true_beta = entry.scm.true_beta
    costs = np.asarray(cfg.costs, dtype=float) if cfg.costs else entry.model.sources.costs

    labels = list(cfg.policies)
    oracle_added = False
    if not any(parse_policy(p).name == "oracle" for p in labels):
        labels.append("oracle")
        oracle_added = True
    kinds = [parse_policy(p) for p in labels]
    oracle_ratio = oracle_kappa(entry, costs if cfg.budget_mode else None)

    tasks = []
    for p_idx, kind in enumerate(kinds):
        ratio = tuple(oracle_ratio) if kind.name == "oracle" else None
        for h_idx, horizon in enumerate(cfg.horizons):
            for run_idx in range(cfg.runs):
                tasks.append((
                    p_idx, h_idx, run_idx, cfg.model, cfg.ihdp_covariates,
                    kind.label, ratio, horizon, cfg.seed + run_idx,
                    cfg.budget_mode, None if cfg.costs is None and not cfg.budget_mode
                    else tuple(costs), cfg.lambda_w,
                ))

    workers = _resolve_workers(cfg)
    betas = np.full((len(kinds), len(cfg.horizons), cfg.runs), math.nan)
    kappa_sum = np.zeros((len(kinds), len(cfg.horizons), len(entry.model.sources)))
    kappa_n = np.zeros((len(kinds), len(cfg.horizons)), dtype=np.int64)
    cell_errors: dict[tuple[int, int], str] = {}
    if workers == 1:
        results = map(_episode_task, tasks)
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        chunk = max(1, len(tasks) // (workers * 8))
        results = pool.map(_episode_task, tasks, chunksize=chunk)
    for p_idx, h_idx, run_idx, beta, kappa, err in results:
        if err is not None:
            cell_errors.setdefault((p_idx, h_idx), err)
        else:
            betas[p_idx, h_idx, run_idx] = beta
            kappa_sum[p_idx, h_idx] += np.asarray(kappa)
            kappa_n[p_idx, h_idx] += 1
    if workers > 1:
        pool.shutdown()

    oracle_idx = next(i for i, k in enumerate(kinds) if k.name == "oracle")
    sq = (betas - true_beta) ** 2

    rows = []
    for p_idx, kind in enumerate(kinds):
        for h_idx, horizon in enumerate(cfg.horizons):
            err = cell_errors.get((p_idx, h_idx))
            if err is not None:
                rows.append(RegretRow(kind.label, horizon, math.nan, math.nan,
                                      math.nan, math.nan, math.nan, error=err))
                continue
            cell = sq[p_idx, h_idx]
            mse = float(cell.mean())
            mse_se = float(cell.std(ddof=1) / math.sqrt(cfg.runs))
            if p_idx == oracle_idx:
                rows.append(RegretRow(kind.label, horizon, mse, mse_se, 0.0, 0.0, 0.0))
                continue
            oracle_cell = sq[oracle_idx, h_idx]
            if (oracle_idx, h_idx) in cell_errors or oracle_cell.mean() == 0:
                rows.append(RegretRow(kind.label, horizon, mse, mse_se,
                                      math.nan, math.nan, math.nan,
                                      error="oracle cell unavailable"))
                continue
            rr = 100.0 * (mse - oracle_cell.mean()) / oracle_cell.mean()
            rng = np.random.default_rng([cfg.seed, p_idx, h_idx])
            idx = rng.integers(0, cfg.runs, size=(BOOTSTRAP_RESAMPLES, cfg.runs))
            m_p = cell[idx].mean(axis=1)
            m_o = oracle_cell[idx].mean(axis=1)
            rr_star = 100.0 * (m_p - m_o) / m_o
            lo, hi = np.percentile(rr_star, [2.5, 97.5])
            # widen so the interval always brackets the point estimate
            rows.append(RegretRow(kind.label, horizon, mse, mse_se, rr,
                                  min(float(lo), rr), max(float(hi), rr)))

    rows.sort(key=lambda r: (r.policy, r.horizon))
    mean_kappa = {}
    for p_idx, kind in enumerate(kinds):
        for h_idx, horizon in enumerate(cfg.horizons):
            if kappa_n[p_idx, h_idx] > 0:
                mk = kappa_sum[p_idx, h_idx] / kappa_n[p_idx, h_idx]
                mean_kappa[f"{kind.label}@{horizon}"] = [round(x, 6) for x in mk]
    metadata = {
        "model": cfg.model,
        "true_beta": true_beta,
        "oracle_ratio": [float(x) for x in oracle_ratio],
        "oracle_auto_added": oracle_added,
        "ci_method": f"paired percentile bootstrap over runs, {BOOTSTRAP_RESAMPLES} resamples",
        "pairing": "episode seeds shared across policies (seed = base + run_index)",
        "budget_mode": cfg.budget_mode,
        "costs": [float(c) for c in costs],
        "lambda_w": cfg.lambda_w,
        "mean_final_ratio": mean_kappa,
        "model_metadata": dict(entry.scm.metadata),
    }
    return RegretTable(rows, metadata)


# -- outputs ------------------------------------------------------------------


def _git_describe() -> str | None:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def write_regret_csv(table: RegretTable, path) -> None:
    # policy labels may embed commas (fixed ratios), so fields are quoted
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in table.rows:
            writer.writerow([r.policy, r.horizon] +
                            [f"{v:.17g}" for v in (r.mse, r.mse_se, r.rr_pct,
                                                   r.rr_lo, r.rr_hi)])


def read_regret_csv(path) -> list[RegretRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {header}")
        for parts in reader:
            rows.append(RegretRow(parts[0], int(parts[1]), *map(float, parts[2:])))
    return rows


def _svg_scale(values, lo_px, hi_px):
    finite = [v for v in values if math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    return lambda v: lo_px + (v - lo) / (hi - lo) * (hi_px - lo_px)


def write_regret_svg(table: RegretTable, path) -> None:
    """One polyline per policy: relative regret vs horizon, with CI error bars."""
    width, height, margin = 640, 420, 60
    rows = [r for r in table.rows if r.error is None]
    xs = [float(r.horizon) for r in rows]
    ys = [v for r in rows for v in (r.rr_pct, r.rr_lo, r.rr_hi)]
    sx = _svg_scale(xs, margin, width - margin)
    sy_raw = _svg_scale(ys, margin, height - margin)
    sy = lambda v: height - sy_raw(v)  # flip: larger regret plotted higher

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b", "#e377c2", "#7f7f7f"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 14}" text-anchor="middle" '
        f'font-size="13">horizon / budget</text>',
        f'<text x="16" y="{height / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {height / 2})">relative regret (%)</text>',
    ]
    policies = sorted({r.policy for r in rows})
    for i, policy in enumerate(policies):
        color = palette[i % len(palette)]
        pr = sorted((r for r in rows if r.policy == policy), key=lambda r: r.horizon)
        points = " ".join(f"{sx(r.horizon):.2f},{sy(r.rr_pct):.2f}" for r in pr)
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        for r in pr:
            x = sx(r.horizon)
            parts.append(f'<line x1="{x:.2f}" y1="{sy(r.rr_lo):.2f}" x2="{x:.2f}" '
                         f'y2="{sy(r.rr_hi):.2f}" stroke="{color}" stroke-width="1"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 16 * i}" '
                     f'font-size="11" fill="{color}">{policy}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def emit_outputs(table: RegretTable, out_dir, config: ExperimentConfig | None = None) -> dict:
    """Write regret.csv, config.json, and regret.svg; returns the paths."""
    if not table.rows:
        raise ConfigError("cannot emit an empty regret table")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "csv": out / "regret.csv",
            "config": out / "config.json",
            "svg": out / "regret.svg",
        }
        write_regret_csv(table, paths["csv"])
        echo = {
            "config": dataclasses.asdict(config) if config is not None else None,
            "git_describe": _git_describe(),
            "metadata": table.metadata,
            "cell_errors": {r.policy + "@" + str(r.horizon): r.error
                            for r in table.rows if r.error},
        }
        paths["config"].write_text(json.dumps(echo, indent=2, sort_keys=True))
        write_regret_svg(table, paths["svg"])
    except OSError as exc:
        raise OmsError(f"cannot write outputs to {out}: {exc}") from exc
    return {k: str(v) for k, v in paths.items()}
