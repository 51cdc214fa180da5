"""The five experimental environments: samplers and registered moment models.

Each environment bundles a structural data generator with the moment system
used for estimation.  Samplers draw full joint samples and mask them to the
queried source, with one counter-based noise stream per structural equation,
so the t-th joint draw for a given episode seed is identical no matter how
the policy batches its queries.

Exact G(θ) and Ω(θ) are available for every environment: in closed form for
the binary-instrument model, otherwise by Gauss-Hermite product quadrature
over the exogenous noise (exact for the polynomial moment systems, and
precise to near machine accuracy for the logistic treatment model).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from collections.abc import Callable, Iterator

import numpy as np
from scipy.stats import norm

from .errors import IngestionError, PoleError
from .moment_model import (
    DataSourceSet,
    MomentModel,
    MomentRow,
    Observation,
    SelectionVector,
    term,
)
from .variance_engine import PluginMatrices, exact_matrices


@dataclass(frozen=True)
class ScmSpec:
    """Structural generator with true parameters and exact moment access."""

    name: str
    params: dict[str, float]
    true_theta: np.ndarray
    true_beta: float
    sources: DataSourceSet
    equations: tuple[str, ...]
    draw: Callable[[dict[str, np.random.Generator], int], dict[str, np.ndarray]]
    population: Callable[[], tuple[np.ndarray, dict[str, np.ndarray]]] | None = None
    closed_form_gq: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RegisteredModel:
    name: str
    scm: ScmSpec
    model: MomentModel


class EpisodeSampler:
    """Per-episode sampler with one independent substream per equation."""

    def __init__(self, spec: ScmSpec, seed: int):
        self.spec = spec
        key = (int(seed) & ((1 << 63) - 1)) * (1 << 64)
        self._gens = {
            eq: np.random.Generator(np.random.Philox(key=key + i * 2 + 1))
            for i, eq in enumerate(spec.equations)
        }
        self.t = 0

    def draw_joint(self, n: int) -> dict[str, np.ndarray]:
        out = self.spec.draw(self._gens, n)
        self.t += n
        return out

    def observe_sequence(self, source_seq: np.ndarray) -> list[tuple[int, dict[str, np.ndarray]]]:
        """Draw one joint sample per entry and keep only the queried variables.

        Returns (source_index, column block) chunks for runs of equal source,
        preserving the query order.
        """
        source_seq = np.asarray(source_seq, dtype=np.int64)
        joint = self.draw_joint(len(source_seq))
        chunks = []
        i = 0
        while i < len(source_seq):
            j = i + 1
            while j < len(source_seq) and source_seq[j] == source_seq[i]:
                j += 1
            idx = int(source_seq[i])
            variables = self.spec.sources.variables(idx)
            chunks.append((idx, {v: joint[v][i:j] for v in variables}))
            i = j
        return chunks


def sample(spec: ScmSpec, source: SelectionVector, sampler: EpisodeSampler) -> Observation:
    """One draw from the joint law, restricted to the queried source."""
    joint = sampler.draw_joint(1)
    variables = spec.sources.variables(source.index)
    return Observation(source, {v: float(joint[v][0]) for v in variables})


# ---------------------------------------------------------------------------
# Quadrature helpers


def _hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    return nodes, weights / weights.sum()


def _product_grid(*dims: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    grids = np.meshgrid(*[d[0] for d in dims], indexing="ij")
    weight_grids = np.meshgrid(*[d[1] for d in dims], indexing="ij")
    weights = np.ones_like(weight_grids[0])
    for w in weight_grids:
        weights = weights * w
    return weights.ravel(), [g.ravel() for g in grids]


def exact_moment_matrices(spec: ScmSpec, model: MomentModel, theta: np.ndarray) -> PluginMatrices:
    """Population G(θ) and Ω(θ) wrapped as fully supported plug-in matrices."""
    theta = np.asarray(theta, dtype=float)
    if spec.closed_form_gq is not None:
        g, omega = spec.closed_form_gq(theta)
        return exact_matrices(g, omega)
    weights, values = spec.population()
    rows = np.arange(model.n_moments)
    g_pts = model.row_block(rows, values, theta)
    omega = (g_pts * weights[:, None]).T @ g_pts
    jac = model.jacobian_block(rows, values, theta)
    g = np.einsum("n,nmd->md", weights, jac)
    return exact_matrices(g, omega)


def _coordinate_target(d_params: int):
    """f_tar(θ) = θ_0 with constant gradient."""
    grad = np.zeros(d_params)
    grad[0] = 1.0

    def f_tar(theta: np.ndarray) -> float:
        return float(theta[0])

    def grad_f_tar(theta: np.ndarray) -> np.ndarray:
        return grad.copy()

    return f_tar, grad_f_tar


# ---------------------------------------------------------------------------
# Linear IV graph


def build_iv() -> RegisteredModel:
    p = dict(beta=1.0, alpha=1.0, gamma=1.0, phi=1.0,
             s2z=1.0, s2u=1.0, s2x=1.0, s2y=1.0)
    sources = DataSourceSet([("zx", {"Z", "X"}, 1.0), ("zy", {"Z", "Y"}, 1.0)])

    def draw(gens, n):
        z = gens["z"].standard_normal(n) * math.sqrt(p["s2z"])
        u = gens["u"].standard_normal(n) * math.sqrt(p["s2u"])
        x = p["alpha"] * z + p["gamma"] * u + gens["ex"].standard_normal(n) * math.sqrt(p["s2x"])
        y = p["beta"] * x + p["phi"] * u + gens["ey"].standard_normal(n) * math.sqrt(p["s2y"])
        return {"Z": z, "X": x, "Y": y}

    def population():
        weights, (z, u, ex, ey) = _product_grid(*[_hermite(7)] * 4)
        zz = z * math.sqrt(p["s2z"])
        uu = u * math.sqrt(p["s2u"])
        x = p["alpha"] * zz + p["gamma"] * uu + ex * math.sqrt(p["s2x"])
        y = p["beta"] * x + p["phi"] * uu + ey * math.sqrt(p["s2y"])
        return weights, {"Z": zz, "X": x, "Y": y}

    # theta = [beta, alpha]; g̃ = [Z(X - αZ), Z(Y - αβZ)]; phi = [1, α, αβ]
    def phi(theta):
        beta, alpha = theta
        return np.array([1.0, alpha, alpha * beta])

    def dphi(theta):
        beta, alpha = theta
        return np.array([[0.0, 0.0], [0.0, 1.0], [alpha, beta]])

    rows = [
        MomentRow((term(1.0, 0, "Z", "X"), term(-1.0, 1, "Z", "Z"))),
        MomentRow((term(1.0, 0, "Z", "Y"), term(-1.0, 2, "Z", "Z"))),
    ]
    f_tar, grad_f_tar = _coordinate_target(2)
    model = MomentModel("iv", ["beta", "alpha"], rows, phi, dphi, 3, sources,
                        f_tar, grad_f_tar)
    spec = ScmSpec("iv", p, np.array([p["beta"], p["alpha"]]), p["beta"], sources,
                   ("z", "u", "ex", "ey"), draw, population=population)
    return RegisteredModel("iv", spec, model)


# ---------------------------------------------------------------------------
# Two-IV graph (oracle ratio sits on a simplex corner)


def build_two_iv() -> RegisteredModel:
    # Unequal instrument strengths put the oracle ratio on the corner [0, 1].
    p = dict(beta=1.0, alpha1=0.65, alpha2=1.0, gamma=1.0, phi=1.0,
             s2z1=1.0, s2z2=1.0, s2u=1.0, s2x=1.0, s2y=1.0)
    sources = DataSourceSet([("xyz1", {"X", "Y", "Z1"}, 1.0), ("xyz2", {"X", "Y", "Z2"}, 1.0)])

    def draw(gens, n):
        z1 = gens["z1"].standard_normal(n) * math.sqrt(p["s2z1"])
        z2 = gens["z2"].standard_normal(n) * math.sqrt(p["s2z2"])
        u = gens["u"].standard_normal(n) * math.sqrt(p["s2u"])
        x = (p["alpha1"] * z1 + p["alpha2"] * z2 + p["gamma"] * u
             + gens["ex"].standard_normal(n) * math.sqrt(p["s2x"]))
        y = p["beta"] * x + p["phi"] * u + gens["ey"].standard_normal(n) * math.sqrt(p["s2y"])
        return {"Z1": z1, "Z2": z2, "X": x, "Y": y}

    def population():
        weights, (z1, z2, u, ex, ey) = _product_grid(*[_hermite(7)] * 5)
        zz1 = z1 * math.sqrt(p["s2z1"])
        zz2 = z2 * math.sqrt(p["s2z2"])
        uu = u * math.sqrt(p["s2u"])
        x = p["alpha1"] * zz1 + p["alpha2"] * zz2 + p["gamma"] * uu + ex * math.sqrt(p["s2x"])
        y = p["beta"] * x + p["phi"] * uu + ey * math.sqrt(p["s2y"])
        return weights, {"Z1": zz1, "Z2": zz2, "X": x, "Y": y}

    def phi(theta):
        return np.array([1.0, theta[0]])

    def dphi(theta):
        return np.array([[0.0], [1.0]])

    rows = [
        MomentRow((term(1.0, 0, "Z1", "Y"), term(-1.0, 1, "Z1", "X"))),
        MomentRow((term(1.0, 0, "Z2", "Y"), term(-1.0, 1, "Z2", "X"))),
    ]
    f_tar, grad_f_tar = _coordinate_target(1)
    model = MomentModel("two_iv", ["beta"], rows, phi, dphi, 2, sources,
                        f_tar, grad_f_tar)
    spec = ScmSpec("two_iv", p, np.array([p["beta"]]), p["beta"], sources,
                   ("z1", "z2", "u", "ex", "ey"), draw, population=population)
    return RegisteredModel("two_iv", spec, model)


# ---------------------------------------------------------------------------
# Confounder-mediator graph (backdoor and frontdoor both usable)


def build_confounder_mediator() -> RegisteredModel:
    p = dict(beta=-0.32, a=0.33, b=-0.34, d=0.45, s2w=1.0, s2x=1.0, s2m=1.0, s2y=1.0)
    sources = DataSourceSet([("backdoor", {"X", "Y", "W"}, 1.8), ("frontdoor", {"X", "Y", "M"}, 1.0)])

    def draw(gens, n):
        w = gens["w"].standard_normal(n) * math.sqrt(p["s2w"])
        x = p["d"] * w + gens["ex"].standard_normal(n) * math.sqrt(p["s2x"])
        m = (p["beta"] / p["a"]) * x + gens["em"].standard_normal(n) * math.sqrt(p["s2m"])
        y = p["a"] * m + p["b"] * w + gens["ey"].standard_normal(n) * math.sqrt(p["s2y"])
        return {"W": w, "X": x, "M": m, "Y": y}

    def population():
        weights, (w, ex, em, ey) = _product_grid(*[_hermite(7)] * 4)
        ww = w * math.sqrt(p["s2w"])
        x = p["d"] * ww + ex * math.sqrt(p["s2x"])
        m = (p["beta"] / p["a"]) * x + em * math.sqrt(p["s2m"])
        y = p["a"] * m + p["b"] * ww + ey * math.sqrt(p["s2y"])
        return weights, {"W": ww, "X": x, "M": m, "Y": y}

    # theta = [beta, a, b, d, s2w, s2x]
    # phi = [1, β, a, b, d, s2w, s2x, β/a, bds2w/(d²s2w+s2x), d²s2w]
    def phi(theta):
        beta, a, b, d, s2w, s2x = theta
        q = d * d * s2w + s2x
        return np.array([1.0, beta, a, b, d, s2w, s2x,
                         beta / a, b * d * s2w / q, d * d * s2w])

    def dphi(theta):
        beta, a, b, d, s2w, s2x = theta
        q = d * d * s2w + s2x
        out = np.zeros((10, 6))
        for pidx, col in ((1, 0), (2, 1), (3, 2), (4, 3), (5, 4), (6, 5)):
            out[pidx, col] = 1.0
        out[7, 0] = 1.0 / a
        out[7, 1] = -beta / (a * a)
        out[8, 2] = d * s2w / q
        out[8, 3] = b * s2w * (s2x - d * d * s2w) / q**2
        out[8, 4] = b * d * s2x / q**2
        out[8, 5] = -b * d * s2w / q**2
        out[9, 3] = 2.0 * d * s2w
        out[9, 4] = d * d
        return out

    rows = [
        MomentRow((term(1, 0, "X", "Y"), term(-1, 3, "X", "W"), term(-1, 1, "X", "X"))),
        MomentRow((term(1, 0, "W", "Y"), term(-1, 3, "W", "W"), term(-1, 1, "W", "X"))),
        MomentRow((term(1, 0, "X", "M"), term(-1, 7, "X", "X"))),
        MomentRow((term(1, 0, "M", "Y"), term(-1, 2, "M", "M"), term(-1, 8, "M", "X"))),
        MomentRow((term(1, 0, "X", "Y"), term(-1, 2, "X", "M"), term(-1, 8, "X", "X"))),
        MomentRow((term(1, 0, "W", "W"), term(-1, 5))),
        MomentRow((term(1, 0, "W", "X"), term(-1, 4, "W", "W"))),
        MomentRow((term(1, 0, "X", "X"), term(-1, 9), term(-1, 6))),
    ]
    f_tar, grad_f_tar = _coordinate_target(6)
    model = MomentModel(
        "confounder_mediator", ["beta", "a", "b", "d", "s2w", "s2x"],
        rows, phi, dphi, 10, sources, f_tar, grad_f_tar, variance_params=(4, 5),
    )
    theta = np.array([p["beta"], p["a"], p["b"], p["d"], p["s2w"], p["s2x"]])
    spec = ScmSpec("confounder_mediator", p, theta, p["beta"], sources,
                   ("w", "ex", "em", "ey"), draw, population=population)
    return RegisteredModel("confounder_mediator", spec, model)


# ---------------------------------------------------------------------------
# IHDP-style graph: two confounders, three sources, cost structure


# Fallback covariate law, calibrated so the cost-weighted oracle ratio matches
# the semi-synthetic setup this environment mirrors.
IHDP_FALLBACK = dict(p2=0.35, coupling=1.3, logit_w1=0.4, logit_w2=-0.3)
_IHDP_STRUCT = dict(beta=1.0, alpha1=1.0, alpha2=0.1, s2y=1.0)


def load_covariate_table(path) -> np.ndarray:
    """Read a (W1, W2, X) covariate CSV; W2 and X must be binary."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"W1", "W2", "X"} <= set(reader.fieldnames):
            raise IngestionError(f"{path}: header must contain W1, W2, X")
        for lineno, rec in enumerate(reader, start=2):
            try:
                w1, w2, x = float(rec["W1"]), float(rec["W2"]), float(rec["X"])
            except (TypeError, ValueError) as exc:
                raise IngestionError(f"{path}: bad row at line {lineno}: {rec}") from exc
            if w2 not in (0.0, 1.0) or x not in (0.0, 1.0):
                raise IngestionError(f"{path}: W2 and X must be 0/1 at line {lineno}")
            rows.append((w1, w2, x))
    if not rows:
        raise IngestionError(f"{path}: no covariate rows")
    return np.asarray(rows, dtype=float)


def _ihdp_fallback_population(n_w1: int = 151, n_ey: int = 9):
    fb = IHDP_FALLBACK
    p2, m = fb["p2"], fb["coupling"]
    s1 = math.sqrt(1.0 - m * m * p2 * (1 - p2))
    z_nodes, z_weights = _hermite(n_w1)
    e_nodes, e_weights = _hermite(n_ey)
    blocks_w, blocks_v = [], {"W1": [], "W2": [], "X": [], "ey": []}
    for w2, pw2 in ((0.0, 1 - p2), (1.0, p2)):
        w1 = -m * (w2 - p2) + s1 * z_nodes
        px = 1.0 / (1.0 + np.exp(-(fb["logit_w1"] * w1 + fb["logit_w2"] * w2)))
        for x in (0.0, 1.0):
            wx = px if x == 1.0 else 1.0 - px
            w, (z_i, e_i) = _product_grid((np.arange(len(z_nodes)), z_weights * wx),
                                          (e_nodes, e_weights))
            blocks_w.append(w * pw2)
            blocks_v["W1"].append(w1[z_i.astype(int)])
            blocks_v["W2"].append(np.full(w.size, w2))
            blocks_v["X"].append(np.full(w.size, x))
            blocks_v["ey"].append(e_i)
    weights = np.concatenate(blocks_w)
    values = {k: np.concatenate(v) for k, v in blocks_v.items()}
    return weights, values


def _ihdp_table_population(table: np.ndarray, n_ey: int = 9):
    e_nodes, e_weights = _hermite(n_ey)
    n = len(table)
    weights = np.repeat(e_weights / n, n)
    return weights, {
        "W1": np.tile(table[:, 0], n_ey),
        "W2": np.tile(table[:, 1], n_ey),
        "X": np.tile(table[:, 2], n_ey),
        "ey": np.repeat(e_nodes, n),
    }


def build_ihdp(covariates_path=None) -> RegisteredModel:
    p = dict(_IHDP_STRUCT)
    sources = DataSourceSet([
        ("w1", {"X", "Y", "W1"}, 1.0),
        ("w2", {"X", "Y", "W2"}, 3.0),
        ("both", {"X", "Y", "W1", "W2"}, 3.5),
    ])
    table = load_covariate_table(covariates_path) if covariates_path is not None else None

    if table is None:
        cov_weights, cov_values = _ihdp_fallback_population()
        metadata = {"synthetic_covariates": True}
    else:
        cov_weights, cov_values = _ihdp_table_population(table)
        metadata = {"synthetic_covariates": False, "covariates_path": str(covariates_path)}

    sy = math.sqrt(p["s2y"])

    def population():
        y = (p["alpha1"] * cov_values["W1"] + p["alpha2"] * cov_values["W2"]
             + p["beta"] * cov_values["X"] + sy * cov_values["ey"])
        vals = {k: v for k, v in cov_values.items() if k != "ey"}
        vals["Y"] = y
        return cov_weights, vals

    def cov_stat(expr: np.ndarray) -> float:
        return float(cov_weights @ expr)

    d_true = cov_stat(cov_values["W1"] * cov_values["W2"])
    tau1 = cov_stat(cov_values["X"] * cov_values["W1"])
    tau2 = cov_stat(cov_values["X"] * cov_values["W2"])
    s2w1 = cov_stat(cov_values["W1"] ** 2)
    s2w2 = cov_stat(cov_values["W2"] ** 2)
    theta = np.array([p["beta"], p["alpha1"], p["alpha2"], d_true, tau1, tau2,
                      s2w1, s2w2, p["s2y"]])

    if table is None:
        fb = IHDP_FALLBACK
        p2, m = fb["p2"], fb["coupling"]
        s1 = math.sqrt(1.0 - m * m * p2 * (1 - p2))

        def draw(gens, n):
            w2 = (gens["w2"].random(n) < p2).astype(float)
            w1 = -m * (w2 - p2) + s1 * gens["w1"].standard_normal(n)
            px = 1.0 / (1.0 + np.exp(-(fb["logit_w1"] * w1 + fb["logit_w2"] * w2)))
            x = (gens["x"].random(n) < px).astype(float)
            y = (p["alpha1"] * w1 + p["alpha2"] * w2 + p["beta"] * x
                 + sy * gens["ey"].standard_normal(n))
            return {"W1": w1, "W2": w2, "X": x, "Y": y}

        equations = ("w2", "w1", "x", "ey")
    else:
        nrows = len(table)

        def draw(gens, n):
            idx = gens["row"].integers(0, nrows, n)
            w1, w2, x = table[idx, 0], table[idx, 1], table[idx, 2]
            y = (p["alpha1"] * w1 + p["alpha2"] * w2 + p["beta"] * x
                 + sy * gens["ey"].standard_normal(n))
            return {"W1": w1, "W2": w2, "X": x, "Y": y}

        equations = ("row", "ey")

    # theta = [beta, alpha1, alpha2, d, tau1, tau2, s2w1, s2w2, s2y]
    # phi = [1, θ..., and the composite coefficients of the residual moments]
    def phi(theta):
        b, a1, a2, d, t1, t2, w1, w2, s2y_ = theta
        return np.array([
            1.0, b, a1, a2, d, t1, t2, w1, w2, s2y_,
            a2 * d, a2 * t2, a1 * d, a1 * t1,
            a1 * a1, b * b, a1 * b,
            a2 * a2 * w2, a2 * a2, a2 * b, a1 * a1 * w1,
        ])

    def dphi(theta):
        b, a1, a2, d, t1, t2, w1, w2, s2y_ = theta
        out = np.zeros((21, 9))
        for pidx in range(1, 10):
            out[pidx, pidx - 1] = 1.0
        out[10, 2] = d; out[10, 3] = a2
        out[11, 2] = t2; out[11, 5] = a2
        out[12, 1] = d; out[12, 3] = a1
        out[13, 1] = t1; out[13, 4] = a1
        out[14, 1] = 2 * a1
        out[15, 0] = 2 * b
        out[16, 0] = a1; out[16, 1] = b
        out[17, 2] = 2 * a2 * w2; out[17, 7] = a2 * a2
        out[18, 2] = 2 * a2
        out[19, 0] = a2; out[19, 2] = b
        out[20, 1] = 2 * a1 * w1; out[20, 6] = a1 * a1
        return out

    rows = [
        # W1-side backdoor residual moments
        MomentRow((term(1, 0, "W1", "Y"), term(-1, 2, "W1", "W1"),
                   term(-1, 1, "W1", "X"), term(-1, 10))),
        MomentRow((term(1, 0, "X", "Y"), term(-1, 2, "X", "W1"),
                   term(-1, 1, "X", "X"), term(-1, 11))),
        # W2-side backdoor residual moments
        MomentRow((term(1, 0, "W2", "Y"), term(-1, 3, "W2", "W2"),
                   term(-1, 1, "W2", "X"), term(-1, 12))),
        MomentRow((term(1, 0, "X", "Y"), term(-1, 3, "X", "W2"),
                   term(-1, 1, "X", "X"), term(-1, 13))),
        # cross-moment and marginal pins
        MomentRow((term(1, 0, "W1", "W2"), term(-1, 4))),
        MomentRow((term(1, 0, "X", "W1"), term(-1, 5))),
        MomentRow((term(1, 0, "X", "W2"), term(-1, 6))),
        MomentRow((term(1, 0, "W1", "W1"), term(-1, 7))),
        MomentRow((term(1, 0, "W2", "W2"), term(-1, 8))),
        # squared-residual rows pin s2y from either side
        MomentRow((term(1, 0, "Y", "Y"), term(1, 14, "W1", "W1"), term(1, 15, "X", "X"),
                   term(-2, 2, "W1", "Y"), term(-2, 1, "X", "Y"), term(2, 16, "W1", "X"),
                   term(-1, 17), term(-1, 9))),
        MomentRow((term(1, 0, "Y", "Y"), term(1, 18, "W2", "W2"), term(1, 15, "X", "X"),
                   term(-2, 3, "W2", "Y"), term(-2, 1, "X", "Y"), term(2, 19, "W2", "X"),
                   term(-1, 20), term(-1, 9))),
    ]
    f_tar, grad_f_tar = _coordinate_target(9)
    model = MomentModel(
        "ihdp",
        ["beta", "alpha1", "alpha2", "d", "tau1", "tau2", "s2w1", "s2w2", "s2y"],
        rows, phi, dphi, 21, sources, f_tar, grad_f_tar, variance_params=(6, 7, 8),
    )
    spec = ScmSpec("ihdp", p, theta, p["beta"], sources, equations, draw,
                   population=population, metadata=metadata)
    return RegisteredModel("ihdp", spec, model)


def ihdp_covariates(path, rng: np.random.Generator) -> Iterator[tuple[float, float, float]]:
    """Stream of (W1, W2, X) triples: uniform resampling of a covariate file,
    or the calibrated synthetic fallback when no file is given."""
    if path is not None:
        table = load_covariate_table(path)
        nrows = len(table)
        while True:
            w1, w2, x = table[int(rng.integers(0, nrows))]
            yield float(w1), float(w2), float(x)
    else:
        fb = IHDP_FALLBACK
        p2, m = fb["p2"], fb["coupling"]
        s1 = math.sqrt(1.0 - m * m * p2 * (1 - p2))
        while True:
            w2 = 1.0 if rng.random() < p2 else 0.0
            w1 = -m * (w2 - p2) + s1 * rng.standard_normal()
            px = 1.0 / (1.0 + math.exp(-(fb["logit_w1"] * w1 + fb["logit_w2"] * w2)))
            x = 1.0 if rng.random() < px else 0.0
            yield w1, w2, x


# ---------------------------------------------------------------------------
# Vietnam draft / earnings: binary instrument, Wald target


VIETNAM_CONSTANTS = dict(
    mu_z=0.3424, alpha=0.4766, c_star=-1.0502,
    beta=-0.4313, gamma=0.0834, c0=-0.5, s2ey=0.6058,
)


def build_vietnam() -> RegisteredModel:
    p = dict(VIETNAM_CONSTANTS)
    sources = DataSourceSet([("zx", {"Z", "X"}, 1.0), ("zy", {"Z", "Y"}, 1.0)])

    tau1 = float(norm.cdf(p["alpha"] + p["c_star"]))
    tau0 = float(norm.cdf(p["c_star"]))
    mu1 = p["beta"] * tau1 + p["gamma"]
    mu0 = p["beta"] * tau0 + p["gamma"]
    theta = np.array([mu1, mu0, tau1, tau0])

    def draw(gens, n):
        z = (gens["z"].random(n) < p["mu_z"]).astype(float)
        ex = gens["ex"].standard_normal(n)
        x = (p["alpha"] * z + p["c_star"] + ex > 0).astype(float)
        y = (p["beta"] * x + p["gamma"] + p["c0"] * ex
             + gens["ey"].standard_normal(n) * math.sqrt(p["s2ey"]))
        return {"Z": z, "X": x, "Y": y}

    def closed_form_gq(th: np.ndarray):
        mu_z = p["mu_z"]
        m1, m0, t1, t0 = th
        g = np.zeros((4, 4))
        g[0, 0] = -mu_z
        g[1, 1] = -(1 - mu_z)
        g[2, 2] = -mu_z
        g[3, 3] = -(1 - mu_z)
        # per-arm conditional moments of the generator
        pdf1 = float(norm.pdf(p["alpha"] + p["c_star"]))
        pdf0 = float(norm.pdf(p["c_star"]))
        var_y1 = (p["beta"] ** 2 * tau1 * (1 - tau1) + p["c0"] ** 2
                  + 2 * p["beta"] * p["c0"] * pdf1 + p["s2ey"])
        var_y0 = (p["beta"] ** 2 * tau0 * (1 - tau0) + p["c0"] ** 2
                  + 2 * p["beta"] * p["c0"] * pdf0 + p["s2ey"])
        cov1 = p["beta"] * tau1 * (1 - tau1) + p["c0"] * pdf1
        cov0 = p["beta"] * tau0 * (1 - tau0) + p["c0"] * pdf0
        omega = np.zeros((4, 4))
        # shift terms make Ω(θ) exact away from the true parameters too
        omega[0, 0] = mu_z * (var_y1 + (mu1 - m1) ** 2)
        omega[1, 1] = (1 - mu_z) * (var_y0 + (mu0 - m0) ** 2)
        omega[2, 2] = mu_z * (tau1 * (1 - tau1) + (tau1 - t1) ** 2)
        omega[3, 3] = (1 - mu_z) * (tau0 * (1 - tau0) + (tau0 - t0) ** 2)
        omega[0, 2] = omega[2, 0] = mu_z * (cov1 + (mu1 - m1) * (tau1 - t1))
        omega[1, 3] = omega[3, 1] = (1 - mu_z) * (cov0 + (mu0 - m0) * (tau0 - t0))
        return g, omega

    def f_tar(th: np.ndarray) -> float:
        den = th[2] - th[3]
        if den == 0.0 or not math.isfinite(den):
            raise PoleError("Wald denominator tau1 - tau0 is zero")
        return float((th[0] - th[1]) / den)

    def grad_f_tar(th: np.ndarray) -> np.ndarray:
        den = th[2] - th[3]
        if den == 0.0 or not math.isfinite(den):
            raise PoleError("Wald denominator tau1 - tau0 is zero")
        num = th[0] - th[1]
        return np.array([1.0 / den, -1.0 / den, -num / den**2, num / den**2])

    # theta = [mu1, mu0, tau1, tau0]; phi = [1, θ]
    def phi(th):
        return np.array([1.0, th[0], th[1], th[2], th[3]])

    def dphi(th):
        out = np.zeros((5, 4))
        out[1:, :] = np.eye(4)
        return out

    rows = [
        MomentRow((term(1, 0, "Z", "Y"), term(-1, 1, "Z"))),
        MomentRow((term(1, 0, "Y"), term(-1, 0, "Z", "Y"), term(-1, 2), term(1, 2, "Z"))),
        MomentRow((term(1, 0, "Z", "X"), term(-1, 3, "Z"))),
        MomentRow((term(1, 0, "X"), term(-1, 0, "Z", "X"), term(-1, 4), term(1, 4, "Z"))),
    ]
    model = MomentModel("vietnam", ["mu1", "mu0", "tau1", "tau0"], rows, phi, dphi, 5,
                        sources, f_tar, grad_f_tar)
    spec = ScmSpec("vietnam", p, theta, float(f_tar(theta)), sources,
                   ("z", "ex", "ey"), draw, closed_form_gq=closed_form_gq)
    return RegisteredModel("vietnam", spec, model)


# ---------------------------------------------------------------------------


_BUILDERS = {
    "iv": build_iv,
    "two_iv": build_two_iv,
    "confounder_mediator": build_confounder_mediator,
    "ihdp": build_ihdp,
    "vietnam": build_vietnam,
}
_STANDARD_CACHE: dict[str, RegisteredModel] = {}


def get_model(name: str, ihdp_covariates_path=None) -> RegisteredModel:
    if name not in _BUILDERS:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(_BUILDERS)}")
    if name == "ihdp" and ihdp_covariates_path is not None:
        return build_ihdp(ihdp_covariates_path)
    if name not in _STANDARD_CACHE:
        _STANDARD_CACHE[name] = _BUILDERS[name]()
    return _STANDARD_CACHE[name]


def registry(ihdp_covariates_path=None) -> list[RegisteredModel]:
    """All registered environments, IHDP optionally backed by a covariate file."""
    return [get_model(name, ihdp_covariates_path) for name in _BUILDERS]
