"""Declarative moment models: data sources, observation history, masked moments.

A model supplies its raw moment vector g̃(θ, x), the analytic Jacobian, a
per-source mask derived from which variables each moment needs, the target
functional and its gradient, and a coordinate box for θ.  Moment rows are
declared as sums of terms ``coef * basis_p(θ) * Π x_v``, which gives exact
masked evaluation, vectorized evaluation over record blocks, and cheap
sufficient statistics for the GMM objective from a single declaration.
"""

from __future__ import annotations

import csv
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, IngestionError, SchemaError


@dataclass(frozen=True)
class DataSource:
    name: str
    variables: frozenset[str]
    cost: float


class DataSourceSet:
    """Ordered collection of queryable data sources with per-query costs."""

    def __init__(self, sources: Sequence[tuple[str, Iterable[str], float]] | Sequence[DataSource]):
        parsed = []
        for s in sources:
            if not isinstance(s, DataSource):
                name, variables, cost = s
                s = DataSource(name, frozenset(variables), float(cost))
            parsed.append(s)
        if len(parsed) < 2:
            raise ValueError("need at least two data sources")
        names = [s.name for s in parsed]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate source names: {names}")
        if any(s.cost <= 0 for s in parsed):
            raise ValueError("all source costs must be strictly positive")
        self._sources = tuple(parsed)

    def __len__(self) -> int:
        return len(self._sources)

    def __iter__(self) -> Iterator[DataSource]:
        return iter(self._sources)

    def __getitem__(self, i: int) -> DataSource:
        return self._sources[i]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self._sources)

    @property
    def costs(self) -> np.ndarray:
        return np.array([s.cost for s in self._sources])

    def variables(self, i: int) -> frozenset[str]:
        return self._sources[i].variables


@dataclass(frozen=True)
class SelectionVector:
    """One-hot choice of the data source queried at a single step."""

    index: int
    n_sources: int

    def __post_init__(self):
        if not 0 <= self.index < self.n_sources:
            raise ValueError(f"source index {self.index} outside [0, {self.n_sources})")

    def one_hot(self) -> np.ndarray:
        v = np.zeros(self.n_sources)
        v[self.index] = 1.0
        return v


@dataclass(frozen=True)
class Observation:
    """Values of exactly the variables carried by the queried source."""

    source: SelectionVector
    values: Mapping[str, float]


class History:
    """Ordered record of observations plus per-source tallies.

    Stored as column blocks so estimation can run vectorized over each
    source's records; the insertion order is preserved for replay and CSV
    round-trips.
    """

    def __init__(self, sources: DataSourceSet):
        self.sources = sources
        self._chunks: list[tuple[int, dict[str, np.ndarray], int]] = []  # (source, cols, nrows)
        self._counts = np.zeros(len(sources), dtype=np.int64)
        self._column_cache: dict[int, dict[str, np.ndarray]] = {}
        self._cache_stamp = -1

    def __len__(self) -> int:
        return int(self._counts.sum())

    @property
    def counts(self) -> np.ndarray:
        return self._counts.copy()

    def selection_ratio(self) -> np.ndarray:
        total = self._counts.sum()
        if total == 0:
            raise ValueError("empty history has no selection ratio")
        return self._counts / total

    def append(self, obs: Observation) -> None:
        expected = self.sources.variables(obs.source.index)
        if set(obs.values.keys()) != expected:
            raise SchemaError(
                f"observation variables {sorted(obs.values)} != source "
                f"'{self.sources[obs.source.index].name}' variables {sorted(expected)}"
            )
        cols = {v: np.array([float(obs.values[v])]) for v in sorted(obs.values)}
        self._chunks.append((obs.source.index, cols, 1))
        self._counts[obs.source.index] += 1

    def extend_columns(self, source_index: int, columns: Mapping[str, np.ndarray]) -> None:
        """Append a block of records drawn from one source (batch path)."""
        expected = self.sources.variables(source_index)
        if set(columns.keys()) != expected:
            raise SchemaError(f"column block variables {sorted(columns)} != {sorted(expected)}")
        arrays = {v: np.asarray(columns[v], dtype=float) for v in columns}
        n = len(next(iter(arrays.values())))
        if n == 0:
            return
        if any(len(a) != n for a in arrays.values()):
            raise SchemaError("ragged column block")
        self._chunks.append((source_index, arrays, n))
        self._counts[source_index] += n

    def source_columns(self, source_index: int) -> dict[str, np.ndarray]:
        """Concatenated columns of all records from one source, insertion order."""
        if self._cache_stamp != len(self._chunks):
            self._column_cache.clear()
            self._cache_stamp = len(self._chunks)
        if source_index not in self._column_cache:
            blocks = [cols for idx, cols, _ in self._chunks if idx == source_index]
            variables = sorted(self.sources.variables(source_index))
            if blocks:
                merged = {v: np.concatenate([b[v] for b in blocks]) for v in variables}
            else:
                merged = {v: np.empty(0) for v in variables}
            self._column_cache[source_index] = merged
        return self._column_cache[source_index]

    def records(self) -> Iterator[Observation]:
        n_sources = len(self.sources)
        for idx, cols, n in self._chunks:
            for r in range(n):
                yield Observation(
                    SelectionVector(idx, n_sources),
                    {v: float(a[r]) for v, a in cols.items()},
                )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for obs in self.records():
                row = [obs.source.index] + [f"{v}={obs.values[v]:.17g}" for v in sorted(obs.values)]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path, sources: DataSourceSet) -> "History":
        history = cls(sources)
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                try:
                    idx = int(row[0])
                    values = {}
                    for pair in row[1:]:
                        name, _, raw = pair.partition("=")
                        values[name.strip()] = float(raw)
                except (ValueError, IndexError) as exc:
                    raise IngestionError(f"{path}: bad record at line {lineno}: {row}") from exc
                if not 0 <= idx < len(sources):
                    raise IngestionError(f"{path}: bad source index {idx} at line {lineno}")
                history.append(Observation(SelectionVector(idx, len(sources)), values))
        return history


# ---------------------------------------------------------------------------
# Moment declarations


@dataclass(frozen=True)
class MomentTerm:
    coef: float
    basis: int
    variables: tuple[str, ...]


@dataclass(frozen=True)
class MomentRow:
    terms: tuple[MomentTerm, ...]

    @property
    def variables(self) -> frozenset[str]:
        return frozenset(v for t in self.terms for v in t.variables)


def term(coef: float, basis: int, *variables: str) -> MomentTerm:
    return MomentTerm(float(coef), basis, variables)


class MomentModel:
    """Bundle of moments, Jacobians, masks, target functional, and sources.

    Moment rows are sums of terms ``coef * phi_p(θ) * Π x_v`` over a model
    supplied θ-basis: `phi_fn` evaluates all P basis coefficients and
    `dphi_fn` their analytic (P, D) Jacobian.  The mask is derived
    structurally: moment row j is computable from source i iff the row's
    variables are a subset of the source's variables, so a masked row never
    touches a variable the queried source did not return.
    """

    def __init__(
        self,
        name: str,
        theta_names: Sequence[str],
        rows: Sequence[MomentRow],
        phi_fn: Callable[[np.ndarray], np.ndarray],
        dphi_fn: Callable[[np.ndarray], np.ndarray],
        n_basis: int,
        sources: DataSourceSet,
        f_tar: Callable[[np.ndarray], float],
        grad_f_tar: Callable[[np.ndarray], np.ndarray],
        theta_box: np.ndarray | None = None,
        variance_params: Sequence[int] = (),
    ):
        self.name = name
        self.theta_names = tuple(theta_names)
        self.rows = tuple(rows)
        self._phi_fn = phi_fn
        self._dphi_fn = dphi_fn
        self._n_basis = n_basis
        self.sources = sources
        self.f_tar = f_tar
        self.grad_f_tar = grad_f_tar
        for row in rows:
            if any(t.basis >= n_basis for t in row.terms):
                raise ValueError("moment term references a basis index out of range")

        if theta_box is None:
            theta_box = np.tile([-10.0, 10.0], (len(theta_names), 1))
            for i in variance_params:
                theta_box[i, 0] = 1e-6
        self.theta_box = np.asarray(theta_box, dtype=float)
        if self.theta_box.shape != (len(theta_names), 2):
            raise ValueError("theta_box must be (D, 2)")

        self.mask_matrix = np.zeros((len(sources), len(rows)))
        for i in range(len(sources)):
            src_vars = sources.variables(i)
            for j, row in enumerate(rows):
                if row.variables <= src_vars:
                    self.mask_matrix[i, j] = 1.0
        uncovered = np.nonzero(self.mask_matrix.sum(axis=0) == 0)[0]
        if uncovered.size:
            raise ValueError(f"moment rows {uncovered.tolist()} observable from no source")

    # -- dimensions ---------------------------------------------------------

    @property
    def n_moments(self) -> int:
        return len(self.rows)

    @property
    def n_params(self) -> int:
        return len(self.theta_names)

    @property
    def n_basis(self) -> int:
        return self._n_basis

    # -- θ handling ---------------------------------------------------------

    def check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DomainError(f"theta has shape {theta.shape}, expected ({self.n_params},)")
        lo, hi = self.theta_box[:, 0], self.theta_box[:, 1]
        if np.any(theta < lo) or np.any(theta > hi):
            raise DomainError(f"theta {theta} outside box {self.theta_box.tolist()}")
        return theta

    def phi(self, theta: np.ndarray) -> np.ndarray:
        return self._phi_fn(theta)

    def dphi(self, theta: np.ndarray) -> np.ndarray:
        return self._dphi_fn(theta)

    def mask(self, selection: SelectionVector) -> np.ndarray:
        return self.mask_matrix[selection.index].copy()

    # -- single observation evaluation --------------------------------------

    def g_tilde(self, theta: np.ndarray, values: Mapping[str, float]) -> np.ndarray:
        """Raw moment vector; requires values for every variable used."""
        phi = self.phi(np.asarray(theta, dtype=float))
        out = np.zeros(self.n_moments)
        for j, row in enumerate(self.rows):
            acc = 0.0
            for t in row.terms:
                prod = t.coef * phi[t.basis]
                for v in t.variables:
                    prod *= values[v]
                acc += prod
            out[j] = acc
        return out

    def g_jacobian(self, theta: np.ndarray, values: Mapping[str, float]) -> np.ndarray:
        dphi = self.dphi(np.asarray(theta, dtype=float))
        out = np.zeros((self.n_moments, self.n_params))
        for j, row in enumerate(self.rows):
            for t in row.terms:
                prod = t.coef
                for v in t.variables:
                    prod *= values[v]
                out[j] += prod * dphi[t.basis]
        return out

    # -- vectorized evaluation over column blocks ---------------------------

    def row_block(self, row_indices: np.ndarray, arrays: Mapping[str, np.ndarray],
                  theta: np.ndarray) -> np.ndarray:
        """g̃ rows `row_indices` for every record in `arrays`; shape (n, r)."""
        phi = self.phi(theta)
        n = len(next(iter(arrays.values()))) if arrays else 0
        out = np.zeros((n, len(row_indices)))
        for c, j in enumerate(row_indices):
            for t in self.rows[j].terms:
                prod = np.full(n, t.coef * phi[t.basis])
                for v in t.variables:
                    prod = prod * arrays[v]
                out[:, c] += prod
        return out

    def jacobian_block(self, row_indices: np.ndarray, arrays: Mapping[str, np.ndarray],
                       theta: np.ndarray) -> np.ndarray:
        """Jacobians of the selected rows per record; shape (n, r, D)."""
        dphi = self.dphi(theta)
        n = len(next(iter(arrays.values()))) if arrays else 0
        out = np.zeros((n, len(row_indices), self.n_params))
        for c, j in enumerate(row_indices):
            for t in self.rows[j].terms:
                prod = np.full(n, t.coef)
                for v in t.variables:
                    prod = prod * arrays[v]
                out[:, c, :] += prod[:, None] * dphi[t.basis][None, :]
        return out

    def row_stats(self, row_indices: np.ndarray, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        """Per-basis means S with row_j(θ) mean = (S @ phi(θ))_j; shape (r, P).

        Compresses a record block into sufficient statistics so the GMM
        objective can be evaluated at any θ without touching the records.
        """
        n = len(next(iter(arrays.values()))) if arrays else 0
        out = np.zeros((len(row_indices), self.n_basis))
        for c, j in enumerate(row_indices):
            for t in self.rows[j].terms:
                if t.variables:
                    prod = arrays[t.variables[0]]
                    for v in t.variables[1:]:
                        prod = prod * arrays[v]
                    out[c, t.basis] += t.coef * float(prod.mean()) if n else 0.0
                else:
                    out[c, t.basis] += t.coef
        return out


# ---------------------------------------------------------------------------
# Module-level operations (spec surface)


def masked_moments(model: MomentModel, theta: np.ndarray, obs: Observation) -> np.ndarray:
    """m(s) ⊗ g̃(θ, x): unmasked rows are exactly zero and never evaluated."""
    theta = model.check_theta(theta)
    src_vars = model.sources.variables(obs.source.index)
    if set(obs.values.keys()) != src_vars:
        raise SchemaError(
            f"observation carries {sorted(obs.values)}, source has {sorted(src_vars)}"
        )
    mask = model.mask_matrix[obs.source.index]
    phi = model.phi(theta)
    out = np.zeros(model.n_moments)
    for j in np.nonzero(mask)[0]:
        acc = 0.0
        for t in model.rows[j].terms:
            prod = t.coef * phi[t.basis]
            for v in t.variables:
                prod *= obs.values[v]
            acc += prod
        out[j] = acc
    return out


def masked_jacobian(model: MomentModel, theta: np.ndarray, obs: Observation) -> np.ndarray:
    """Jacobian of masked_moments in θ; unmasked rows are zero."""
    theta = model.check_theta(theta)
    src_vars = model.sources.variables(obs.source.index)
    if set(obs.values.keys()) != src_vars:
        raise SchemaError(
            f"observation carries {sorted(obs.values)}, source has {sorted(src_vars)}"
        )
    mask = model.mask_matrix[obs.source.index]
    dphi = model.dphi(theta)
    out = np.zeros((model.n_moments, model.n_params))
    for j in np.nonzero(mask)[0]:
        for t in model.rows[j].terms:
            prod = t.coef
            for v in t.variables:
                prod *= obs.values[v]
            out[j] += prod * dphi[t.basis]
    return out


def target_value(model: MomentModel, theta: np.ndarray) -> tuple[float, np.ndarray]:
    theta = model.check_theta(theta)
    return float(model.f_tar(theta)), np.asarray(model.grad_f_tar(theta), dtype=float)
