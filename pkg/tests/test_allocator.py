import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oms.allocator import (
    FeasibleRegion,
    integer_allocate,
    minimize_over_simplex,
    project_to_region,
    simplex_lattice,
    simplex_project,
)
from oms.errors import DegenerateObjectiveError
from oms.scm_models import exact_moment_matrices
from oms.variance_engine import VarianceObjective

vectors = st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=5)


# ---------------------------------------------------------------------------
# simplex_project


def test_project_symmetric_point():
    np.testing.assert_allclose(simplex_project(np.array([0.6, 0.6])), [0.5, 0.5])


def test_project_idempotent_on_simplex():
    v = np.array([0.3, 0.7])
    np.testing.assert_array_equal(simplex_project(v), v)


def test_project_matches_grid_search():
    # dense grid oracle on the 2-simplex
    v = np.array([2.0, -1.0, 0.0])
    got = simplex_project(v)
    grid = simplex_lattice(3, 0.01)
    best = grid[int(np.argmin(np.linalg.norm(grid - v, axis=1)))]
    assert np.linalg.norm(got - best) < 0.02
    np.testing.assert_allclose(got, [1.0, 0.0, 0.0], atol=1e-12)


@given(vectors)
@settings(max_examples=200, deadline=None)
def test_project_lands_on_simplex(v):
    out = simplex_project(np.array(v))
    assert out.min() >= 0.0
    assert abs(out.sum() - 1.0) < 1e-9


@given(vectors)
@settings(max_examples=200, deadline=None)
def test_project_idempotent(v):
    out = simplex_project(np.array(v))
    np.testing.assert_allclose(simplex_project(out), out, atol=1e-12)


@given(st.integers(2, 5), st.data())
@settings(max_examples=200, deadline=None)
def test_project_is_nonexpansive(k, data):
    u = np.array(data.draw(st.lists(st.floats(-5, 5, allow_nan=False),
                                    min_size=k, max_size=k)))
    v = np.array(data.draw(st.lists(st.floats(-5, 5, allow_nan=False),
                                    min_size=k, max_size=k)))
    pu, pv = simplex_project(u), simplex_project(v)
    assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + 1e-12


# ---------------------------------------------------------------------------
# feasible regions / project_to_region


def test_etc_region_projection_boundary():
    region = FeasibleRegion.etc(0.5, np.array([0.5, 0.5]))
    got = project_to_region(np.array([1.0, 0.0]), region)
    np.testing.assert_allclose(got, [0.75, 0.25], atol=1e-12)


def test_round_region_projection():
    region = FeasibleRegion.round_(1, np.array([0.5, 0.5]))
    got = project_to_region(np.array([0.0, 1.0]), region)
    np.testing.assert_allclose(got, [0.25, 0.75], atol=1e-12)


def test_projection_identity_inside_region():
    region = FeasibleRegion.etc(0.4, np.array([0.5, 0.5]))
    inside = region.member(np.array([0.3, 0.7]))
    got = project_to_region(inside, region)
    np.testing.assert_allclose(got, inside, atol=1e-10)


def test_affine_projection_membership():
    rng = np.random.default_rng(1)
    for _ in range(50):
        k = int(rng.integers(2, 4))
        base = simplex_project(rng.uniform(0, 1, k))
        region = FeasibleRegion.etc(float(rng.uniform(0.1, 0.9)), base)
        target = simplex_project(rng.uniform(-1, 2, k))
        point = project_to_region(target, region)
        # the preimage under the affine map must itself be a simplex point
        pre = (point - region.fraction * region.base) / (1.0 - region.fraction)
        assert pre.min() >= -1e-10
        assert abs(pre.sum() - 1.0) < 1e-9


def test_cost_etc_projection_matches_grid_oracle():
    costs = np.array([1.8, 1.0])
    region = FeasibleRegion.cost_etc(0.3, np.array([0.5, 0.5]), costs)
    target = np.array([0.15, 0.85])
    got = project_to_region(target, region)
    # brute-force oracle over the region parametrization
    grid = np.linspace(0, 1, 100_001)
    kappas = np.stack([grid, 1 - grid], axis=1)
    images = region.member_grid(kappas)
    best = images[int(np.argmin(np.linalg.norm(images - target, axis=1)))]
    assert np.linalg.norm(got - best) < 1e-3


def test_etc_region_diameter_shrinks():
    # diameter of the etc region is (1-e) sqrt(2) for two sources
    for e in (0.2, 0.5, 0.8):
        region = FeasibleRegion.etc(e, np.array([0.5, 0.5]))
        corners = region.member_grid(np.array([[1.0, 0.0], [0.0, 1.0]]))
        diameter = np.linalg.norm(corners[0] - corners[1])
        assert diameter == pytest.approx((1 - e) * np.sqrt(2), abs=1e-12)


# ---------------------------------------------------------------------------
# minimize_over_simplex


def test_minimize_known_quadratic():
    target = np.array([0.3, 0.7])
    got = minimize_over_simplex(lambda k: float(np.sum((k - target) ** 2)), 2)
    assert np.linalg.norm(got - target) < 1e-4


def test_minimize_two_iv_corner(models):
    two = models["two_iv"]
    pm = exact_moment_matrices(two.scm, two.model, two.scm.true_theta)
    objective = VarianceObjective(pm, two.model, two.scm.true_theta)
    got = minimize_over_simplex(objective, 2)
    np.testing.assert_allclose(got, [0.0, 1.0], atol=0.01)


def test_minimize_iv_matches_dense_grid(models):
    iv = models["iv"]
    pm = exact_moment_matrices(iv.scm, iv.model, iv.scm.true_theta)
    objective = VarianceObjective(pm, iv.model, iv.scm.true_theta)
    got = minimize_over_simplex(objective, 2)
    grid = np.linspace(0, 1, 10_001)
    values = [objective(np.array([k, 1 - k])) for k in grid]
    best = grid[int(np.argmin(values))]
    assert abs(got[0] - best) < 1e-3
    assert abs(got[0] - 0.36) <= 0.01


def test_minimize_beats_every_lattice_point():
    target = np.array([0.41, 0.13, 0.46])
    objective = lambda k: float(np.sum((k - target) ** 4))
    got = minimize_over_simplex(objective, 3)
    best_value = objective(got)
    for point in simplex_lattice(3, 0.02):
        assert best_value <= objective(point) + 1e-15


def test_minimize_degenerate_objective():
    with pytest.raises(DegenerateObjectiveError):
        minimize_over_simplex(lambda k: float("inf"), 2)


# ---------------------------------------------------------------------------
# integer_allocate


def test_allocate_largest_remainder_tiebreak():
    got = integer_allocate(np.array([0.5, 0.5]), np.zeros(2, dtype=int), 3)
    np.testing.assert_array_equal(got, [2, 1])


def test_allocate_all_mass_to_first():
    got = integer_allocate(np.array([1.0, 0.0]), np.array([0, 5]), 5)
    np.testing.assert_array_equal(got, [5, 0])


def brute_force_allocate(target, counts, n_new):
    total = counts.sum() + n_new
    best, best_err = None, None
    for split in itertools.product(range(n_new + 1), repeat=len(target) - 1):
        if sum(split) > n_new:
            continue
        alloc = np.array(list(split) + [n_new - sum(split)])
        err = np.max(np.abs((counts + alloc) / total - target))
        # ties resolved toward the lowest index = lexicographically largest
        key = (err, tuple(-alloc))
        if best is None or key < (best_err, tuple(-best)):
            best, best_err = alloc, err
    return best


def test_allocate_matches_bruteforce():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        k = 3
        target = simplex_project(rng.uniform(0, 1, k))
        counts = rng.integers(0, 8, k)
        n_new = int(rng.integers(1, 13))
        got = integer_allocate(target, counts, n_new)
        expected = brute_force_allocate(target, counts, n_new)
        assert got.sum() == n_new and np.all(got >= 0)
        np.testing.assert_array_equal(got, expected,
                                      err_msg=f"{target} {counts} {n_new}")


@given(st.integers(2, 4), st.integers(1, 40), st.data())
@settings(max_examples=200, deadline=None)
def test_allocate_conserves_and_nonnegative(k, n_new, data):
    raw = np.array(data.draw(st.lists(st.floats(0, 1, allow_nan=False),
                                      min_size=k, max_size=k)))
    target = simplex_project(raw)
    counts = np.array(data.draw(st.lists(st.integers(0, 30), min_size=k, max_size=k)))
    got = integer_allocate(target, counts, n_new)
    assert got.sum() == n_new
    assert np.all(got >= 0)
