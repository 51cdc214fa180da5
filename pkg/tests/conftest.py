import numpy as np
import pytest

from oms.scm_models import RegisteredModel, registry


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: heavier Monte Carlo checks")


@pytest.fixture(scope="session")
def models() -> dict[str, RegisteredModel]:
    return {entry.name: entry for entry in registry()}


def central_difference(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar or vector function of x."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        shift = np.zeros_like(x)
        shift[i] = h * max(1.0, abs(x[i]))
        cols.append((np.asarray(fn(x + shift)) - np.asarray(fn(x - shift)))
                    / (2.0 * shift[i]))
    return np.stack(cols, axis=-1)


def interior_thetas(entry: RegisteredModel, rng: np.random.Generator, count: int) -> np.ndarray:
    """Random parameter points near the truth, inside the box and away from
    the models' singular surfaces (a = 0, tau1 = tau0)."""
    base = entry.scm.true_theta
    out = []
    while len(out) < count:
        theta = base + rng.uniform(-0.1, 0.1, size=base.size)
        theta = np.clip(theta, entry.model.theta_box[:, 0] + 1e-3,
                        entry.model.theta_box[:, 1] - 1e-3)
        if entry.name == "confounder_mediator" and abs(theta[1]) < 0.05:
            continue
        if entry.name == "vietnam" and abs(theta[2] - theta[3]) < 0.02:
            continue
        out.append(theta)
    return np.asarray(out)


def full_observation_values(entry: RegisteredModel, seed: int) -> dict[str, float]:
    """One joint draw carrying every model variable."""
    from oms.scm_models import EpisodeSampler

    sampler = EpisodeSampler(entry.scm, seed)
    joint = sampler.draw_joint(1)
    return {k: float(v[0]) for k, v in joint.items()}
