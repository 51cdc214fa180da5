"""Online moment selection: adaptive data-source querying for GMM targets."""

from .allocator import (
    FeasibleRegion,
    integer_allocate,
    minimize_over_simplex,
    project_to_region,
    simplex_project,
)
from .gmm_engine import GmmEstimate, WeightSpec, empirical_objective, estimate, estimate_omega
from .harness import ExperimentConfig, RegretRow, RegretTable, emit_outputs, mse_curve, run_episode
from .moment_model import (
    DataSource,
    DataSourceSet,
    History,
    MomentModel,
    Observation,
    SelectionVector,
    masked_jacobian,
    masked_moments,
    target_value,
)
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
from .scm_models import (
    EpisodeSampler,
    RegisteredModel,
    ScmSpec,
    exact_moment_matrices,
    get_model,
    ihdp_covariates,
    registry,
    sample,
)
from .variance_engine import (
    PluginMatrices,
    asymptotic_sigma,
    budgeted_objective,
    plugin_matrices,
    target_variance,
)

__all__ = [name for name in dir() if not name.startswith("_")]
