"""V-learning: off-policy estimation of randomized treatment policies for
indefinite-horizon mobile-health studies."""

from .basis import BasisKind, FeatureMap, features, fit_feature_map, identity_map
from .data import Dataset, DataError, Trajectory, UtilityKind, UtilitySpec, compute_utilities, load_dataset, write_dataset
from .ggq import GGQFit, QModel, fit_ggq, ggq_policy
from .policy import ConstantPolicy, GreedyPolicy, MixturePolicy, SoftmaxPolicy, epsilon_greedy, uniform_policy
from .propensity import PropensityModel, fit_logistic_propensity, propensity
from .simenv import FiniteMDP, T1DEnv, ToyEnv, generate_offline, make_env, rollout_value
from .vlearn import (
    BellmanSystem,
    PolicyEvaluator,
    SearchConfig,
    assemble_system,
    estimate_value,
    fit_value_model,
    optimize_policy,
    solve_theta,
    variance_estimate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
