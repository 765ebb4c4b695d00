"""Desk-scale laboratory for W1 consistency models on VP probability flows."""
from .schedule import Schedule, TimeGrid, beta_at, build_grid, mean_coeff, std_coeff
from .targets import Dataset, TargetDistribution, forward_marginal, make_dataset, sample_target, second_moment
from .score import (
    AnalyticScore,
    EmpiricalScore,
    PluginScore,
    empirical_score,
    lipschitz_certificate,
    mixture_score_jacobian,
    posterior_mean,
    score_mse,
    train_plugin_score,
)
from .flow import DDPMSolver, FlowStep, SolverDivergence, distill, isolate, push_cloud
from .transport import W1Estimate, w1, w1_1d, w1_assignment, w1_sliced, w1_to_target_1d
from .consistency import (
    ConsistencyNet,
    TrainConfig,
    emulate_baseline,
    loss_cd,
    loss_ct,
    one_step_sample,
    train_consistency,
)

__version__ = "0.1.0"

__all__ = [
    "AnalyticScore", "ConsistencyNet", "DDPMSolver", "Dataset", "EmpiricalScore", "FlowStep", "PluginScore",
    "Schedule", "SolverDivergence", "TargetDistribution", "TimeGrid", "TrainConfig", "W1Estimate",
    "beta_at", "build_grid", "distill", "emulate_baseline", "empirical_score", "forward_marginal", "isolate",
    "lipschitz_certificate", "loss_cd", "loss_ct", "make_dataset", "mean_coeff", "mixture_score_jacobian",
    "one_step_sample", "posterior_mean", "push_cloud", "sample_target", "score_mse", "second_moment",
    "std_coeff", "train_consistency", "train_plugin_score", "w1", "w1_1d", "w1_assignment", "w1_sliced",
    "w1_to_target_1d",
]
