"""Simulation of interacting-agent systems and learning of interaction kernels."""

from .core import (
    InitialDistribution,
    ParametricForce,
    SystemSpec,
    TrajectoryDataset,
    TypePartition,
    homogeneous_partition,
    validate_dataset,
)
from .estimator import (
    HypothesisSpace,
    KernelEstimate,
    LearnConfig,
    assemble_normal_system,
    build_hypothesis_space,
    choose_dimension,
    learn_kernels,
    predict_trajectories,
    solve,
)
from .featmap import (
    FeatureSample,
    ReductionMap,
    kernel_values_from_pairs,
    learn_reduced_kernel,
    mpls_reduce,
    pairwise_feature_map,
)
from .gp import GPConfig, GPModel, fit_posterior, nlml, posterior_kernel, representer_check, train
from .measure import (
    EmpiricalRho,
    estimate_coercivity,
    estimate_rho,
    l2rho_distance,
    support_radii,
)
from .metrics import SweepConfig, convergence_sweep, kernel_error, trajectory_error
from .models import KernelFunction, KernelSet, catalog, opinion_kernel, preset, rhs_first_order, rhs_second_order
from .sim import IntegratorConfig, approx_derivatives, generate_dataset, integrate, sample_initial

__version__ = "0.1.0"
