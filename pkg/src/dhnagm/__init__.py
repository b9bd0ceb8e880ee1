"""Aggregate source-to-load modelling, robust identification and dispatch
for district heating networks."""

from .agm import (AgmModel, PathKernel, derive_agm, eval_rtm, eval_stm, max_coefficient_error,
                  min_samples, path_kernel, predict_rtm, predict_stm, truncate_agm)
from .dispatch import (ChpParams, DispatchProblem, DispatchScenario, DispatchSolution,
                       TemperatureBounds, build_dispatch, compare_models, solve_dispatch, solve_qp)
from .errors import *  # noqa: F401,F403
from .estimation import (EstimatorConfig, FitResult, RegressionProblem, build_regression,
                         enumeration_counts, estimate_agm, estimate_rtm, estimate_stm,
                         huber_objective, huber_weight, irls_fit, mad_scale,
                         solve_constrained_wls)
from .kernels import BACKEND
from .measurements import (MeasurementSet, Metrics, add_gaussian_noise, add_salt_pepper,
                           compute_metrics, read_csv, split, write_csv)
from .network import (Constants, FlowDecomposition, NetworkModel, Node, Pipe, PipeKernelParams,
                      build_network, load_network, pipe_kernel_params, simulate, steady_state,
                      trace_flow_fractions)

__version__ = "0.1.0"
