"""Central-server parameter-swap training, exact distributed least squares,
GP expert committees, and k-windows clustering."""

from .clustering import (
    UNASSIGNED,
    ClusterModel,
    KWindowsConfig,
    RangeTree,
    Window,
    WindowSummary,
    distributed_kwindows,
    kmeans,
    kwindows,
    kwindows_enlarge,
    kwindows_merge,
    kwindows_phase1,
    range_query,
    weighted_linf_dist,
)
from .coordinator import (
    ContactRecord,
    DelayModel,
    ExecutionMode,
    ParameterServer,
    Schedule,
    SecondOrderSummary,
    Trace,
    aggregate_second_order,
    node_second_order,
    run_schedule,
)
from .data import (
    Dataset,
    Partition,
    SplitSpec,
    generate_clusters,
    generate_regression,
    load_csv,
    partition,
    save_csv,
)
from .errors import ConfigError, FactorizationError, ParseError, RankDeficiencyError
from .gp import (
    CombinationRule,
    ExpertPrediction,
    GPModel,
    Kernel,
    combine,
    committee_predict,
    fit_experts,
    gp_fit,
    gp_predict,
    gp_predict_batch,
    log_marginal_likelihood,
)
from .learners import (
    Learner,
    Objective,
    Theta,
    UpdatePolicy,
    centralized_oracle,
    default_step_size,
    design_matrix,
    gradient,
    local_update,
    loss,
    power_iteration,
    prox_l1,
    solve_penalized_normal_equations,
)
from .transport import SwapClient, SwapServer, TransportError

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
