"""Adaptive early-exit and model-selection policies for inference cascades."""
from .baselines import brute_force_policy, myopic_threshold, single_stage, soft_oracle, uniform_mix
from .estimators import CascadePolicyEstimator, CostSensitiveLinearClassifier, WeightedLogisticClassifier
from .exceptions import CascadeError, ValidationError
from .learners import (
    ActionCostVector,
    TrainConfig,
    WeightedBinarySample,
    predict,
    risk,
    risk_gradient,
    train_cost_sensitive,
    train_weighted_binary,
)
from .policy import OverheadSpec, TrainedPolicy, action_costs, future_time, train_bottom_up
from .runtime import SystemMetrics, compare_terminal_only, evaluate_dataset, route_example, simulate
from .sweep import SweepConfig, SweepResult, emit_report, pareto_filter, run_sweep, select_operating_point
from .traces import (
    EXIT,
    ExampleTrace,
    LossSpec,
    StageRecord,
    SynthConfig,
    Topology,
    TraceDataset,
    generate_synthetic,
    load_topology,
    load_traces,
    reference_config,
    split,
)

__version__ = "0.1.0"
