"""Whittle-index user association for queues at mmWave base stations."""
from .chain import (Action, ChainParams, Kernel, NetworkParams, ParameterError, StabilityWarning,
                    kernel, lyapunov_drift_check, normalize_rates)
from .index import IndexConfig, IndexTable, build_table, index_direct, index_iterate
from .policies import BLOCKED, Policy, PolicyKind, parse_policy, select
from .sim import ArrivalSpec, SimConfig, SimResult, run, run_replicates
from .solver import (ConvergenceError, NumericalError, ThresholdPolicy, evaluate_threshold,
                     optimal_threshold, rvi_optimal, stationary_distribution)

__version__ = "0.1.0"
