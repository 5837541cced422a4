"""Discrete-event simulation of a distributed transactional store with
globally synchronized clocks, plus an offline history checker."""

from .checker import (check_for_mode, check_monotonicity, check_opacity, check_serializable, check_si,
                      check_strict_serializable)
from .counterexample import run_counterexample
from .runner import Cluster, RunConfig, run

__all__ = ["Cluster", "RunConfig", "run", "run_counterexample", "check_for_mode", "check_monotonicity",
           "check_opacity", "check_serializable", "check_si", "check_strict_serializable"]
