"""Causal similarity-based hierarchical Bayesian neural networks for multi-task regression."""

from .graph import Dag, d_separated, shd, sid
from .harness import ExperimentSpec, run_experiment
from .hbm import HierarchicalParams, TrainerConfig
from .scm import Scm, ToyModelConfig, generate_toy_dataset
from .transport import DistanceMatrix, DistanceSpec, wasserstein

__all__ = ["Dag", "DistanceMatrix", "DistanceSpec", "ExperimentSpec", "HierarchicalParams", "Scm",
           "ToyModelConfig", "TrainerConfig", "d_separated", "generate_toy_dataset", "run_experiment", "shd",
           "sid", "wasserstein"]
