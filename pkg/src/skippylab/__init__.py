"""Skipping-policy learning for featurized episodic MDPs."""
from .mdp import Mdp, MemorylessPolicy, evaluate_policy_exact, optimal_values, validate_mdp
from .features import FeatureTable
from .geometry import compute_constants
from .instances import make

__version__ = "0.1.0"
