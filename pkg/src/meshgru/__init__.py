"""meshgru: dual-graph recurrent GNN surrogate for hexahedral FE
trajectories, with a synthetic four-point-bending benchmark campaign."""

__version__ = "0.1.0"

from .case_store import CaseTrajectory, NormStats, SplitAssignment  # noqa: F401
from .mesh_graph import DualGraph, build_dual_graph  # noqa: F401
from .model import RolloutResult, SurrogateConfig  # noqa: F401
from .training import LossWeights, Metrics, TrainConfig  # noqa: F401
