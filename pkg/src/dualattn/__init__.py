"""Consistent two-layer attention via dual decomposition of a KL projection."""
from .errors import ConvergenceFailure, FormatError, InfeasibleSupport, RejectedInput, TrainingDiverged
from .grid import NeighborhoodMap, ProbabilityMap, SpatialGrid, build_neighborhood, kl_divergence, marginalize

__version__ = "0.1.0"
