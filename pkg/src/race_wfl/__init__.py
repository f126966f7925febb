"""Two-stage resource allocation and learning-aware vehicle selection for
wireless federated learning over a vehicle platoon, with a numeric
verification suite for the underlying convergence theory."""

__version__ = "0.1.0"

from .config import ScenarioConfig, load_config, named_rng  # noqa: F401
from .simulation import World, run_experiment  # noqa: F401
