"""Flexibility activation signals, resource-dispatch OPF and needs assessment for LV feeders."""

__version__ = "0.1.0"

from .errors import DnflexError  # noqa: E402
from .network import Network, Profiles, builtin_network, builtin_test_feeder  # noqa: E402
from .powerflow import NetworkState, simulate_horizon, solve_power_flow  # noqa: E402

__all__ = [
    "DnflexError",
    "Network",
    "NetworkState",
    "Profiles",
    "builtin_network",
    "builtin_test_feeder",
    "simulate_horizon",
    "solve_power_flow",
]
