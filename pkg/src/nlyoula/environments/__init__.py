"""The magnetic-suspension and rotary-pendulum tasks."""

from .base import Environment, config_digest, read_env_config
from .cost import CostSpec, quadratic_cost
from .maglev import make_maglev, maglev_cost, mean_position_deviation
from .pendulum import make_pendulum, mean_angle_deviation, pendulum_cost, wrap_angle

_FACTORIES = {"maglev": make_maglev, "pendulum": make_pendulum}


def make_environment(name_or_path: str, overrides: dict | None = None) -> Environment:
    """Build an environment from a bundled name or a TOML file path."""
    cfg = read_env_config(name_or_path, overrides)
    return _FACTORIES[cfg["name"]](cfg)


__all__ = [
    "CostSpec", "Environment", "config_digest", "make_environment", "make_maglev",
    "make_pendulum", "maglev_cost", "mean_angle_deviation", "mean_position_deviation",
    "pendulum_cost", "quadratic_cost", "read_env_config", "wrap_angle",
]
