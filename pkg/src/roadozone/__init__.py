"""Road traffic, NOx emission, photochemistry and dispersion toolkit."""

from .config import (ChemistryConfig, ConfigError, DispersionConfig,
                     EmissionConfig, FluxModel, RoadGrid, ScenarioConfig,
                     TrafficLightPolicy, TrafficState, load_config,
                     save_config, validate_config)

__all__ = [
    "ChemistryConfig", "ConfigError", "DispersionConfig", "EmissionConfig",
    "FluxModel", "RoadGrid", "ScenarioConfig", "TrafficLightPolicy",
    "TrafficState", "load_config", "save_config", "validate_config",
]

__version__ = "0.1.0"
