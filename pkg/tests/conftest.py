import os

import pytest

from roadozone.config import FluxModel, load_config

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


@pytest.fixture(scope="session")
def scenario_flux():
    return FluxModel(v_max_kmh=70.0, rho_f_vehkm=19.0, rho_max_vehkm=133.0,
                     w_l=1140.0, w_r=2327.5)


@pytest.fixture(scope="session")
def highway_flux():
    # six-lane highway model (the trajectory-calibrated parameter set)
    return FluxModel(v_max_kmh=65.0, rho_f_vehkm=110.0, rho_max_vehkm=800.0,
                     w_l=6166.875, w_r=13000.0)


@pytest.fixture(scope="session")
def base_config():
    return load_config(os.path.join(CONFIG_DIR, "signal_road_base.yaml"))


@pytest.fixture(scope="session")
def light_config():
    return load_config(os.path.join(CONFIG_DIR, "signal_road_light.yaml"))
