"""
Shared fixtures: default settings, a calibrated trap model and a cheap runner
"""
import pytest

from config.settings import build_settings
from models.trap import DriveConfig
from services.experiments import ExperimentRunner
from services.trap_model import calibrate_model


@pytest.fixture
def default_settings(tmp_path):
    """Defaults with the ledger in a throwaway sqlite file"""
    return build_settings(database_url=f"sqlite:///{tmp_path / 'runs.db'}")


@pytest.fixture(scope="session")
def calibration():
    """(TrapModel, CalibrationReport) for the default calibration targets"""
    defaults = build_settings(database_url="sqlite://")
    targets = defaults.calibration.to_targets(defaults.drive.omega_rf, defaults.scan.displacement_generator_vpp)
    return calibrate_model(targets, validity_radius=defaults.trap.validity_radius_um * 1e-6)


@pytest.fixture(scope="session")
def trap_model(calibration):
    return calibration[0]


@pytest.fixture(scope="session")
def omega_rf():
    return build_settings(database_url="sqlite://").drive.omega_rf


@pytest.fixture(scope="session")
def main_drive(omega_rf):
    """200 V on the outer pair only"""
    return DriveConfig.main_only(omega_rf, 200.0)


@pytest.fixture
def runner_factory(tmp_path):
    """Runner over defaults plus nested overrides, e.g. scan={'noiseless': True}"""
    def make(workers=None, **overrides):
        loaded = build_settings(database_url=f"sqlite:///{tmp_path / 'runs.db'}", **overrides)
        return ExperimentRunner(loaded, workers=workers)
    return make
