"""
Shared pytest fixtures for dipwell tests.
"""
import pytest
import sys
import os

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import PhysicalParams, TrapParams
from grid import GridSpec


@pytest.fixture
def small_spec():
    """32^3 grid over the default box, small enough for unit tests."""
    return GridSpec(nx=32, ny=32, nz=32, lx=4.0, ly=6.0, lz=3.0, dt=1e-3)


@pytest.fixture
def free_params():
    """Default trap without interactions."""
    return PhysicalParams(na=0.0, nadd=0.0, trap=TrapParams())


@pytest.fixture
def dipolar_params():
    """Repulsive side-by-side configuration on the Na_dd = 0.2 cut."""
    return PhysicalParams(na=0.1, nadd=0.2, trap=TrapParams(), polarization="z")


@pytest.fixture
def symmetric_packets(free_params):
    """Three identical normalized packets sitting in the wells."""
    from variational import initial_state
    return initial_state(free_params, "symmetric")


@pytest.fixture
def toml_config(tmp_path):
    """Write a TOML run configuration and return its path."""
    def _write(text):
        path = tmp_path / "run.toml"
        path.write_text(text)
        return path
    return _write
