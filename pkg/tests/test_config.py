"""
Tests for config.py - Run configuration loading, overrides and typed builders.
"""
import pytest
import sys
import os

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import config
from errors import ConfigError


class TestConfigDefaults:
    """Tests for configuration default values."""

    def test_defaults_validate(self):
        """The defaults pass validation unchanged."""
        cfg = config.load_config(None)
        assert cfg == config.DEFAULTS

    def test_default_options_valid(self):
        """Default engine, init and shape are among their options."""
        run = config.DEFAULTS["run"]
        assert run["engine"] in config.ENGINE_OPTIONS
        assert run["init"] in config.INIT_OPTIONS
        assert run["shape"] in config.SHAPE_OPTIONS

    def test_from_variational_not_a_config_init(self):
        """Sampling packets on the grid is not selectable from a file."""
        assert "from_variational" not in config.INIT_OPTIONS

    def test_default_objects(self):
        """The defaults build the documented default objects."""
        cfg = config.load_config(None)
        assert config.to_grid_spec(cfg).shape == (128, 96, 64)
        params = config.to_physical_params(cfg)
        assert params.trap.v0 == 80.0
        assert params.trap.centers == (-1.0, 0.0, 1.0)
        assert config.to_variational_settings(cfg).newton_tol == 1e-9


class TestLoadConfig:
    """Tests for reading TOML files."""

    def test_partial_file_merges_over_defaults(self, toml_config):
        """Keys not in the file keep their defaults."""
        path = toml_config("[physical]\nna = -0.05\nnadd = 0.2\n\n[grid]\nnx = 64\n")
        cfg = config.load_config(path)
        assert cfg["physical"]["na"] == -0.05
        assert cfg["grid"]["nx"] == 64
        assert cfg["grid"]["ny"] == 96
        assert cfg["run"]["engine"] == "grid"

    def test_unknown_key_is_named(self, toml_config):
        """A misspelled key is rejected with its dotted name."""
        path = toml_config("[physical]\nNa = 0.1\n")
        with pytest.raises(ConfigError) as exc:
            config.load_config(path)
        assert exc.value.key == "physical.Na"

    def test_unknown_section(self, toml_config):
        """Unknown sections are rejected."""
        with pytest.raises(ConfigError, match="section"):
            config.load_config(toml_config("[plotting]\ncolor = 'red'\n"))

    def test_wrong_type(self, toml_config):
        """A string where a number belongs is rejected."""
        with pytest.raises(ConfigError) as exc:
            config.load_config(toml_config("[grid]\nnx = 'big'\n"))
        assert exc.value.key == "grid.nx"

    def test_int_accepted_for_float(self, toml_config):
        """Integer literals are fine for float keys."""
        cfg = config.load_config(toml_config("[trap]\nv0 = 60\n"))
        assert cfg["trap"]["v0"] == 60.0
        assert isinstance(cfg["trap"]["v0"], float)

    def test_range_errors_surface(self, toml_config):
        """Values the solvers refuse are config errors."""
        with pytest.raises(ConfigError):
            config.load_config(toml_config("[physical]\nnadd = -0.1\n"))
        with pytest.raises(ConfigError):
            config.load_config(toml_config("[grid]\nnx = 100\n"))

    def test_newton_tol_capped(self, toml_config):
        """Fixed points must reach a residual of 1e-9, so a looser Newton tolerance is refused."""
        with pytest.raises(ConfigError) as exc:
            config.load_config(toml_config("[variational]\nnewton_tol = 1e-8\n"))
        assert exc.value.key == "variational"

    def test_dipolar_cutoff(self, toml_config):
        """grid.dipolar_cutoff reaches the grid spec and must not be negative."""
        cfg = config.load_config(toml_config("[grid]\ndipolar_cutoff = 3.5\n"))
        assert config.to_grid_spec(cfg).dipolar_cutoff == 3.5
        with pytest.raises(ConfigError):
            config.load_config(toml_config("[grid]\ndipolar_cutoff = -1.0\n"))

    def test_explicit_keys(self, toml_config):
        """explicit_keys lists what the file sets, not the defaults."""
        path = toml_config("[run]\nt_end = 7.5\n\n[physical]\nna = 0.1\n")
        assert config.explicit_keys(path) == {"run.t_end", "physical.na"}

    def test_bad_option(self, toml_config):
        """Engine names are checked."""
        with pytest.raises(ConfigError) as exc:
            config.load_config(toml_config("[run]\nengine = 'lattice'\n"))
        assert exc.value.key == "run.engine"

    def test_malformed_toml(self, toml_config):
        """Syntax errors become config errors."""
        with pytest.raises(ConfigError):
            config.load_config(toml_config("[physical\nna = 0.1\n"))

    def test_env_var(self, toml_config, monkeypatch):
        """DIPWELL_CONFIG names the file when no path is given."""
        path = toml_config("[physical]\nna = 0.25\n")
        monkeypatch.setenv(config.CONFIG_ENV_VAR, str(path))
        assert config.load_config()["physical"]["na"] == 0.25


class TestOverrides:
    """Tests for command-line overrides."""

    def test_override_applies(self):
        """Dotted keys replace single values."""
        cfg = config.apply_overrides(config.load_config(None), {"physical.na": 0.3, "run.engine": "variational"})
        assert cfg["physical"]["na"] == 0.3
        assert cfg["run"]["engine"] == "variational"

    def test_none_is_skipped(self):
        """Flags left unset do not override."""
        cfg = config.apply_overrides(config.load_config(None), {"physical.na": None})
        assert cfg["physical"]["na"] == 0.0

    def test_does_not_mutate_input(self):
        """The original dict is left alone."""
        base = config.load_config(None)
        config.apply_overrides(base, {"grid.nx": 64})
        assert base["grid"]["nx"] == 128

    def test_unknown_override(self):
        """Unknown dotted keys are rejected."""
        with pytest.raises(ConfigError) as exc:
            config.apply_overrides(config.load_config(None), {"grid.nw": 3})
        assert exc.value.key == "grid.nw"

    def test_threads_positive(self):
        """At least one worker."""
        with pytest.raises(ConfigError):
            config.apply_overrides(config.load_config(None), {"grid.threads": 0})
