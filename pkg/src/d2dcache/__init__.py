"""Content placement for D2D caching networks: analytic bounds, optimizers and Monte Carlo."""

from .errors import (
    BracketError,
    ConfigError,
    D2DCacheError,
    DiagnosticWarning,
    DomainError,
    NumericError,
    SolverError,
)
from .scenario import PopularityModel, ScenarioConfig, coverage_number_pmf, load_scenario, zipf_pmf

__version__ = "0.1.0"
