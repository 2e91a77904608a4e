"""Scenario parameters, Zipf demand and the Poisson coverage number.

A scenario file holds one ``key = value`` pair per line.  ``#`` starts a
comment.  Keys are the field names of :class:`ScenarioConfig`; values may
be plain numbers or small arithmetic expressions such as ``1/pi`` or
``sqrt(0.5)``.
"""

from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError

__all__ = [
    "ScenarioConfig",
    "PopularityModel",
    "zipf_pmf",
    "coverage_number_pmf",
    "load_scenario",
    "parse_scenario",
    "format_scenario",
    "parse_value",
]

PMF_TOL = 1e-12


@dataclass(frozen=True)
class ScenarioConfig:
    """All model parameters of a D2D caching scenario.

    Parameters
    ----------
    intensity : float
        Density of caching devices per unit area.
    d2d_radius : float
        Communication radius of a device.
    catalog_size : int
        Number of files in the catalog.
    cache_size : int
        Slots per cache, ``1 <= cache_size <= catalog_size``.
    zipf_exponent : float
        Skew of the request distribution, ``>= 0``.
    window_half_width : float
        Simulations use the square ``[-D, D]^2`` with ``D`` this value.
    seed : int
        Root seed of every random stream derived for this scenario.
    """

    intensity: float = 1.0 / math.pi
    d2d_radius: float = 1.0
    catalog_size: int = 2
    cache_size: int = 1
    zipf_exponent: float = 1.0
    window_half_width: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("intensity", "d2d_radius", "window_half_width"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {value!r}")
        if int(self.catalog_size) != self.catalog_size or self.catalog_size < 1:
            raise ConfigError(f"catalog_size must be an integer >= 1, got {self.catalog_size!r}")
        if int(self.cache_size) != self.cache_size or self.cache_size < 1:
            raise ConfigError(f"cache_size must be an integer >= 1, got {self.cache_size!r}")
        if self.cache_size > self.catalog_size:
            raise ConfigError(
                f"cache_size ({self.cache_size}) exceeds catalog_size ({self.catalog_size})"
            )
        if not (math.isfinite(self.zipf_exponent) and self.zipf_exponent >= 0):
            raise ConfigError(f"zipf_exponent must be >= 0, got {self.zipf_exponent!r}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be an unsigned integer, got {self.seed!r}")
        object.__setattr__(self, "catalog_size", int(self.catalog_size))
        object.__setattr__(self, "cache_size", int(self.cache_size))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def coverage_mean(self) -> float:
        """Mean number of devices within the D2D radius, ``lambda_t pi R^2``."""
        return self.intensity * math.pi * self.d2d_radius**2

    def with_changes(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class PopularityModel:
    """Normalized request probabilities, file 1 first."""

    pmf: np.ndarray

    def __post_init__(self):
        pmf = np.array(self.pmf, dtype=float)
        pmf.setflags(write=False)
        if pmf.ndim != 1 or pmf.size == 0:
            raise ConfigError("pmf must be a non-empty vector")
        if np.any(pmf < 0) or abs(pmf.sum() - 1.0) > PMF_TOL:
            raise ConfigError("pmf entries must be nonnegative and sum to 1")
        object.__setattr__(self, "pmf", pmf)

    def __len__(self):
        return self.pmf.size

    def __getitem__(self, index):
        return self.pmf[index]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.pmf, dtype=dtype)


def zipf_pmf(catalog_size: int, zipf_exponent: float) -> PopularityModel:
    """Zipf request law ``p(n) = n^-gamma / sum_m m^-gamma``.

    >>> zipf_pmf(2, 1.0).pmf.round(4).tolist()
    [0.6667, 0.3333]
    """
    if int(catalog_size) != catalog_size or catalog_size < 1:
        raise ConfigError(f"catalog_size must be an integer >= 1, got {catalog_size!r}")
    if not zipf_exponent >= 0:
        raise ConfigError(f"zipf_exponent must be >= 0, got {zipf_exponent!r}")
    ranks = np.arange(1, int(catalog_size) + 1, dtype=float)
    # log-space keeps large exponents from underflowing before normalization
    logw = -zipf_exponent * np.log(ranks)
    w = np.exp(logw - logw.max())
    pmf = w / math.fsum(w)
    return PopularityModel(pmf)


def coverage_number_pmf(config_or_mean, k: int) -> float:
    """Probability that exactly ``k`` devices cover the typical receiver.

    The coverage number is Poisson with mean ``lambda_t pi R^2``.  The
    first argument is either a :class:`ScenarioConfig` or that mean.
    """
    if k < 0 or int(k) != k:
        raise ConfigError(f"k must be a nonnegative integer, got {k!r}")
    mean = config_or_mean.coverage_mean if isinstance(config_or_mean, ScenarioConfig) else float(config_or_mean)
    if mean < 0:
        raise ConfigError("coverage mean must be nonnegative")
    if mean == 0:
        return 1.0 if k == 0 else 0.0
    return float(math.exp(-mean + k * math.log(mean) - gammaln(k + 1)))


# --- scenario files -------------------------------------------------------

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}
_NAMES = {"pi": math.pi, "e": math.e}
_FUNCS = {"sqrt": math.sqrt, "exp": math.exp, "log": math.log}


def _eval_node(node):
    if isinstance(node, ast.Expression):
        return _eval_node(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_node(node.left), _eval_node(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        return _UNARY[type(node.op)](_eval_node(node.operand))
    if isinstance(node, ast.Name) and node.id in _NAMES:
        return _NAMES[node.id]
    if (
        isinstance(node, ast.Call)
        and isinstance(node.func, ast.Name)
        and node.func.id in _FUNCS
        and len(node.args) == 1
        and not node.keywords
    ):
        return _FUNCS[node.func.id](_eval_node(node.args[0]))
    raise ValueError("unsupported expression")


def parse_value(text: str) -> float:
    """Evaluate a numeric literal or a small arithmetic expression."""
    try:
        return _eval_node(ast.parse(text.strip(), mode="eval"))
    except (SyntaxError, ValueError, TypeError, ZeroDivisionError, OverflowError) as exc:
        raise ConfigError(f"cannot parse value {text!r}") from exc


_INT_FIELDS = {"catalog_size", "cache_size", "seed"}
_FIELD_NAMES = [f.name for f in fields(ScenarioConfig)]


def parse_scenario(text: str, **overrides) -> ScenarioConfig:
    """Build a config from scenario-file text; missing keys keep defaults."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _FIELD_NAMES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        number = parse_value(value)
        if key in _INT_FIELDS:
            if float(number) != int(number):
                raise ConfigError(f"line {lineno}: {key} must be an integer")
            number = int(number)
        values[key] = number
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig(**values)


def load_scenario(path, **overrides) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    return parse_scenario(text, **overrides)


def format_scenario(config: ScenarioConfig) -> str:
    return "".join(f"{name} = {getattr(config, name)!r}\n" for name in _FIELD_NAMES)
