"""Closed-form hit probabilities, densities and bounds for each placement.

Notation used in the docstrings: ``lambda_t`` is the cache intensity, ``R``
the D2D radius, ``A = pi R^2``, ``E = lambda_t A`` the mean coverage
number, ``r_m`` the exclusion radius of file ``m`` and
``C_m = lambda_t pi r_m^2`` the mean number of caches inside it.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, DiagnosticWarning, DomainError
from .numerics import integrate_radial, lambert_w0
from .scenario import PopularityModel, ScenarioConfig

__all__ = [
    "PlacementKind",
    "PlacementPolicy",
    "AnalyticBounds",
    "SufficientCondition",
    "RADIUS_SCALES",
    "retention_probability",
    "retention_mean",
    "union_area",
    "hit_mpc",
    "hit_gcp",
    "hit_mhc_a_bounds",
    "hit_mhc_b",
    "concave_regime",
    "scaled_radii",
    "second_order_product_density",
    "campbell_neighbor_count",
    "mhc_variance",
    "underutilization_ratio",
    "sufficient_condition_holds",
]

POLICY_TOL = 1e-9
BOUNDARY_RTOL = 1e-9
RADIUS_SCALES = ("physical", "quartic")


class PlacementKind(enum.Enum):
    MPC = "MPC"
    GCP = "GCP"
    MHC_A = "MHC_A"
    MHC_B = "MHC_B"

    @property
    def hard_core(self) -> bool:
        return self in (PlacementKind.MHC_A, PlacementKind.MHC_B)


def retention_probability(cbar):
    """Retention probability ``(1 - e^-C) / C`` of Matern II thinning.

    ``cbar`` is the mean number of caches in an exclusion disk.  The
    ``C -> 0`` limit is 1.  Accepts scalars or arrays.
    """
    c = np.asarray(cbar, dtype=float)
    if np.any(c < 0):
        raise DomainError("mean exclusion count must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(c > 1e-8, -np.expm1(-c) / np.where(c > 0, c, 1.0), 1.0 - 0.5 * c)
    q = np.where(np.isinf(c), 0.0, q)
    return float(q) if q.ndim == 0 else q


def retention_mean(p: float) -> float:
    """Inverse of :func:`retention_probability`: the ``C`` with ``q(C) = p``.

    Uses ``C = 1/p + W0(-e^{-1/p}/p)``; the other real branch returns the
    trivial root ``C = 0``.  Close to ``p = 1`` the closed form cancels
    badly, so the residual ``q(C) - p`` is checked and a bisection on the
    monotone map takes over when it exceeds 1e-12.
    """
    p = float(p)
    if not (0.0 < p <= 1.0):
        raise DomainError(f"retention probability must lie in (0, 1], got {p!r}")
    if p == 1.0:
        return 0.0
    inv = 1.0 / p
    # -e^{-1/p}/p computed in log space so tiny p does not underflow to 0 early
    arg = -math.exp(-inv - math.log(p))
    c = inv + lambert_w0(arg)
    if c > 0 and abs(retention_probability(c) - p) <= 1e-12:
        return c
    # q is decreasing on (0, inf) and q(C) >= 1/C - small, so C <= 1/p
    lo, hi = 0.0, inv + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if retention_probability(mid) > p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def union_area(r_m: float, r):
    """Area of the union of two radius-``r_m`` disks whose centres are ``r`` apart.

    Valid for ``0 <= r <= 2 r_m``; beyond that the disks are disjoint.
    """
    r = np.minimum(np.asarray(r, dtype=float), 2.0 * r_m)
    half = r / (2.0 * r_m)
    v = (
        2.0 * math.pi * r_m**2
        - 2.0 * r_m**2 * np.arccos(half)
        + 0.5 * r * np.sqrt(np.maximum(4.0 * r_m**2 - r * r, 0.0))
    )
    return float(v) if v.ndim == 0 else v


@dataclass(frozen=True)
class AnalyticBounds:
    """Lower and upper hit probability; ``exact`` is set when they coincide."""

    lower: float
    upper: float
    exact: Optional[float] = None

    def __post_init__(self):
        if not (0.0 <= self.lower <= self.upper <= 1.0 + 1e-12):
            raise ValueError(f"invalid bounds: lower={self.lower}, upper={self.upper}")

    @classmethod
    def point(cls, value: float) -> "AnalyticBounds":
        v = float(min(max(value, 0.0), 1.0))
        return cls(v, v, v)


@dataclass(frozen=True)
class PlacementPolicy:
    """Per-file caching marginals plus, for hard-core kinds, exclusion radii.

    ``exclusion_radii`` are physical distances.  A file that is never stored
    carries radius ``inf``.  ``retained_intensity`` is ``marginals *
    lambda_t`` and is filled in by the constructors.
    """

    kind: PlacementKind
    marginals: np.ndarray
    exclusion_radii: Optional[np.ndarray] = None
    retained_intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        kind = PlacementKind(self.kind)
        object.__setattr__(self, "kind", kind)
        for name in ("marginals", "exclusion_radii", "retained_intensity"):
            value = getattr(self, name)
            if value is not None:
                arr = np.array(value, dtype=float)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        p = self.marginals
        if p.ndim != 1 or np.any(p < -POLICY_TOL) or np.any(p > 1 + POLICY_TOL):
            raise ConfigError("marginals must be a vector in [0, 1]")
        if kind.hard_core != (self.exclusion_radii is not None):
            raise ConfigError(f"{kind.value} policy: exclusion radii present iff hard-core")
        if self.exclusion_radii is not None:
            if self.exclusion_radii.shape != p.shape or np.any(self.exclusion_radii < 0):
                raise ConfigError("exclusion radii must be nonnegative, one per file")

    def __len__(self):
        return self.marginals.size

    # --- constructors -----------------------------------------------------

    @classmethod
    def mpc(cls, config: ScenarioConfig) -> "PlacementPolicy":
        p = (np.arange(config.catalog_size) < config.cache_size).astype(float)
        return cls(PlacementKind.MPC, p, retained_intensity=p * config.intensity)

    @classmethod
    def gcp(cls, config: ScenarioConfig, marginals) -> "PlacementPolicy":
        p = np.asarray(marginals, dtype=float)
        return cls(PlacementKind.GCP, p, retained_intensity=p * config.intensity)

    @classmethod
    def hard_core(cls, config: ScenarioConfig, radii, kind=PlacementKind.MHC_A) -> "PlacementPolicy":
        """Policy from physical exclusion radii; marginals follow from retention."""
        r = np.asarray(radii, dtype=float)
        p = retention_probability(config.intensity * math.pi * r**2)
        p = np.atleast_1d(p)
        return cls(kind, p, r, p * config.intensity)

    # --- checks -----------------------------------------------------------

    def validate(self, config: ScenarioConfig) -> "PlacementPolicy":
        """Check the policy against a scenario; returns ``self`` for chaining."""
        if self.marginals.size != config.catalog_size:
            raise ConfigError(
                f"policy has {self.marginals.size} files, scenario has {config.catalog_size}"
            )
        if self.marginals.sum() > config.cache_size + POLICY_TOL:
            raise ConfigError(
                f"marginals sum to {self.marginals.sum():.12g} > cache size {config.cache_size}"
            )
        if self.retained_intensity is not None and not np.allclose(
            self.retained_intensity, self.marginals * config.intensity, rtol=0, atol=POLICY_TOL
        ):
            raise ConfigError("retained intensity differs from marginals * intensity")
        if self.exclusion_radii is not None:
            r = self.exclusion_radii
            finite = np.isfinite(r)
            expected = np.zeros_like(r)
            expected[finite] = retention_probability(config.intensity * math.pi * r[finite] ** 2)
            if np.any(np.abs(expected - self.marginals) > POLICY_TOL):
                raise ConfigError("marginals do not match the retention probability of the radii")
        return self


def _pmf(popularity) -> np.ndarray:
    if isinstance(popularity, PopularityModel):
        return popularity.pmf
    return np.asarray(popularity, dtype=float)


def _check_sizes(config, pmf, vec, what):
    if pmf.size != config.catalog_size or np.shape(vec) != pmf.shape:
        raise ConfigError(f"{what}: expected {config.catalog_size} entries per file")


def _linear_term(x: np.ndarray, label: str) -> np.ndarray:
    over = x > 1.0
    if np.any(over):
        warnings.warn(
            f"{label}: linear-regime hit term exceeds 1 for files "
            f"{(np.flatnonzero(over) + 1).tolist()}; clamped",
            DiagnosticWarning,
            stacklevel=3,
        )
    return np.minimum(x, 1.0)


def hit_mpc(config: ScenarioConfig, popularity) -> AnalyticBounds:
    """Most-popular placement: ``(1 - e^-E) * sum_{m <= N} p_r(m)``."""
    pmf = _pmf(popularity)
    covered = -math.expm1(-config.coverage_mean)
    return AnalyticBounds.point(covered * math.fsum(pmf[: config.cache_size]))


def hit_gcp(config: ScenarioConfig, popularity, marginals) -> AnalyticBounds:
    """Independent placement: ``sum_m p_r(m) (1 - exp(-E p_c(m)))``."""
    pmf = _pmf(popularity)
    p = np.asarray(marginals, dtype=float)
    _check_sizes(config, pmf, p, "hit_gcp")
    if np.any(p < 0) or np.any(p > 1 + POLICY_TOL):
        raise DomainError("marginals must lie in [0, 1]")
    return AnalyticBounds.point(math.fsum(pmf * -np.expm1(-config.coverage_mean * p)))


def _retention_means(config, retained_intensity) -> np.ndarray:
    p = np.asarray(retained_intensity, dtype=float) / config.intensity
    # intensities a rounding error above lambda_t count as fully retained
    return np.array([retention_mean(min(x, 1.0)) if x > 0 else math.inf for x in p])


def concave_regime(config: ScenarioConfig, retained_intensity, radius_scale: str = "physical"):
    """Boolean mask of files whose exclusion radius is below ``R``.

    With ``radius_scale="physical"`` the radius is ``sqrt(C / (lambda_t pi))``.
    ``"quartic"`` measures it as ``C^{1/4} / sqrt(lambda_t pi)`` instead,
    i.e. the file is in the concave regime iff ``C < E^2``.  Radii equal to
    ``R`` (to 1e-9 relative in ``C``) fall in the linear regime.
    """
    if radius_scale not in RADIUS_SCALES:
        raise ConfigError(f"radius_scale must be one of {RADIUS_SCALES}, got {radius_scale!r}")
    cbar = _retention_means(config, retained_intensity)
    limit = config.coverage_mean if radius_scale == "physical" else config.coverage_mean**2
    return cbar < limit * (1.0 - BOUNDARY_RTOL)


def scaled_radii(config: ScenarioConfig, retained_intensity, radius_scale: str = "physical"):
    """Exclusion radii implied by retained intensities on the chosen scale."""
    cbar = _retention_means(config, retained_intensity)
    lt_pi = config.intensity * math.pi
    if radius_scale == "physical":
        return np.sqrt(cbar / lt_pi)
    if radius_scale == "quartic":
        return cbar**0.25 / math.sqrt(lt_pi)
    raise ConfigError(f"radius_scale must be one of {RADIUS_SCALES}, got {radius_scale!r}")


def hit_mhc_a_bounds(
    config: ScenarioConfig,
    popularity,
    policy: PlacementPolicy,
    radius_scale: str = "physical",
    upper_measure: str = "area",
) -> AnalyticBounds:
    """Lower and upper bounds on the hard-core hit probability.

    Files in the concave regime contribute ``p_r(m) (1 - exp(-lambda_m A))``
    to the lower bound and files in the linear regime ``p_r(m) lambda_m A``
    (clamped at 1 with a :class:`DiagnosticWarning`).  The upper bound adds,
    for every concave file, ``p_r(m) / lambda_t`` times the integral of the
    second-order product density between ``r_m`` and ``R``.

    Parameters
    ----------
    radius_scale : {"physical", "quartic"}
        How the regime split is decided, see :func:`concave_regime`.
    upper_measure : {"area", "line"}
        ``"area"`` integrates with the ``2 pi x`` area element,
        ``"line"`` uses the plain 1-D integral.
    """
    pmf = _pmf(popularity)
    lam = policy.retained_intensity
    if lam is None or policy.exclusion_radii is None:
        raise ConfigError("hit_mhc_a_bounds needs a hard-core policy with radii and intensities")
    _check_sizes(config, pmf, lam, "hit_mhc_a_bounds")
    if upper_measure not in ("area", "line"):
        raise ConfigError(f"upper_measure must be 'area' or 'line', got {upper_measure!r}")
    area = math.pi * config.d2d_radius**2
    concave = concave_regime(config, lam, radius_scale)
    lower_terms = np.where(
        concave, -np.expm1(-lam * area), _linear_term(np.where(concave, 0.0, lam * area), "hit_mhc_a_bounds")
    )
    lower = math.fsum(pmf * lower_terms)

    corrections = []
    for m in np.flatnonzero(concave):
        r_m = policy.exclusion_radii[m]
        if pmf[m] == 0 or r_m >= config.d2d_radius:
            continue
        if r_m == 0:
            # no exclusion: every cache is retained, pairs are Poisson
            rho_int = config.intensity**2 * (
                area if upper_measure == "area" else config.d2d_radius
            )
        elif upper_measure == "area":
            rho_int = integrate_radial(
                lambda x, r_m=r_m: second_order_product_density(config, r_m, x),
                r_m,
                config.d2d_radius,
                breakpoints=(2 * r_m,),
            )
        else:
            rho_int = _integrate_line(config, r_m, r_m, config.d2d_radius)
        corrections.append(pmf[m] * rho_int / config.intensity)
    upper = min(1.0, lower + math.fsum(corrections))
    lower = min(max(lower, 0.0), 1.0)
    return AnalyticBounds(lower, max(upper, lower), lower if upper == lower else None)


def _integrate_line(config, r_m, a, b):
    from scipy import integrate

    cuts = sorted({a, b, *(p for p in (2 * r_m,) if a < p < b)})
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        total += integrate.quad(
            lambda x: second_order_product_density(config, r_m, x), lo, hi, epsrel=1e-10, limit=200
        )[0]
    return total


def hit_mhc_b(config: ScenarioConfig, popularity, marginals_gcp, radii_b) -> AnalyticBounds:
    """Hit probability of the hard-core placement matched to GCP marginals.

    Files with radius below ``R`` contribute ``p_r(m) (1 - exp(-E p_G(m)))``
    and the rest ``p_r(m) E p_G(m)``, clamped at 1.
    """
    pmf = _pmf(popularity)
    p = np.asarray(marginals_gcp, dtype=float)
    r = np.asarray(radii_b, dtype=float)
    _check_sizes(config, pmf, p, "hit_mhc_b")
    x = config.coverage_mean * p
    concave = r < config.d2d_radius
    terms = np.where(concave, -np.expm1(-x), _linear_term(np.where(concave, 0.0, x), "hit_mhc_b"))
    return AnalyticBounds.point(math.fsum(pmf * terms))


def second_order_product_density(config: ScenarioConfig, r_m: float, r):
    """Second-order product density of the Matern II process of one file.

    Zero inside the hard core ``r <= r_m``, ``lambda_m^2`` beyond ``2 r_m``
    and in between

        [2 V (1 - e^{-C}) - 2 pi r_m^2 (1 - e^{-lambda_t V})]
        / [pi r_m^2 V (V - pi r_m^2)]

    with ``V`` the union area of two exclusion disks.  Vectorized in ``r``.
    """
    if not r_m > 0:
        raise DomainError(f"exclusion radius must be positive, got {r_m!r}")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("distance must be nonnegative")
    lt = config.intensity
    cbar = lt * math.pi * r_m**2
    lam = lt * retention_probability(cbar)
    # scale-free form: w = V / (pi r_m^2) depends on r / r_m only, so tiny
    # radii neither underflow nor cancel
    with np.errstate(over="ignore"):
        s = np.clip(r / r_m, 1.0, 2.0)
    w = 1.0 + (math.pi - 2.0 * np.arccos(0.5 * s) + 0.5 * s * np.sqrt(np.maximum(4.0 - s * s, 0.0))) / math.pi
    out = np.where(r <= r_m, 0.0, np.where(r >= 2.0 * r_m, lam * lam, lt * lt * _middle_ratio(cbar, w)))
    return float(out) if out.ndim == 0 else out


def _middle_ratio(cbar: float, w):
    """``rho / lambda_t^2`` between ``r_m`` and ``2 r_m`` for union ratio ``w``.

    Equals ``2 [w (1 - e^{-C}) - (1 - e^{-C w})] / (C^2 w (w - 1))``; below
    ``C = 1e-3`` the power series in ``C`` replaces it.
    """
    if cbar < 1e-3:
        total = np.zeros_like(w)
        geometric = np.ones_like(w)  # (w^{k-1} - 1) / (w - 1)
        for k in range(2, 10):
            total += (-1) ** k * cbar ** (k - 2) * geometric / math.factorial(k)
            geometric = geometric * w + 1.0
        return 2.0 * total
    num = w * -math.expm1(-cbar) + np.expm1(-cbar * w)
    return 2.0 * num / (cbar * cbar * w * (w - 1.0))


def campbell_neighbor_count(config: ScenarioConfig, r_m: float) -> float:
    """``lambda_t^{-1}`` times the integral of the product density over ``B(0, R)``."""
    big_r = config.d2d_radius
    if big_r <= r_m:
        return 0.0
    total = integrate_radial(
        lambda x: second_order_product_density(config, r_m, x),
        r_m,
        big_r,
        breakpoints=(2 * r_m,),
    )
    return total / config.intensity


def mhc_variance(config: ScenarioConfig, r_m: float) -> float:
    """Per-unit-area count variance of the hard-core process of one file.

    ``lambda_m - 4 lambda_m (1 - e^{-C}) + 2 pi int_{r_m}^{2 r_m} rho(r) r dr``.
    """
    if not r_m > 0:
        raise DomainError(f"exclusion radius must be positive, got {r_m!r}")
    cbar = config.intensity * math.pi * r_m**2
    lam = config.intensity * retention_probability(cbar)
    pair = integrate_radial(lambda x: second_order_product_density(config, r_m, x), r_m, 2 * r_m)
    return lam - 4.0 * lam * -math.expm1(-cbar) + pair


def underutilization_ratio(config: ScenarioConfig, policy: PlacementPolicy) -> float:
    """Mean number of stored copies in ``B(0, R)`` over ``N E``.

    ``E[C_m] = lambda_m A`` for ``r_m >= R`` and
    ``(1 - e^{-C_m}) (R / r_m)^2`` for ``r_m < R``.
    """
    if not policy.kind.hard_core:
        raise ConfigError("underutilization_ratio applies to hard-core policies")
    big_r = config.d2d_radius
    area = math.pi * big_r**2
    expected = []
    for lam, r_m in zip(policy.retained_intensity, policy.exclusion_radii):
        if r_m >= big_r or r_m == 0:
            expected.append(lam * area)
        else:
            cbar = config.intensity * math.pi * r_m**2
            expected.append(-math.expm1(-cbar) * (big_r / r_m) ** 2)
    return math.fsum(expected) / (config.cache_size * config.coverage_mean)


class SufficientCondition(NamedTuple):
    per_file: np.ndarray
    feasible: bool

    @property
    def holds(self) -> bool:
        return bool(self.feasible and np.all(self.per_file))


def sufficient_condition_holds(
    config: ScenarioConfig, policy_mhc: PlacementPolicy, marginals_gcp, tol: float = 1e-12
) -> SufficientCondition:
    """Per-file check that the hard-core intensity beats the GCP marginal.

    Requires ``lambda_m >= lambda_t p_G(m)`` when ``r_m < R`` and
    ``lambda_m >= (1 - exp(-E p_G(m))) / A`` otherwise.  ``feasible`` tells
    whether the total intensity respects the cache budget ``N lambda_t``.
    """
    p = np.asarray(marginals_gcp, dtype=float)
    lam = policy_mhc.retained_intensity
    r = policy_mhc.exclusion_radii
    area = math.pi * config.d2d_radius**2
    need = np.where(
        r < config.d2d_radius,
        config.intensity * p,
        -np.expm1(-config.coverage_mean * p) / area,
    )
    per_file = lam >= need - tol
    feasible = bool(lam.sum() <= config.cache_size * config.intensity * (1 + POLICY_TOL))
    return SufficientCondition(per_file, feasible)
