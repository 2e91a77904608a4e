"""Placement design problems: GCP marginals, hard-core intensities and radii.

``solve_hcp`` maximizes the hard-core lower bound exactly by enumerating
which files sit in the concave regime and water-filling the intensity
budget inside each assignment.  ``closed_form_hcp`` is the Lambert-W
fixed point with a single regime boundary index, kept for comparison.
``numeric_oracle_hcp`` is a slow direct maximizer used to cross-check both.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .analytic import (
    PlacementKind,
    PlacementPolicy,
    RADIUS_SCALES,
    concave_regime,
    retention_mean,
    retention_probability,
    scaled_radii,
)
from .errors import BracketError, ConfigError, DiagnosticWarning, DomainError, SolverError
from .numerics import ROOT_TOL, Bracket, expand_bracket, find_root, lambert_w0
from .scenario import PopularityModel, ScenarioConfig

__all__ = [
    "GcpSolution",
    "HcpSolution",
    "solve_gcp",
    "solve_hcp",
    "closed_form_hcp",
    "numeric_oracle_hcp",
    "invert_retention",
    "solve_mhc_b",
    "lower_bound_objective",
    "RADIUS_CAP_FACTOR",
]

log = logging.getLogger(__name__)

SNAP_TOL = 1e-10
RADIUS_CAP_FACTOR = 1e6
# full enumeration of concave-regime assignments up to this many files
MAX_ENUMERATED_FILES = 12


def _pmf(popularity) -> np.ndarray:
    if isinstance(popularity, PopularityModel):
        return popularity.pmf
    return np.asarray(popularity, dtype=float)


# --- independent placement -------------------------------------------------


@dataclass(frozen=True)
class GcpSolution:
    """Optimal independent-placement marginals and the dual variable ``mu_star``."""

    marginals: np.ndarray
    mu_star: float

    def policy(self, config: ScenarioConfig) -> PlacementPolicy:
        return PlacementPolicy.gcp(config, self.marginals)


def gcp_marginals(mu: float, pmf: np.ndarray, coverage_mean: float) -> np.ndarray:
    """Marginals maximizing the Lagrangian at dual value ``mu``.

    ``0`` when ``mu >= p_r E``, ``1`` when ``mu <= p_r E e^{-E}`` and
    ``ln(p_r E / mu) / E`` in between.
    """
    e = coverage_mean
    with np.errstate(divide="ignore"):
        p = (np.log(pmf * e) - math.log(mu)) / e
    p = np.clip(p, 0.0, 1.0)
    p[np.abs(p) <= SNAP_TOL] = 0.0
    p[np.abs(p - 1.0) <= SNAP_TOL] = 1.0
    return p


def solve_gcp(config: ScenarioConfig, popularity) -> GcpSolution:
    """Optimal marginals of independent placement under the cache budget.

    The dual variable is found by bracketed root finding on
    ``sum_m p(mu) = N`` in ``log mu``, since ``mu`` underflows quickly as
    the coverage mean grows.  When every marginal ends up at 0 or 1 the
    constraint holds on a whole interval of ``mu``; the geometric midpoint
    of that interval is reported.
    """
    pmf = _pmf(popularity)
    if pmf.size != config.catalog_size:
        raise ConfigError("popularity length differs from catalog_size")
    e = config.coverage_mean
    n = config.cache_size
    positive = pmf > 0
    if n >= pmf.size:
        p = np.ones_like(pmf)
        return GcpSolution(p, float(pmf[positive].min() * e * math.exp(-e)))
    if np.count_nonzero(positive) <= n:
        # every requested file fits; the rest never helps
        p = positive.astype(float)
        hi = float(pmf[positive].min() * e * math.exp(-e))
        return GcpSolution(p, hi)

    log_pe = np.log(pmf[positive] * e)

    def residual(t):
        return float(gcp_marginals(math.exp(t), pmf, e).sum() - n)

    lo_t = float(log_pe.min() - e - 1.0)
    hi_t = float(log_pe.max() + 1.0)
    try:
        bracket = Bracket.of(residual, hi_t, lo_t)
    except BracketError as exc:
        raise SolverError(f"cannot bracket mu in [exp({lo_t}), exp({hi_t})]") from exc
    t = find_root(residual, bracket, tol=ROOT_TOL)
    p = gcp_marginals(math.exp(t), pmf, e)
    mu = math.exp(t)

    if np.all((p == 0.0) | (p == 1.0)):
        zero = (p == 0.0) & positive
        lo = float((pmf[zero] * e).max()) if zero.any() else 0.0
        hi = float((pmf[p == 1.0] * e * math.exp(-e)).min())
        if lo > 0 and hi >= lo:
            mu = math.sqrt(lo * hi)
        elif hi > 0:
            mu = hi
    return GcpSolution(p, mu)


# --- retention inversion --------------------------------------------------


def invert_retention(config: ScenarioConfig, marginal: float) -> float:
    """Exclusion radius whose Matern II retention probability is ``marginal``.

    Radii beyond ``1e6 R`` are replaced by that cap and a
    :class:`DiagnosticWarning` is emitted.
    """
    p = float(marginal)
    if not (0.0 < p <= 1.0):
        raise DomainError(f"marginal must lie in (0, 1], got {marginal!r}")
    r = math.sqrt(retention_mean(p) / (config.intensity * math.pi))
    cap = RADIUS_CAP_FACTOR * config.d2d_radius
    if r > cap:
        warnings.warn(
            f"exclusion radius {r:.6g} for marginal {p:.3g} capped at {cap:.6g}",
            DiagnosticWarning,
            stacklevel=2,
        )
        return cap
    return r


def _physical_radii(config: ScenarioConfig, marginals) -> np.ndarray:
    return np.array(
        [invert_retention(config, min(p, 1.0)) if p > 0 else math.inf for p in marginals]
    )


def solve_mhc_b(config: ScenarioConfig, popularity) -> PlacementPolicy:
    """Hard-core policy with the GCP-optimal marginals.

    Files with marginal 0 get an infinite radius and are never stored.
    """
    gcp = solve_gcp(config, popularity)
    radii = _physical_radii(config, gcp.marginals)
    return PlacementPolicy(
        PlacementKind.MHC_B, gcp.marginals, radii, gcp.marginals * config.intensity
    )


# --- hard-core placement ---------------------------------------------------


@dataclass(frozen=True)
class HcpSolution:
    """Retained intensities and exclusion radii of a hard-core design.

    ``radii`` are on ``radius_scale``.  ``c_star`` is the multiplier of the
    intensity budget (``nan`` when the solver has none).  ``m_c`` is the
    1-based index of the last file in the concave regime, 0 if none.
    ``objective`` is the lower bound at the solution.
    """

    retained_intensity: np.ndarray
    radii: np.ndarray
    c_star: float
    m_c: int
    objective: float
    radius_scale: str = "physical"

    def policy(self, config: ScenarioConfig) -> PlacementPolicy:
        """Hard-core policy with physical radii for these intensities."""
        p = np.clip(self.retained_intensity / config.intensity, 0.0, 1.0)
        radii = _physical_radii(config, p)
        return PlacementPolicy(PlacementKind.MHC_A, p, radii, p * config.intensity)


def lower_bound_objective(
    config: ScenarioConfig, pmf, retained_intensity, radius_scale: str = "physical"
) -> float:
    """Lower bound on the hard-core hit probability as a function of intensities."""
    lam = np.asarray(retained_intensity, dtype=float)
    area = math.pi * config.d2d_radius**2
    concave = concave_regime(config, lam, radius_scale)
    terms = np.where(concave, -np.expm1(-lam * area), np.minimum(lam * area, 1.0))
    return math.fsum(np.asarray(pmf) * terms)


def _boundary_intensity(config: ScenarioConfig, radius_scale: str) -> float:
    """Retained intensity at which the exclusion radius equals ``R``."""
    e = config.coverage_mean
    cbar = e if radius_scale == "physical" else e * e
    return config.intensity * retention_probability(cbar)


def _last_concave(mask) -> int:
    idx = np.flatnonzero(mask)
    return int(idx[-1] + 1) if idx.size else 0


def _water_fill(pmf, concave, area, lam_b, lam_t, cap_lin, budget):
    """Best intensities for a fixed regime assignment, and the multiplier.

    Concave files take ``clip(ln(p A / nu) / A, lam_b, lam_t)``; linear files
    take ``cap_lin`` when ``p A > nu`` and nothing when ``p A < nu``.  Linear
    files tied with ``nu`` share whatever budget remains.
    Returns ``None`` when the concave files cannot all exceed ``lam_b``.
    """
    n_conc = int(concave.sum())
    if n_conc * lam_b > budget * (1 + 1e-12):
        return None
    slope = pmf * area
    upper = np.where(concave, lam_t, cap_lin)
    if upper.sum() <= budget:
        return upper.copy(), 0.0

    def alloc(nu):
        lam = np.where(slope > nu, cap_lin, 0.0)
        if n_conc:
            with np.errstate(divide="ignore"):
                c = np.log(slope / nu) / area
            lam = np.where(concave, np.clip(c, lam_b, lam_t), lam)
        return lam

    def excess(t):
        return float(alloc(math.exp(t)).sum() - budget)

    pos = slope[slope > 0]
    if pos.size == 0:
        return np.where(concave, lam_b, 0.0), 0.0
    lo_t = float(np.log(pos.min())) - area * lam_t - 1.0
    hi_t = float(np.log(pos.max())) + 1.0
    if excess(hi_t) >= 0:
        # only the concave floors remain and they already fill the budget
        return alloc(math.exp(hi_t)), math.exp(hi_t)
    # bisection in log nu; the excess is decreasing with jumps
    for _ in range(200):
        mid = 0.5 * (lo_t + hi_t)
        if excess(mid) > 0:
            lo_t = mid
        else:
            hi_t = mid
        if hi_t - lo_t < 1e-14 * max(1.0, abs(hi_t)):
            break
    nu = math.exp(hi_t)
    lam = alloc(nu)
    remaining = budget - lam.sum()
    if remaining > 0:
        # a jump straddles the budget: the linear files at the breakpoint split it
        tied = np.flatnonzero(~concave & np.isclose(slope, nu, rtol=1e-9, atol=0) & (lam == 0))
        if tied.size == 0:
            tied = np.flatnonzero(~concave & (slope <= math.exp(lo_t)) & (slope >= nu) & (lam == 0))
        if tied.size:
            # equal shares keep equally popular files symmetric
            share = min(cap_lin, remaining / tied.size)
            lam[tied] = share
            remaining -= share * tied.size
        if remaining > 0 and n_conc:
            # concave files in the interior absorb rounding leftovers
            interior = concave & (lam < lam_t)
            if interior.any():
                lam[interior] += remaining / interior.sum()
    return lam, nu


def _assignments(m: int):
    if m <= MAX_ENUMERATED_FILES:
        for bits in itertools.product((False, True), repeat=m):
            yield np.array(bits)
    else:
        for k in range(m + 1):
            yield np.arange(m) < k


def solve_hcp(config: ScenarioConfig, popularity, radius_scale: str = "physical") -> HcpSolution:
    """Intensities and radii maximizing the hard-core lower bound.

    Every assignment of files to the concave regime (radius below ``R``)
    or the linear regime is tried for up to 12 files; above that only
    assignments where the concave files are the most popular ones are
    tried.  Within an assignment the problem is separable and concave and
    is solved by water-filling on the budget multiplier.

    Parameters
    ----------
    radius_scale : {"physical", "quartic"}
        Rule deciding the regime of a file, see
        :func:`d2dcache.analytic.concave_regime`.  ``radii`` in the result
        are reported on the same scale.
    """
    if radius_scale not in RADIUS_SCALES:
        raise ConfigError(f"radius_scale must be one of {RADIUS_SCALES}")
    pmf = _pmf(popularity)
    if pmf.size != config.catalog_size:
        raise ConfigError("popularity length differs from catalog_size")
    lam_t = config.intensity
    area = math.pi * config.d2d_radius**2
    budget = config.cache_size * lam_t
    lam_b = _boundary_intensity(config, radius_scale)
    cap_lin = min(lam_b, 1.0 / area)

    best = None
    for concave in _assignments(pmf.size):
        out = _water_fill(pmf, concave, area, lam_b, lam_t, cap_lin, budget)
        if out is None:
            continue
        lam, nu = out
        value = lower_bound_objective(config, pmf, lam, radius_scale)
        if best is None or value > best[0] + 1e-15:
            best = (value, lam, nu)
    if best is None:
        raise SolverError("no feasible regime assignment")
    value, lam, nu = best
    mask = concave_regime(config, lam, radius_scale)
    radii = scaled_radii(config, lam, radius_scale)
    return HcpSolution(lam, radii, nu, _last_concave(mask), value, radius_scale)


def closed_form_hcp(
    config: ScenarioConfig, popularity, radius_scale: str = "physical", max_iter: int = 100
) -> HcpSolution:
    """Lambert-W design with a single regime boundary index ``m_c``.

    Files up to ``m_c`` get ``lambda = W(c p_r(m))``, later files
    ``lambda = c p_r(m)``, and ``c`` solves
    ``sum_{m <= m_c} [W(c p_r(m)) - c p_r(m)] = N lambda_t - c``.
    ``m_c`` and ``c`` are iterated to a fixed point starting from
    ``m_c = M``.  If the iteration cycles, the cycle member with the best
    lower bound is returned with a :class:`DiagnosticWarning`.
    """
    pmf = _pmf(popularity)
    budget = config.cache_size * config.intensity
    seen = {}
    m_c = pmf.size
    for _ in range(max_iter):
        head = pmf[:m_c]

        def residual(c):
            w = sum(lambert_w0(c * p) - c * p for p in head)
            return w + c - budget

        bracket = expand_bracket(residual, 0.0, max(budget, 1e-300))
        c = find_root(residual, bracket)
        if c < 0:
            raise SolverError("negative multiplier: infeasible input")
        lam = np.array([lambert_w0(c * p) if i < m_c else c * p for i, p in enumerate(pmf)])
        mask = concave_regime(config, np.minimum(lam, config.intensity), radius_scale)
        new_m_c = _last_concave(mask)
        seen[m_c] = (c, lam)
        if new_m_c == m_c:
            break
        if new_m_c in seen:
            cycle = list(seen.items())
            cycle = cycle[[k for k, _ in cycle].index(new_m_c):]
            scored = [
                (lower_bound_objective(config, pmf, np.minimum(v[1], config.intensity), radius_scale), k, v)
                for k, v in cycle
            ]
            _, m_c, (c, lam) = max(scored, key=lambda s: s[0])
            warnings.warn(
                f"m_c iteration cycles through {[k for k, _ in cycle]}; keeping m_c={m_c}",
                DiagnosticWarning,
                stacklevel=2,
            )
            break
        m_c = new_m_c
    else:
        raise SolverError(f"m_c fixed point did not converge in {max_iter} iterations")
    lam_c = np.minimum(lam, config.intensity)
    value = lower_bound_objective(config, pmf, lam_c, radius_scale)
    return HcpSolution(lam, scaled_radii(config, lam_c, radius_scale), c, m_c, value, radius_scale)


def _golden_max(f, a, b, iters=80):
    g = (math.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
        if b - a < 1e-15:
            break
    return (c, fc) if fc >= fd else (d, fd)


def numeric_oracle_hcp(
    config: ScenarioConfig,
    popularity,
    radius_scale: str = "physical",
    grid: int = 2001,
    max_sweeps: int = 200,
) -> HcpSolution:
    """Direct maximization of the lower bound by pairwise transfers.

    Starts from equal intensities and repeatedly moves intensity between
    pairs of files (or to and from unused budget), choosing each transfer
    by a grid scan refined with golden-section search.  Stops when a full
    sweep gains less than 1e-12.
    """
    pmf = _pmf(popularity)
    m = pmf.size
    lam_t = config.intensity
    budget = config.cache_size * lam_t
    # last coordinate is unused budget
    x = np.append(np.full(m, budget / m), 0.0)
    caps = np.append(np.full(m, lam_t), budget)

    def objective(v):
        return lower_bound_objective(config, pmf, v[:m], radius_scale)

    current = objective(x)
    for _ in range(max_sweeps):
        start = current
        for i, j in itertools.permutations(range(m + 1), 2):
            # move delta from j to i
            hi = min(x[j], caps[i] - x[i])
            if hi <= 0:
                continue

            def moved(delta, i=i, j=j):
                y = x.copy()
                y[i] += delta
                y[j] -= delta
                return objective(y)

            deltas = np.linspace(0.0, hi, grid)
            values = np.array([moved(d) for d in deltas])
            k = int(np.argmax(values))
            a, b = deltas[max(k - 1, 0)], deltas[min(k + 1, grid - 1)]
            d_best, v_best = _golden_max(moved, a, b)
            if values[k] >= v_best:
                d_best, v_best = deltas[k], values[k]
            if v_best > current + 1e-15:
                x[i] += d_best
                x[j] -= d_best
                current = v_best
        if current - start < 1e-12:
            break
    lam = np.clip(x[:m], 0.0, lam_t)
    mask = concave_regime(config, lam, radius_scale)
    return HcpSolution(
        lam, scaled_radii(config, lam, radius_scale), math.nan, _last_concave(mask), current, radius_scale
    )
