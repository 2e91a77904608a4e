import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from d2dcache.analytic import (
    AnalyticBounds,
    PlacementKind,
    PlacementPolicy,
    campbell_neighbor_count,
    concave_regime,
    hit_gcp,
    hit_mhc_a_bounds,
    hit_mhc_b,
    hit_mpc,
    mhc_variance,
    retention_mean,
    retention_probability,
    scaled_radii,
    second_order_product_density,
    sufficient_condition_holds,
    underutilization_ratio,
    union_area,
)
from d2dcache.errors import ConfigError, DiagnosticWarning, DomainError
from d2dcache.experiments import table2_config
from d2dcache.optimizers import invert_retention, solve_gcp, solve_hcp
from d2dcache.scenario import ScenarioConfig, zipf_pmf

from oracles import matern2_pairs, poisson_square

POP2 = zipf_pmf(2, 1.0)
UNIT = 1.0 / math.pi  # intensity with lambda_t pi = 1


def two_file(r_squared):
    return table2_config(r_squared)


def hard_core_from_intensities(config, lam, kind=PlacementKind.MHC_A):
    lam = np.asarray(lam, dtype=float)
    p = lam / config.intensity
    radii = np.array([invert_retention(config, x) if x > 0 else math.inf for x in p])
    return PlacementPolicy(kind, p, radii, lam)


# --- retention map -------------------------------------------------------------


def test_retention_limits():
    assert retention_probability(0.0) == 1.0
    assert retention_probability(1.0) == pytest.approx(1 - math.exp(-1), rel=1e-15)
    assert retention_probability(math.inf) == 0.0
    assert retention_probability(1e-12) == pytest.approx(1.0, abs=1e-12)


def test_retention_vectorized_and_decreasing():
    c = np.linspace(0, 50, 501)
    q = retention_probability(c)
    assert q.shape == c.shape
    assert np.all(np.diff(q) < 0)


def test_retention_domain():
    with pytest.raises(DomainError):
        retention_probability(-0.1)
    for p in (0.0, -0.5, 1.5):
        with pytest.raises(DomainError):
            retention_mean(p)


def test_retention_mean_half():
    # bisection oracle on the monotone map
    lo, hi = 1e-9, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if retention_probability(mid) > 0.5 else (lo, mid)
    assert retention_mean(0.5) == pytest.approx(lo, abs=1e-9)
    assert retention_mean(0.5) == pytest.approx(1.5936, abs=1e-4)


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=1e-8, max_value=1.0))
def test_retention_round_trip(p):
    assert retention_probability(retention_mean(p)) == pytest.approx(p, abs=1e-12)


def test_union_area_endpoints():
    assert union_area(1.0, 0.0) == pytest.approx(math.pi)
    assert union_area(1.0, 2.0) == pytest.approx(2 * math.pi)
    assert union_area(2.0, 8.0) == pytest.approx(8 * math.pi)
    r = np.linspace(0, 2, 50)
    assert np.all(np.diff(union_area(1.0, r)) > 0)


# --- bounds and policies -----------------------------------------------------


def test_bounds_invariants():
    with pytest.raises(ValueError):
        AnalyticBounds(0.6, 0.5)
    b = AnalyticBounds.point(1.0 + 1e-15)
    assert b.lower == b.upper == b.exact == 1.0


def test_policy_rejects_bad_inputs():
    cfg = ScenarioConfig()
    with pytest.raises(ConfigError):
        PlacementPolicy(PlacementKind.GCP, [1.2, 0.0])
    with pytest.raises(ConfigError):
        PlacementPolicy(PlacementKind.MHC_A, [0.5, 0.5])
    with pytest.raises(ConfigError):
        PlacementPolicy(PlacementKind.GCP, [0.5, 0.5], exclusion_radii=[1.0, 1.0])
    with pytest.raises(ConfigError):
        PlacementPolicy.gcp(cfg, [0.9, 0.9]).validate(cfg)
    with pytest.raises(ConfigError):
        PlacementPolicy(PlacementKind.MHC_A, [0.5, 0.5], [1.0, 1.0], [0.5 * UNIT] * 2).validate(cfg)


def test_policy_is_immutable():
    policy = PlacementPolicy.mpc(ScenarioConfig())
    with pytest.raises(ValueError):
        policy.marginals[0] = 0.0


def test_hard_core_policy_validates():
    cfg = ScenarioConfig(cache_size=2)
    policy = PlacementPolicy.hard_core(cfg, [0.0, 1.0])
    assert policy.marginals[0] == 1.0
    assert policy.marginals[1] == pytest.approx(1 - math.exp(-1))
    policy.validate(cfg)


# --- MPC and GCP ---------------------------------------------------------------


def test_mpc_full_catalog():
    cfg = ScenarioConfig(catalog_size=3, cache_size=3, d2d_radius=2.0)
    assert hit_mpc(cfg, zipf_pmf(3, 1.0)).exact == pytest.approx(1 - math.exp(-4.0))


def test_mpc_no_neighbors():
    cfg = ScenarioConfig(intensity=1e-12)
    assert hit_mpc(cfg, POP2).exact == pytest.approx(0.0, abs=1e-11)


def test_mpc_dense_two_file():
    cfg = ScenarioConfig(intensity=UNIT, d2d_radius=10.0)
    assert hit_mpc(cfg, POP2).exact == pytest.approx((1 - math.exp(-100)) * 2 / 3, rel=1e-15)


def test_gcp_all_ones():
    cfg = ScenarioConfig(catalog_size=2, cache_size=2, d2d_radius=1.5)
    assert hit_gcp(cfg, POP2, [1.0, 1.0]).exact == pytest.approx(1 - math.exp(-2.25))


@pytest.mark.parametrize(
    "r_squared, marginals, expected",
    [(1.0, (0.8466, 0.1534), 0.4282), (2.0, (0.6733, 0.3267), 0.6532)],
)
def test_gcp_reference_rows(r_squared, marginals, expected):
    assert hit_gcp(two_file(r_squared), POP2, marginals).exact == pytest.approx(expected, abs=1e-4)


def test_gcp_domain():
    cfg = ScenarioConfig()
    with pytest.raises(DomainError):
        hit_gcp(cfg, POP2, [-0.1, 1.0])
    with pytest.raises(ConfigError):
        hit_gcp(cfg, POP2, [0.5, 0.3, 0.2])


# --- hard-core bounds ------------------------------------------------------------


def test_mhc_a_nothing_in_range():
    cfg = ScenarioConfig()
    policy = PlacementPolicy(PlacementKind.MHC_A, [0.0, 0.0], [math.inf, math.inf], [0.0, 0.0])
    b = hit_mhc_a_bounds(cfg, POP2, policy)
    assert b.lower == b.upper == 0.0


@pytest.mark.parametrize(
    "r_squared, lam, expected",
    [(1.0, (0.201, 0.1174), 0.5438), (0.5, (0.2813, 0.0370), 0.3140)],
)
def test_mhc_a_reference_lower(r_squared, lam, expected):
    cfg = two_file(r_squared)
    policy = hard_core_from_intensities(cfg, lam)
    b = hit_mhc_a_bounds(cfg, POP2, policy, radius_scale="quartic")
    assert b.lower == pytest.approx(expected, abs=2e-4)
    assert b.lower <= b.upper <= 1.0


def test_regime_boundary_is_linear():
    cfg = two_file(1.0)
    # C = E exactly puts the radius at R
    lam_b = cfg.intensity * retention_probability(cfg.coverage_mean)
    mask = concave_regime(cfg, [lam_b, 0.5 * lam_b])
    assert mask.tolist() == [False, False]
    assert concave_regime(cfg, [lam_b * 1.01, lam_b])[0]
    assert scaled_radii(cfg, [lam_b])[0] == pytest.approx(cfg.d2d_radius)


def test_quartic_scale_radius():
    cfg = two_file(2.0)
    lam = [cfg.intensity * retention_probability(1.0)]
    assert scaled_radii(cfg, lam, "quartic")[0] == pytest.approx(1.0)
    assert scaled_radii(cfg, lam, "physical")[0] == pytest.approx(1.0)
    lam = [cfg.intensity * retention_probability(16.0)]
    assert scaled_radii(cfg, lam, "quartic")[0] == pytest.approx(2.0)
    assert scaled_radii(cfg, lam, "physical")[0] == pytest.approx(4.0)
    with pytest.raises(ConfigError):
        scaled_radii(cfg, lam, "cubic")


def test_upper_measure_flag():
    cfg = ScenarioConfig(d2d_radius=2.0, intensity=0.05)
    policy = PlacementPolicy.hard_core(cfg, [0.6, 1.2])
    area = hit_mhc_a_bounds(cfg, POP2, policy)
    line = hit_mhc_a_bounds(cfg, POP2, policy, upper_measure="line")
    assert area.lower == line.lower
    assert area.upper != line.upper
    with pytest.raises(ConfigError):
        hit_mhc_a_bounds(cfg, POP2, policy, upper_measure="volume")


def test_upper_bound_correction_is_campbell_term():
    cfg = ScenarioConfig(d2d_radius=2.0, intensity=0.05)
    policy = PlacementPolicy.hard_core(cfg, [0.5, 0.8])
    b = hit_mhc_a_bounds(cfg, POP2, policy)
    extra = sum(
        p * campbell_neighbor_count(cfg, r) for p, r in zip(POP2.pmf, policy.exclusion_radii)
    )
    assert b.upper - b.lower == pytest.approx(extra, rel=1e-9)


def test_mhc_a_needs_hard_core_policy():
    cfg = ScenarioConfig()
    with pytest.raises(ConfigError):
        hit_mhc_a_bounds(cfg, POP2, PlacementPolicy.gcp(cfg, [0.5, 0.5]))


radii_st = st.lists(st.floats(min_value=0.0, max_value=5.0), min_size=2, max_size=2)


@settings(max_examples=150, deadline=None)
@given(radii=radii_st, big_r=st.floats(min_value=0.05, max_value=8.0), lt_pi=st.floats(0.05, 5.0))
def test_mhc_a_bounds_ordered(radii, big_r, lt_pi):
    cfg = ScenarioConfig(intensity=lt_pi / math.pi, d2d_radius=big_r)
    policy = PlacementPolicy.hard_core(cfg, radii)
    for scale in ("physical", "quartic"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DiagnosticWarning)
            b = hit_mhc_a_bounds(cfg, POP2, policy, radius_scale=scale)
        assert 0.0 <= b.lower <= b.upper <= 1.0


@settings(max_examples=60, deadline=None)
@given(radii=radii_st, lt_pi=st.floats(0.05, 5.0))
def test_mhc_a_lower_nondecreasing_between_crossings(radii, lt_pi):
    # the lower bound grows with R except where R passes an exclusion radius
    cuts = sorted({0.1, 10.0, *(r for r in radii if 0.1 < r < 10.0)})
    for a, b in zip(cuts[:-1], cuts[1:]):
        lower = []
        for big_r in np.linspace(a, b, 12)[1:-1]:
            cfg = ScenarioConfig(intensity=lt_pi / math.pi, d2d_radius=float(big_r))
            lower.append(hit_mhc_a_bounds(cfg, POP2, PlacementPolicy.hard_core(cfg, radii)).lower)
        assert np.all(np.diff(lower) >= -1e-12)


def test_mhc_a_lower_drops_when_radius_enters_disk():
    # at R = r_m the linear term is x = 1 - e^{-E}; just above, the
    # concave term is 1 - e^{-x} < x
    radii = [0.0, 2.0]
    below = ScenarioConfig(intensity=UNIT, d2d_radius=2.0)
    above = ScenarioConfig(intensity=UNIT, d2d_radius=2.0 * (1 + 1e-7))
    lo_b = hit_mhc_a_bounds(below, POP2, PlacementPolicy.hard_core(below, radii)).lower
    lo_a = hit_mhc_a_bounds(above, POP2, PlacementPolicy.hard_core(above, radii)).lower
    x = -math.expm1(-4.0)
    assert lo_b - lo_a == pytest.approx(POP2.pmf[1] * (x + math.expm1(-x)), rel=1e-5)


# --- matched hard-core -------------------------------------------------------------


def test_mhc_b_small_radii_equal_gcp():
    cfg = ScenarioConfig(d2d_radius=3.0)
    p = [0.7, 0.3]
    radii = [invert_retention(cfg, x) for x in p]
    assert max(radii) < cfg.d2d_radius
    assert hit_mhc_b(cfg, POP2, p, radii).exact == pytest.approx(hit_gcp(cfg, POP2, p).exact, rel=1e-15)


def test_mhc_b_zero_marginals():
    cfg = ScenarioConfig()
    assert hit_mhc_b(cfg, POP2, [0.0, 0.0], [math.inf, math.inf]).exact == 0.0


def test_mhc_b_reference_row_dominates():
    cfg = two_file(0.5)
    p = [1.0, 0.0]
    radii = [invert_retention(cfg, 1.0), math.inf]
    assert hit_mhc_b(cfg, POP2, p, radii).exact >= 0.2623 - 1e-4
    assert hit_mhc_b(cfg, POP2, p, radii).exact >= hit_gcp(cfg, POP2, p).exact


def test_mhc_b_linear_term_clamped():
    cfg = ScenarioConfig(d2d_radius=2.0)
    with pytest.warns(DiagnosticWarning):
        b = hit_mhc_b(cfg, POP2, [1.0, 0.0], [5.0, math.inf])
    assert b.exact == pytest.approx(2 / 3)


@settings(max_examples=1000, deadline=None)
@given(
    m=st.integers(2, 20),
    data=st.data(),
    gamma=st.floats(0.0, 2.0),
    coverage=st.floats(0.1, 20.0),
)
def test_mhc_b_dominates_gcp(m, data, gamma, coverage):
    n = data.draw(st.integers(1, m - 1))
    cfg = ScenarioConfig(
        intensity=UNIT, d2d_radius=math.sqrt(coverage), catalog_size=m, cache_size=n
    )
    raw = np.array(data.draw(st.lists(st.floats(0.0, 1.0), min_size=m, max_size=m)))
    assume(raw.sum() > 1e-6)
    p = raw * min(1.0, n / raw.sum())
    pop = zipf_pmf(m, gamma)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DiagnosticWarning)
        radii = [invert_retention(cfg, x) if x > 0 else math.inf for x in p]
    assert hit_mhc_b(cfg, pop, p, radii).exact >= hit_gcp(cfg, pop, p).exact - 1e-15


# --- second-order product density ---------------------------------------------------


def test_density_cases():
    cfg = ScenarioConfig(intensity=UNIT)
    lam = UNIT * retention_probability(1.0)
    assert second_order_product_density(cfg, 1.0, 0.5) == 0.0
    assert second_order_product_density(cfg, 1.0, 1.0) == 0.0
    assert second_order_product_density(cfg, 1.0, 3.0) == pytest.approx(lam**2, rel=1e-15)
    values = second_order_product_density(cfg, 1.0, np.linspace(0, 3, 31))
    assert values.shape == (31,)
    assert np.all(values >= 0)


@pytest.mark.parametrize("r_m, lt_pi", [(1.0, 1.0), (0.3, 5.0), (2.0, 0.1), (1.0, 40.0)])
def test_density_continuous_at_twice_radius(r_m, lt_pi):
    cfg = ScenarioConfig(intensity=lt_pi / math.pi)
    lam = cfg.intensity * retention_probability(lt_pi * r_m**2)
    inner = second_order_product_density(cfg, r_m, 2 * r_m * (1 - 1e-13))
    assert inner == pytest.approx(lam**2, rel=1e-9)


def test_density_domain():
    cfg = ScenarioConfig()
    with pytest.raises(DomainError):
        second_order_product_density(cfg, 0.0, 1.0)
    with pytest.raises(DomainError):
        second_order_product_density(cfg, 1.0, -1.0)


# --- neighbour counts and variance ------------------------------------------------


def test_campbell_empty_core():
    cfg = ScenarioConfig(d2d_radius=1.0)
    assert campbell_neighbor_count(cfg, 1.0) == 0.0
    assert campbell_neighbor_count(cfg, 2.0) == 0.0


def test_campbell_poisson_limit():
    cfg = ScenarioConfig(intensity=UNIT, d2d_radius=5.0)
    assert campbell_neighbor_count(cfg, 1e-3) == pytest.approx(25.0, rel=1e-3)


def test_campbell_matches_typical_parent_estimator():
    # Average over parent points x of 1{x retained} times the retained
    # neighbours of x within R.  The Palm count around a retained point is
    # larger by 1 / q(C).
    cfg = ScenarioConfig(intensity=UNIT, d2d_radius=3.0)
    rng = np.random.default_rng(20240611)
    h, margin = 15.0, 4.0
    weighted = palm = parents = retained = 0
    for _ in range(300):
        pts = poisson_square(cfg.intensity, h, rng)
        keep = matern2_pairs(pts, 1.0, rng)
        inner = np.all(np.abs(pts) <= h - margin, axis=1)
        sel = pts[inner & keep]
        d = np.hypot(*(sel[:, None, :] - pts[keep][None, :, :]).transpose(2, 0, 1))
        count = ((d < 3.0) & (d > 0)).sum()
        weighted += count
        palm += count
        parents += inner.sum()
        retained += len(sel)
    expected = campbell_neighbor_count(cfg, 1.0)
    assert weighted / parents == pytest.approx(expected, rel=0.02)
    assert palm / retained == pytest.approx(expected / retention_probability(1.0), rel=0.02)


def test_variance_limits():
    cfg = ScenarioConfig(intensity=UNIT)
    assert mhc_variance(cfg, 1e-4) == pytest.approx(UNIT, rel=1e-6)
    assert mhc_variance(cfg, 200.0) == pytest.approx(0.0, abs=1e-4)
    with pytest.raises(DomainError):
        mhc_variance(cfg, 0.0)


def test_variance_matches_window_counts():
    # Count variance per unit area in 40 x 40 windows; the finite-window
    # excess at this size is a few percent.
    cfg = ScenarioConfig(intensity=UNIT)
    rng = np.random.default_rng(7)
    side = 40.0
    counts = []
    for _ in range(3000):
        pts = poisson_square(cfg.intensity, side / 2 + 1.0, rng)
        keep = pts[matern2_pairs(pts, 1.0, rng)]
        counts.append(np.all(np.abs(keep) <= side / 2, axis=1).sum())
    empirical = np.var(counts, ddof=1) / side**2
    assert empirical == pytest.approx(mhc_variance(cfg, 1.0), rel=0.10)


# --- utilization and sufficient condition ----------------------------------------


def test_underutilization_equality_branch():
    cfg = ScenarioConfig(intensity=UNIT, d2d_radius=0.5)
    policy = hard_core_from_intensities(cfg, [0.6 * UNIT, 0.4 * UNIT])
    assert np.all(policy.exclusion_radii >= cfg.d2d_radius)
    assert underutilization_ratio(cfg, policy) == pytest.approx(1.0, rel=1e-12)


def test_underutilization_vanishes_for_huge_radius():
    cfg = ScenarioConfig(catalog_size=1, cache_size=1)
    policy = PlacementPolicy.hard_core(cfg, [1e4])
    assert underutilization_ratio(cfg, policy) < 1e-6


def test_underutilization_reference_row():
    cfg = two_file(1.0)
    policy = solve_hcp(cfg, POP2, radius_scale="quartic").policy(cfg)
    assert underutilization_ratio(cfg, policy) <= 1 + 1e-9


def test_underutilization_needs_hard_core():
    cfg = ScenarioConfig()
    with pytest.raises(ConfigError):
        underutilization_ratio(cfg, PlacementPolicy.mpc(cfg))


@settings(max_examples=200, deadline=None)
@given(
    raw=st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3),
    big_r=st.floats(0.1, 6.0),
    lt_pi=st.floats(0.05, 5.0),
)
def test_underutilization_bounded(raw, big_r, lt_pi):
    cfg = ScenarioConfig(intensity=lt_pi / math.pi, d2d_radius=big_r, catalog_size=3, cache_size=1)
    raw = np.array(raw)
    assume(raw.sum() > 0)
    p = raw / max(1.0, raw.sum())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DiagnosticWarning)
        policy = hard_core_from_intensities(cfg, p * cfg.intensity)
    assert underutilization_ratio(cfg, policy) <= 1 + 1e-9


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=1e-6, max_value=1.0), st.floats(0.01, 10.0))
def test_marginal_radius_round_trip(p, lt_pi):
    cfg = ScenarioConfig(intensity=lt_pi / math.pi)
    r = invert_retention(cfg, p)
    assert retention_probability(lt_pi * r * r) == pytest.approx(p, abs=1e-9)


def test_sufficient_condition_equality():
    cfg = ScenarioConfig(d2d_radius=3.0)
    p = np.array([0.7, 0.3])
    policy = hard_core_from_intensities(cfg, cfg.intensity * p)
    result = sufficient_condition_holds(cfg, policy, p)
    assert result.per_file.tolist() == [True, True]
    assert result.holds


def test_sufficient_condition_missing_file():
    cfg = ScenarioConfig(d2d_radius=3.0)
    policy = hard_core_from_intensities(cfg, [cfg.intensity, 0.0])
    result = sufficient_condition_holds(cfg, policy, [0.8, 0.2])
    assert result.per_file.tolist() == [True, False]
    assert not result.holds


def test_sufficient_condition_reference_row():
    cfg = two_file(3.0)
    gcp = solve_gcp(cfg, POP2)
    for scale in ("physical", "quartic"):
        policy = solve_hcp(cfg, POP2, radius_scale=scale).policy(cfg)
        result = sufficient_condition_holds(cfg, policy, gcp.marginals)
        assert result.feasible
        if result.holds:
            mhc = hit_mhc_a_bounds(cfg, POP2, policy).lower
            assert mhc >= hit_gcp(cfg, POP2, gcp.marginals).exact - 1e-12


def test_sufficient_condition_infeasible_budget():
    cfg = ScenarioConfig(d2d_radius=3.0)
    policy = hard_core_from_intensities(cfg, [cfg.intensity, cfg.intensity])
    result = sufficient_condition_holds(cfg, policy, [0.5, 0.5])
    assert result.per_file.all()
    assert not result.feasible
    assert not result.holds
