"""Monte Carlo engine for cache placements on a Poisson field of caches.

Every replication draws its randomness from
``SeedSequence(seed, spawn_key=(stream, replication))``.  Stream 0 drives
the cache pattern and the placement, stream 1 the request.  Results
therefore do not depend on how replications are split across workers.

File indices are 0-based in arrays and 1-based in the CSV dump.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .analytic import PlacementKind, PlacementPolicy
from .errors import ConfigError
from .scenario import PopularityModel, ScenarioConfig

__all__ = [
    "PointPattern",
    "HitEstimate",
    "NegativeDependenceReport",
    "replication_rng",
    "sample_ppp",
    "place_mhc",
    "place_independent",
    "place_mpc",
    "place",
    "estimate_hit",
    "empirical_pair_density",
    "negative_dependence_check",
    "utilization_measure",
    "nearest_neighbor_distances",
    "write_realization",
]

PATTERN_STREAM = 0
REQUEST_STREAM = 1


def replication_rng(seed: int, stream: int, replication: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, replication)))


def _pmf(popularity) -> np.ndarray:
    if isinstance(popularity, PopularityModel):
        return popularity.pmf
    return np.asarray(popularity, dtype=float)


@dataclass(frozen=True)
class PointPattern:
    """Cache locations and the files stored at each.

    ``stored`` is an ``(n, M)`` boolean matrix.  Points are sampled on the
    square of half-width ``window_half_width + buffer`` (optionally cut to
    a disk); ``inside`` marks the ones in the nominal window.
    """

    positions: np.ndarray
    stored: np.ndarray
    cache_size: int
    window_half_width: float
    buffer: float = 0.0

    def __len__(self):
        return self.positions.shape[0]

    @property
    def catalog_size(self) -> int:
        return self.stored.shape[1]

    @property
    def occupancy(self) -> np.ndarray:
        return self.stored.sum(axis=1)

    @property
    def cache_contents(self) -> list:
        return [np.flatnonzero(row) for row in self.stored]

    @property
    def inside(self) -> np.ndarray:
        return np.all(np.abs(self.positions) <= self.window_half_width, axis=1)

    def with_stored(self, stored: np.ndarray) -> "PointPattern":
        return replace(self, stored=stored)


@dataclass(frozen=True)
class HitEstimate:
    """Monte Carlo hit probability at the typical receiver.

    ``per_file_hit[m]`` is the hit rate among replications that requested
    file ``m`` (``nan`` if it was never requested).
    """

    mean: float
    std_error: float
    replications: int
    per_file_hit: np.ndarray
    per_file_requests: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_counts(cls, hits_per_file, requests_per_file) -> "HitEstimate":
        hits = np.asarray(hits_per_file, dtype=np.int64)
        reqs = np.asarray(requests_per_file, dtype=np.int64)
        n = int(reqs.sum())
        mean = hits.sum() / n
        with np.errstate(invalid="ignore", divide="ignore"):
            per_file = np.where(reqs > 0, hits / np.maximum(reqs, 1), np.nan)
        return cls(float(mean), math.sqrt(mean * (1 - mean) / n), n, per_file, reqs)


def sample_ppp(
    config: ScenarioConfig,
    rng: np.random.Generator,
    buffer: float = 0.0,
    clip_radius: Optional[float] = None,
    catalog_size: Optional[int] = None,
) -> PointPattern:
    """Poisson pattern on the window widened by ``buffer``.

    With ``clip_radius`` only the part of that square inside the disk of
    this radius around the origin is sampled, which is still a Poisson
    pattern on the intersection.
    """
    half = config.window_half_width + buffer
    box = half if clip_radius is None else min(half, clip_radius)
    count = rng.poisson(config.intensity * (2 * box) ** 2)
    pos = rng.uniform(-box, box, size=(count, 2))
    if clip_radius is not None:
        pos = pos[np.einsum("ij,ij->i", pos, pos) <= clip_radius**2]
    m = config.catalog_size if catalog_size is None else catalog_size
    return PointPattern(
        pos, np.zeros((pos.shape[0], m), dtype=bool), config.cache_size, config.window_half_width, buffer
    )


def _pairs(tree: cKDTree, radius: float, cache: dict) -> np.ndarray:
    if radius not in cache:
        cache[radius] = tree.query_pairs(radius, output_type="ndarray")
    return cache[radius]


def _matern_winners(n, pairs, marks, competing):
    """Competing points with the lowest ``(mark, index)`` among competing neighbours."""
    lost = ~competing
    if pairs.size:
        a, b = pairs[:, 0], pairs[:, 1]
        both = competing[a] & competing[b]
        a, b = a[both], b[both]
        ma, mb = marks[a], marks[b]
        a_wins = (ma < mb) | ((ma == mb) & (a < b))
        lost[b[a_wins]] = True
        lost[a[~a_wins]] = True
    return ~lost


def place_mhc(
    pattern: PointPattern,
    policy: PlacementPolicy,
    popularity,
    rng: np.random.Generator,
    enforce_capacity: bool = True,
    full_cache_blocks: bool = False,
    files=None,
) -> PointPattern:
    """Per-file Matern II thinning with cache-capacity bookkeeping.

    Files are handled from most to least popular.  For each file every
    competing point draws a fresh uniform mark and keeps the file iff its
    mark is the lowest among competing points within the file's exclusion
    radius.  A cache that already holds ``N`` files stops competing, unless
    ``full_cache_blocks`` is set, in which case it still competes (and may
    suppress neighbours) but cannot store.  ``files`` optionally restricts
    which files are placed; the processing order is unchanged.
    """
    if policy.exclusion_radii is None:
        raise ConfigError("place_mhc needs a policy with exclusion radii")
    pmf = _pmf(popularity)
    n = len(pattern)
    stored = pattern.stored.copy()
    if n == 0:
        return pattern.with_stored(stored)
    tree = cKDTree(pattern.positions)
    extent = float(np.ptp(pattern.positions, axis=0).max()) * math.sqrt(2) if n > 1 else 0.0
    pair_cache: dict = {}
    order = np.argsort(-pmf, kind="stable")
    wanted = None if files is None else set(int(f) for f in files)
    last = max(order.tolist().index(f) for f in wanted) if wanted else len(order) - 1
    for m in order[: last + 1]:
        r_m = float(policy.exclusion_radii[m])
        marks = rng.random(n)
        if not math.isfinite(r_m):
            continue
        full = stored.sum(axis=1) >= pattern.cache_size if enforce_capacity else np.zeros(n, bool)
        competing = np.ones(n, bool) if full_cache_blocks else ~full
        if r_m > extent:
            keep = np.zeros(n, bool)
            idx = np.flatnonzero(competing)
            if idx.size:
                keep[idx[np.argmin(marks[idx])]] = True
        else:
            keep = _matern_winners(n, _pairs(tree, r_m, pair_cache), marks, competing)
        stored[:, m] = keep & ~full
    return pattern.with_stored(stored)


def place_independent(pattern: PointPattern, marginals, rng: np.random.Generator) -> PointPattern:
    """Independent placement with exact per-file marginals.

    Each cache draws ``U ~ U[0, 1)`` and stores the files whose intervals in
    the cumulative layout of ``marginals`` contain ``U + k`` for
    ``k = 0, ..., N - 1``.  No file is picked twice because every interval
    is at most 1 long.
    """
    p = np.asarray(marginals, dtype=float)
    if p.sum() > pattern.cache_size + 1e-9:
        raise ConfigError("marginals exceed the cache size")
    n = len(pattern)
    stored = np.zeros((n, p.size), dtype=bool)
    cum = np.concatenate(([0.0], np.cumsum(p)))
    u = rng.random(n)
    rows = np.arange(n)
    for k in range(pattern.cache_size):
        x = u + k
        idx = np.searchsorted(cum, x, side="right") - 1
        ok = (x < cum[-1]) & (idx < p.size)
        stored[rows[ok], idx[ok]] = True
    return pattern.with_stored(stored)


def place_mpc(pattern: PointPattern) -> PointPattern:
    """Every cache stores the ``N`` most popular files."""
    stored = np.zeros_like(pattern.stored)
    stored[:, : pattern.cache_size] = True
    return pattern.with_stored(stored)


def place(
    pattern, policy, popularity, rng, full_cache_blocks=False, files=None, enforce_capacity=True
) -> PointPattern:
    """Dispatch on the policy kind."""
    if policy.kind is PlacementKind.MPC:
        return place_mpc(pattern)
    if policy.kind is PlacementKind.GCP:
        return place_independent(pattern, policy.marginals, rng)
    return place_mhc(
        pattern,
        policy,
        popularity,
        rng,
        enforce_capacity=enforce_capacity,
        full_cache_blocks=full_cache_blocks,
        files=files,
    )


def _dependency_buffer(config, policy, pmf, m) -> float:
    """How far beyond ``R`` placement of file ``m`` can reach.

    Retention of file ``m`` at a point depends on points within ``r_m``
    whose occupancy depends on earlier files, so the reach is the sum of
    the radii processed so far.  It is capped at the window half-width.
    """
    if policy.exclusion_radii is None:
        return 0.0
    order = np.argsort(-pmf, kind="stable")
    upto = order[: order.tolist().index(m) + 1]
    radii = policy.exclusion_radii[upto]
    return float(min(radii[np.isfinite(radii)].sum(), config.window_half_width))


def _hit_chunk(args):
    config, pmf, policy, seed, start, stop, full_cache_blocks, enforce_capacity = args
    m_files = pmf.size
    hits = np.zeros(m_files, np.int64)
    reqs = np.zeros(m_files, np.int64)
    cum = np.cumsum(pmf)
    big_r2 = config.d2d_radius**2
    hard = policy.kind.hard_core
    buffers = [_dependency_buffer(config, policy, pmf, m) for m in range(m_files)] if hard else None
    for rep in range(start, stop):
        req_rng = replication_rng(seed, REQUEST_STREAM, rep)
        m = min(int(np.searchsorted(cum, req_rng.random() * cum[-1], side="right")), m_files - 1)
        reqs[m] += 1
        rng = replication_rng(seed, PATTERN_STREAM, rep)
        if hard:
            b = buffers[m]
            pattern = sample_ppp(config, rng, buffer=b, clip_radius=config.d2d_radius + b)
        else:
            pattern = sample_ppp(config, rng, clip_radius=config.d2d_radius)
        if len(pattern) == 0:
            continue
        pattern = place(pattern, policy, pmf, rng, full_cache_blocks, (m,), enforce_capacity)
        d2 = np.einsum("ij,ij->i", pattern.positions, pattern.positions)
        if np.any(pattern.stored[:, m] & (d2 <= big_r2)):
            hits[m] += 1
    return hits, reqs


def _chunks(replications, workers):
    n_chunks = max(1, min(replications, workers * 4 if workers > 1 else 1))
    edges = np.linspace(0, replications, n_chunks + 1).astype(int)
    return list(zip(edges[:-1], edges[1:]))


def _map(fn, tasks, workers):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def estimate_hit(
    config: ScenarioConfig,
    popularity,
    policy: PlacementPolicy,
    replications: int,
    seed: Optional[int] = None,
    workers: int = 1,
    full_cache_blocks: bool = False,
    enforce_capacity: bool = True,
) -> HitEstimate:
    """Hit probability of a policy at a receiver at the origin.

    Each replication samples a request, a fresh cache pattern and a fresh
    placement, and scores a hit iff some cache within ``R`` of the origin
    stores the requested file.  Only the region that can influence that
    event is sampled: the disk of radius ``R`` for independent placements
    and ``R`` plus the dependency reach for hard-core ones, cut to the
    buffered window.  ``enforce_capacity=False`` lets hard-core files
    ignore the cache size, which isolates the thinning from capacity
    effects.
    """
    if replications < 1:
        raise ConfigError("replications must be >= 1")
    pmf = _pmf(popularity)
    policy.validate(config)
    seed = config.seed if seed is None else seed
    tasks = [
        (config, pmf, policy, seed, a, b, full_cache_blocks, enforce_capacity)
        for a, b in _chunks(replications, workers)
    ]
    results = _map(_hit_chunk, tasks, workers)
    hits = sum(r[0] for r in results)
    reqs = sum(r[1] for r in results)
    return HitEstimate.from_counts(hits, reqs)


def _single_file_policy(config, r_m):
    return PlacementPolicy.hard_core(config, [r_m])


def _pair_chunk(args):
    config, r_m, edges, seed, start, stop = args
    counts = np.zeros(edges.size - 1, np.int64)
    policy = _single_file_policy(config, r_m)
    cfg = config.with_changes(catalog_size=1, cache_size=1)
    r_max = edges[-1]
    for rep in range(start, stop):
        rng = replication_rng(seed, PATTERN_STREAM, rep)
        pattern = sample_ppp(cfg, rng, buffer=r_max + r_m)
        pattern = place_mhc(pattern, policy, [1.0], rng, enforce_capacity=False)
        keep = pattern.stored[:, 0]
        pos = pattern.positions[keep]
        inside = np.all(np.abs(pos) <= cfg.window_half_width, axis=1)
        if pos.shape[0] < 2:
            continue
        tree = cKDTree(pos)
        pairs = tree.query_pairs(r_max, output_type="ndarray")
        if pairs.size == 0:
            continue
        d = np.linalg.norm(pos[pairs[:, 0]] - pos[pairs[:, 1]], axis=1)
        # ordered pairs whose first point lies in the window
        weight = inside[pairs[:, 0]].astype(np.int64) + inside[pairs[:, 1]]
        counts += np.histogram(d, bins=edges, weights=weight)[0].astype(np.int64)
    return counts


def empirical_pair_density(
    config: ScenarioConfig,
    r_m: float,
    replications: int,
    bins=None,
    seed: Optional[int] = None,
    workers: int = 1,
):
    """Pair-counting estimate of the product density of one thinned file.

    Retained points are counted as ordered pairs ``(x, y)`` with ``x`` in
    the window.  The pattern is sampled on a buffer wide enough that every
    partner ``y`` and its retention are unaffected by the boundary, so the
    estimate is ``pairs / (replications |W| |annulus|)`` without further
    edge correction.  Default bins have width ``r_m / 20`` on ``[0, 3 r_m]``.

    Returns
    -------
    edges, density, pair_count
    """
    edges = np.linspace(0.0, 3 * r_m, 61) if bins is None else np.asarray(bins, dtype=float)
    seed = config.seed if seed is None else seed
    tasks = [(config, r_m, edges, seed, a, b) for a, b in _chunks(replications, workers)]
    counts = sum(_map(_pair_chunk, tasks, workers))
    window_area = (2 * config.window_half_width) ** 2
    annulus = math.pi * (edges[1:] ** 2 - edges[:-1] ** 2)
    density = counts / (replications * window_area * annulus)
    return edges, density, int(counts.sum())


@dataclass(frozen=True)
class NegativeDependenceReport:
    """Pair statistics of one placement run, per file.

    ``close_pairs`` counts pairs closer than the exclusion radius that
    store the same file; ``joint_frequency`` is the fraction of cache pairs
    in the distance band storing the file at both ends, to be compared with
    ``marginal_product``.
    """

    close_pairs: np.ndarray
    band_pairs: np.ndarray
    joint_frequency: np.ndarray
    marginal_product: np.ndarray
    std_error: np.ndarray

    @property
    def hard_core_violations(self) -> int:
        return int(self.close_pairs.sum())


def _dependence_chunk(args):
    config, pmf, policy, bands, seed, start, stop, full_cache_blocks = args
    m_files = pmf.size
    close = np.zeros(m_files, np.int64)
    band_n = np.zeros(m_files, np.int64)
    joint = np.zeros(m_files, np.int64)
    buffer = float(np.nanmax(np.where(np.isfinite(bands[:, 1]), bands[:, 1], np.nan)))
    for rep in range(start, stop):
        rng = replication_rng(seed, PATTERN_STREAM, rep)
        pattern = sample_ppp(config, rng, buffer=buffer)
        pattern = place(pattern, policy, pmf, rng, full_cache_blocks)
        if len(pattern) < 2:
            continue
        tree = cKDTree(pattern.positions)
        pairs = tree.query_pairs(buffer, output_type="ndarray")
        if pairs.size == 0:
            continue
        inside = pattern.inside
        pairs = pairs[inside[pairs[:, 0]] & inside[pairs[:, 1]]]
        d = np.linalg.norm(pattern.positions[pairs[:, 0]] - pattern.positions[pairs[:, 1]], axis=1)
        both = pattern.stored[pairs[:, 0]] & pattern.stored[pairs[:, 1]]
        for m in range(m_files):
            r_m = policy.exclusion_radii[m] if policy.exclusion_radii is not None else 0.0
            if np.isfinite(r_m) and r_m > 0:
                close[m] += int(np.count_nonzero(both[:, m] & (d < r_m)))
            lo, hi = bands[m]
            in_band = (d > lo) & (d < hi)
            band_n[m] += int(in_band.sum())
            joint[m] += int(np.count_nonzero(both[:, m] & in_band))
    return close, band_n, joint


def negative_dependence_check(
    config: ScenarioConfig,
    popularity,
    policy: PlacementPolicy,
    replications: int,
    seed: Optional[int] = None,
    distance_band=None,
    workers: int = 1,
    full_cache_blocks: bool = False,
) -> NegativeDependenceReport:
    """Count hard-core violations and measure joint storage of nearby caches.

    The default distance band is ``(r_m, 2 r_m)`` for hard-core policies
    and ``(0, R)`` otherwise.  Only pairs with both caches in the nominal
    window are used; the pattern is buffered by the band's outer radius.
    """
    pmf = _pmf(popularity)
    policy.validate(config)
    m_files = pmf.size
    if distance_band is not None:
        bands = np.tile(np.asarray(distance_band, float), (m_files, 1))
    elif policy.exclusion_radii is not None:
        r = policy.exclusion_radii
        bands = np.column_stack([r, 2 * r])
        bands[~np.isfinite(r) | (r > 2 * config.window_half_width)] = (0.0, config.d2d_radius)
        bands[r == 0] = (0.0, config.d2d_radius)
    else:
        bands = np.tile([0.0, config.d2d_radius], (m_files, 1))
    seed = config.seed if seed is None else seed
    tasks = [
        (config, pmf, policy, bands, seed, a, b, full_cache_blocks)
        for a, b in _chunks(replications, workers)
    ]
    results = _map(_dependence_chunk, tasks, workers)
    close = sum(r[0] for r in results)
    band_n = sum(r[1] for r in results)
    joint = sum(r[2] for r in results)
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = joint / band_n
        se = np.sqrt(freq * (1 - freq) / band_n)
    return NegativeDependenceReport(close, band_n, freq, policy.marginals**2, se)


def _utilization_chunk(args):
    config, pmf, policy, seed, start, stop, full_cache_blocks = args
    ratios = []
    buffer = 0.0
    if policy.exclusion_radii is not None:
        finite = policy.exclusion_radii[np.isfinite(policy.exclusion_radii)]
        buffer = float(min(finite.sum(), config.window_half_width)) if finite.size else 0.0
    for rep in range(start, stop):
        rng = replication_rng(seed, PATTERN_STREAM, rep)
        pattern = sample_ppp(config, rng, buffer=buffer)
        pattern = place(pattern, policy, pmf, rng, full_cache_blocks)
        inside = pattern.inside
        count = int(inside.sum())
        if count == 0:
            continue
        ratios.append(pattern.stored[inside].sum() / (pattern.cache_size * count))
    return np.asarray(ratios)


def utilization_measure(
    config: ScenarioConfig,
    popularity,
    policy: PlacementPolicy,
    replications: int,
    seed: Optional[int] = None,
    workers: int = 1,
    full_cache_blocks: bool = False,
) -> float:
    """Mean fraction of occupied cache slots in the nominal window.

    Replications with no cache in the window are skipped.
    """
    pmf = _pmf(popularity)
    seed = config.seed if seed is None else seed
    tasks = [
        (config, pmf, policy, seed, a, b, full_cache_blocks) for a, b in _chunks(replications, workers)
    ]
    ratios = np.concatenate(_map(_utilization_chunk, tasks, workers))
    return float(math.fsum(ratios) / ratios.size) if ratios.size else math.nan


def nearest_neighbor_distances(positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=float)
    if pos.shape[0] < 2:
        return np.empty(0)
    d, _ = cKDTree(pos).query(pos, k=2)
    return d[:, 1]


def write_realization(pattern: PointPattern, handle) -> None:
    """Write ``x,y,files`` rows; ``files`` lists 1-based indices separated by spaces."""
    writer = csv.writer(handle)
    writer.writerow(["x", "y", "files"])
    for (x, y), row in zip(pattern.positions, pattern.stored):
        writer.writerow([f"{x:.10g}", f"{y:.10g}", " ".join(str(i + 1) for i in np.flatnonzero(row))])
