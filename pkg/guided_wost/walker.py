"""Walk on stars, advanced as a wavefront.

Every step runs three stages over all live walks at once: the logic stage (termination
and star radius), the evaluation stage (source and Neumann contributions) and the walk
stage (next direction, possibly guided, and the move).
"""

from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
import typing as t
import math
import time
import logging
import numpy as np
from scipy.special import lambertw
from .scene import Kind, eval_dirichlet, eval_neumann, eval_source
from .geom2d import (
    closest_point,
    closest_silhouette,
    combine_radius,
    ray_cast,
    segment_closest_points,
)
from .spherical import SPHERE_AREA, uniform_dir_sample, has_normal
from .training import WalkTrace, TraceStep, GuideRecords, backfill_targets, PDF_FLOOR
from .samplers.uniform import UniformSampler
from .errors import GeometryError


logger = logging.getLogger(__name__)


RR_DEPTH = 128
MAX_DEPTH = 8192
CHUNK_SIZE = 16384
WALL_LIFT = 4.0


def greens_ball(r, R, d=2):
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        if d == 2:
            return np.log(R / r) / (2 * math.pi)
        if d == 3:
            return (1.0 / r - 1.0 / R) / (4 * math.pi)
    raise ValueError(f"unsupported dimension {d}")


def greens_ball_mass(R, d=2):
    R = np.asarray(R, dtype=float)
    if d == 2:
        return R * R / 4.0
    if d == 3:
        return R * R / 6.0
    raise ValueError(f"unsupported dimension {d}")


def radial_inverse_cdf(F, d=2):
    """Radius fraction ``r/R`` whose radial CDF under the ball's Green's function equals ``F``."""
    F = np.clip(np.asarray(F, dtype=float), 0.0, 1.0)
    if d == 2:
        with np.errstate(divide="ignore", invalid="ignore"):
            w = lambertw(-F / math.e, k=-1).real
        return np.where(F <= 0.0, 0.0, np.where(F >= 1.0, 1.0, np.sqrt(np.exp(1.0 + w))))
    if d == 3:
        return 0.5 - np.sin(np.arcsin(1.0 - 2.0 * F) / 3.0)
    raise ValueError(f"unsupported dimension {d}")


def radial_cdf(s, d=2):
    s = np.asarray(s, dtype=float)
    if d == 2:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, s * s * (1.0 - 2.0 * np.log(s)), 0.0)
    return 3 * s * s - 2 * s**3


def _batch(x, normal):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    normal = np.zeros_like(x) if normal is None else np.atleast_2d(np.asarray(normal, dtype=float))
    return x, normal


def sample_source_point(rng, x, R, accel, normal=None):
    """Point ``y`` drawn inside the star around ``x`` and the weight making ``weight * f(y)``
    a single-sample estimate of the source integral.

    Occluded samples (``y`` outside the star) get weight 0.
    """
    x, normal = _batch(x, normal)
    R = np.broadcast_to(np.asarray(R, dtype=float), x.shape[:1])
    nu = uniform_dir_sample(rng, normal, d=2)
    r = R * radial_inverse_cdf(rng.random(R.shape))
    y = x + r[:, None] * nu
    hits = ray_cast(accel, x, nu, r)
    weight = np.where(hits.hit, 0.0, greens_ball_mass(R))
    return y, weight


def _wall_contrib(rng, x, R, normal, accel, scene):
    """Neumann integral along the line a boundary walk rests on, which no ray from the walk
    can hit. ``|s|`` is drawn with density ``log(R / |s|) / (2R)``, which cancels the Green's
    function."""
    n = x.shape[0]
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    s = R * rng.random(n) * rng.random(n)
    tangent = side[:, None] * np.stack([-normal[:, 1], normal[:, 0]], axis=1)
    z = x + s[:, None] * tangent
    cp, dist, seg = closest_point(accel, z, Kind.NEUMANN)
    ok = dist <= accel.t_epsilon
    if ok.any():
        # the line may leave the domain at a corner and meet the boundary again further on
        lifted = x[ok] + WALL_LIFT * accel.t_epsilon * normal[ok]
        ok[ok] = ~ray_cast(accel, lifted, tangent[ok], s[ok]).hit
    out = np.zeros(n)
    if ok.any():
        out[ok] = 2.0 * R[ok] / math.pi * eval_neumann(scene, cp[ok], seg[ok])
    return out


def sample_neumann_contrib(rng, x, R, accel, scene, normal=None, grazing_clamp=None):
    """Single-sample estimate of the Neumann boundary integral over the star."""
    x, normal = _batch(x, normal)
    R = np.broadcast_to(np.asarray(R, dtype=float), x.shape[:1])
    nu = uniform_dir_sample(rng, normal, d=2)
    hits = ray_cast(accel, x, nu, R)
    out = np.zeros(x.shape[0])
    idx = np.flatnonzero(hits.hit & hits.neumann)
    if idx.size:
        t_hit = hits.t[idx]
        cos = np.abs(np.einsum("ij,ij->i", nu[idx], hits.normal[idx]))
        if grazing_clamp:
            cos = np.maximum(cos, grazing_clamp)
        h = eval_neumann(scene, hits.point[idx], hits.segment[idx])
        out[idx] = greens_ball(t_hit, R[idx]) * h * t_hit * SPHERE_AREA[2] / cos
    wall = np.flatnonzero(has_normal(normal))
    if wall.size:
        out[wall] += _wall_contrib(rng, x[wall], R[wall], normal[wall], accel, scene)
    return out


@dataclass
class WalkConfig:
    epsilon_shell: float
    r_min: float
    rr_depth: int = RR_DEPTH
    max_depth: int = MAX_DEPTH
    reflection: bool = True
    grazing_clamp: t.Optional[float] = None
    record: bool = False


@dataclass
class StepContext:
    scene: t.Any
    accel: t.Any
    sampler: t.Any
    config: WalkConfig
    field: t.Any = None
    wpp_index: int = 0

    @property
    def guided(self):
        return self.field is not None and self.sampler.uses_field


@dataclass
class WalkStats:
    walks: int = 0
    steps: int = 0
    escaped: int = 0
    truncated: int = 0
    killed: int = 0
    walk_seconds: float = 0.0
    inference_seconds: float = 0.0

    def merge(self, other):
        return WalkStats(*(a + b for a, b in zip(self.astuple(), other.astuple())))

    def astuple(self):
        return (
            self.walks, self.steps, self.escaped, self.truncated, self.killed,
            self.walk_seconds, self.inference_seconds,
        )


@dataclass
class WalkState:
    """Struct-of-arrays state of a wavefront of walks."""

    position: np.ndarray
    normal: np.ndarray
    throughput: np.ndarray
    accum: np.ndarray
    depth: np.ndarray
    alive: np.ndarray
    terminal: np.ndarray
    trace: WalkTrace = None

    @classmethod
    def start(cls, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        return cls(
            position=points.copy(),
            normal=np.zeros_like(points),
            throughput=np.ones(n),
            accum=np.zeros(n),
            depth=np.zeros(n, dtype=np.int64),
            alive=np.ones(n, dtype=bool),
            terminal=np.zeros(n),
            trace=WalkTrace(n),
        )

    @property
    def on_neumann(self):
        return has_normal(self.normal)


def sample_next_direction(ctx, x, normal, rng, stats=None):
    """Next direction for walks at ``x``: the sampler's MIS draw, or uniform without a field."""
    if ctx.guided:
        start = time.perf_counter()
        params = ctx.sampler.decode(ctx.field, x)
        if stats is not None:
            stats.inference_seconds += time.perf_counter() - start
        return ctx.sampler.sample(rng, params, normal, ctx.config.reflection)
    return UniformSampler().sample(rng, None, normal)


def _terminate_in_shell(ctx, state, idx):
    """End walks inside the Dirichlet shell; return the others and their Dirichlet distance."""
    x = state.position[idx]
    cp, dist, seg = closest_point(ctx.accel, x, Kind.DIRICHLET)
    inshell = dist <= ctx.config.epsilon_shell
    if inshell.any():
        done = idx[inshell]
        g = eval_dirichlet(ctx.scene, cp[inshell], seg[inshell])
        state.accum[done] += state.throughput[done] * g
        state.terminal[done] = g
        state.alive[done] = False
    return idx[~inshell], dist[~inshell]


def wost_step(ctx, state, rng, idx=None, stats=None):
    """Advance the walks ``idx`` (all live walks by default) by one step."""
    stats = stats if stats is not None else WalkStats()
    cfg = ctx.config
    if idx is None:
        idx = np.flatnonzero(state.alive)
    idx, dist_d = _terminate_in_shell(ctx, state, idx)

    truncated = state.depth[idx] >= cfg.max_depth
    if truncated.any():
        state.alive[idx[truncated]] = False
        stats.truncated += int(truncated.sum())
        idx, dist_d = idx[~truncated], dist_d[~truncated]
    if not idx.size:
        return state

    # logic
    x = state.position[idx]
    normal = state.normal[idx]
    dist_s = closest_silhouette(ctx.accel, x, normal)
    R = combine_radius(dist_d, dist_s, cfg.r_min)
    if np.any(~np.isfinite(R)):
        raise GeometryError("unbounded star: no Dirichlet boundary and no Neumann silhouette")

    # evaluation
    contrib = np.zeros(idx.size)
    if ctx.scene.has_source:
        y, weight = sample_source_point(rng, x, R, ctx.accel, normal)
        contrib -= weight * eval_source(ctx.scene, y)
    if ctx.scene.has_neumann_flux:
        contrib += sample_neumann_contrib(
            rng, x, R, ctx.accel, ctx.scene, normal, cfg.grazing_clamp
        )
    state.accum[idx] += state.throughput[idx] * contrib

    # walk
    draw = sample_next_direction(ctx, x, normal, rng, stats)
    nu = draw.nu
    hits = ray_cast(ctx.accel, x, nu, R)
    new_x = x + R[:, None] * nu
    new_normal = np.zeros_like(x)
    landed = np.flatnonzero(hits.hit)
    if landed.size:
        seg = hits.segment[landed]
        snapped, _ = segment_closest_points(
            hits.point[landed], ctx.accel.a[seg], ctx.accel.b[seg]
        )
        new_x[landed] = snapped
        on_neumann = hits.neumann[landed]
        new_normal[landed[on_neumann]] = hits.normal[landed[on_neumann]]

    valid = draw.pdf > 0
    weight = np.where(valid, draw.pdf_u / np.where(valid, draw.pdf, 1.0), 0.0)
    survival = valid.astype(float)
    stats.killed += int(np.count_nonzero(~valid))
    throughput = state.throughput[idx] * weight
    depth = state.depth[idx] + 1

    escaped = valid & ~ctx.scene.contains(new_x, 1e-9 * ctx.scene.diagonal)
    if escaped.any():
        stats.escaped += int(escaped.sum())
        survival[escaped] = 0.0
        # an escaped walk contributes nothing, including what it collected so far
        state.accum[idx[escaped]] = 0.0
        contrib[escaped] = 0.0

    roulette = np.flatnonzero((depth > cfg.rr_depth) & (survival > 0))
    if roulette.size:
        p = np.minimum(1.0, np.abs(throughput[roulette]))
        u = rng.random(roulette.size)
        survive = u < p
        factor = np.where(survive, 1.0 / np.where(survive, p, 1.0), 0.0)
        survival[roulette] = factor
        stats.killed += int(np.count_nonzero(~survive))
    throughput = throughput * survival

    if state.trace is not None:
        recordable = (
            np.full(idx.size, cfg.record and ctx.guided) & (draw.pdf >= PDF_FLOOR)
        )
        state.trace.append(
            TraceStep(
                walk=idx,
                contrib=contrib,
                weight=weight,
                survival=survival,
                x=x,
                nu=nu,
                pdf_mis=draw.pdf,
                pdf_g=draw.pdf_g,
                pdf_u=draw.pdf_u,
                normal=normal,
                recordable=recordable,
            )
        )

    state.position[idx] = new_x
    state.normal[idx] = new_normal
    state.throughput[idx] = throughput
    state.depth[idx] = depth
    state.alive[idx] = survival > 0
    stats.steps += idx.size
    return state


@dataclass
class WavefrontResult:
    estimates: np.ndarray
    records: GuideRecords
    stats: WalkStats = field(default_factory=WalkStats)


def run_wavefront(ctx, points, rng):
    """One walk per point, all advanced together until every walk has ended."""
    start = time.perf_counter()
    stats = WalkStats()
    state = WalkState.start(points)
    if not ctx.config.record:
        state.trace = None
    stats.walks = state.alive.size
    while state.alive.any():
        wost_step(ctx, state, rng, stats=stats)

    records = GuideRecords.empty()
    if state.trace is not None and len(state.trace):
        records, _ = backfill_targets(state.trace, state.terminal)
    stats.walk_seconds = time.perf_counter() - start - stats.inference_seconds
    return WavefrontResult(state.accum, records, stats)


def wost_walk(ctx, x0, rng):
    """Single walk from ``x0``; returns its estimate and guiding records."""
    result = run_wavefront(ctx, np.asarray(x0, dtype=float)[None], rng)
    return float(result.estimates[0]), result.records


def chunk_rng(seed, wpp_index, chunk_index):
    return np.random.default_rng(np.random.SeedSequence([seed, wpp_index, chunk_index]))


def solve_batch(ctx, points, seed=0, chunk_size=CHUNK_SIZE, threads=1, image=None):
    """One walk per point for walk pass ``ctx.wpp_index``.

    Points are split into fixed chunks, each with its own random stream, and merged in chunk
    order, so the result does not depend on ``threads``. When ``image`` is given its running
    statistics are updated with the new estimates.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    chunks = [
        (i, points[begin:begin + chunk_size])
        for i, begin in enumerate(range(0, points.shape[0], chunk_size))
    ]

    def run(chunk):
        i, pts = chunk
        return run_wavefront(ctx, pts, chunk_rng(seed, ctx.wpp_index, i))

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(chunk) for chunk in chunks]

    estimates = np.concatenate([r.estimates for r in results])
    records = GuideRecords.concat([r.records for r in results])
    stats = WalkStats()
    for r in results:
        stats = stats.merge(r.stats)
    if stats.escaped:
        logger.warning("%d walks escaped the scene bounds", stats.escaped)
    if stats.truncated:
        logger.warning("%d walks were truncated at depth %d", stats.truncated, ctx.config.max_depth)
    if image is not None:
        image.add(estimates)
    return WavefrontResult(estimates, records, stats)
