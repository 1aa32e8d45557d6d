"""Reproducible experiment pipelines shared by the CLI and the test suite.

Offline: boundary test points -> measurement log -> inverted sample cloud
-> recovered grid field -> covering sheaf.  Online: per-trial user draw,
measurement synthesis, localization, error bookkeeping.  Every stage
derives its randomness from (seed, trial/epoch indices) only, so identical
configs produce identical artifacts; trial loops optionally fan out over a
process pool in deterministic chunks.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig, ScoreConfig
from .envsim import (
    Environment,
    NoiseModel,
    boundary_test_points,
    generate_environment,
    polygon_area,
    polygon_contains,
    rectangle,
    sample_measurements,
)
from .geometry import Point2, covariance_entries, invert_xy
from .localizer import OnlineConfig, ScoreContext, localize, q_scores, sector_union
from .mapbuilder import (
    GridField,
    SampleCloud,
    convergence_curve,
    covering_sheaf,
    density_weights,
    recover_map,
)

DEFAULT_CURVE_LAMBDAS = [(l, l) for l in (0.005, 0.01, 0.02, 0.04, 0.08)]


def build_environment(cfg: ExperimentConfig) -> Environment:
    return generate_environment(cfg.environment, seed=cfg.seed)


def offline_test_points(cfg: ExperimentConfig, env: Environment) -> np.ndarray:
    return boundary_test_points(env, cfg.offline.spacing, cfg.offline.offset)


def effective_noise(cfg: ExperimentConfig) -> NoiseModel:
    """Noise model whose stream follows the master config seed."""
    mixed = int(np.random.SeedSequence(cfg.seed,
                                       spawn_key=(cfg.noise.seed, 3))
                .generate_state(1)[0])
    return replace(cfg.noise, seed=mixed)


def simulate_offline(cfg: ExperimentConfig, env: Environment):
    """Synthesize the offline measurement log.

    Returns (test_points, rows) with rows matching the measurement-log CSV
    schema; epoch indexes the test-point array.
    """
    tps = offline_test_points(cfg, env)
    noise = effective_noise(cfg)
    rows = []
    for i, tp in enumerate(tps):
        mset = sample_measurements(env, Point2(*tp), cfg.offline.n_r, noise,
                                   epoch=i)
        for j, ((m, v), truth) in enumerate(zip(mset.entries, mset.truth)):
            rows.append((i, j, m.theta, m.tau, v.var_theta, v.var_tau, truth))
    return tps, rows


def cloud_from_log(env: Environment, test_points: np.ndarray, rows):
    """Invert logged measurements with the known test-point positions.

    Returns (cloud, covariances, skipped)."""
    pts, covs = [], []
    skipped = 0
    bs_xy = env.bs.as_array()
    for row in rows:
        epoch = int(row[0])
        theta, tau, vt, vtau = (float(row[k]) for k in (2, 3, 4, 5))
        tp = test_points[epoch]
        xy, ok = invert_xy(theta, tau, tp, bs_xy)
        if not ok:
            skipped += 1
            continue
        sxx, sxy, syy, _ = covariance_entries(theta, tau, vt, vtau, tp, bs_xy)
        pts.append(xy)
        covs.append(((float(sxx), float(sxy)), (float(sxy), float(syy))))
    if not pts:
        raise ValueError("log contained no invertible measurements")
    return SampleCloud(np.array(pts)), np.array(covs), skipped


def map_grid(cfg: ExperimentConfig, env: Environment) -> GridField:
    b = env.boundary
    return GridField.from_bounds(b[:, 0].min(), b[:, 0].max(),
                                 b[:, 1].min(), b[:, 1].max(),
                                 cfg.offline.grid_pitch, pad=cfg.offline.grid_pad)


def build_map_products(cfg: ExperimentConfig, env: Environment, cloud: SampleCloud,
                       curve_lambdas=None, curve_sizes=None):
    """Recover the field, threshold the sheaf, and tabulate the estimator
    convergence curve.  Returns (field, trace, sheaf, curve)."""
    if cfg.offline.density_weights and cloud.weights is None:
        cloud = SampleCloud(cloud.points,
                            weights=density_weights(cloud.points,
                                                    0.5 / cfg.offline.lambda_m))
    field, trace = recover_map(cloud, map_grid(cfg, env), alpha=cfg.offline.alpha,
                               iterations=cfg.offline.iterations,
                               lambda_m=cfg.offline.lambda_m, return_trace=True)
    sheaf = covering_sheaf(field, cloud, cfg.offline.epsilon)
    n = len(cloud)
    if curve_sizes is None:
        lo = min(32, n)
        curve_sizes = np.unique(np.geomspace(lo, n, 24).astype(int))
    curve = convergence_curve(cloud, curve_lambdas or DEFAULT_CURVE_LAMBDAS,
                              curve_sizes)
    return field, trace, sheaf, curve


def run_offline_pipeline(cfg: ExperimentConfig):
    """Environment through sheaf in one call (tests and cmd wrappers)."""
    env = build_environment(cfg)
    tps, rows = simulate_offline(cfg, env)
    cloud, covs, skipped = cloud_from_log(env, tps, rows)
    field, trace, sheaf, curve = build_map_products(cfg, env, cloud)
    return env, tps, rows, cloud, field, trace, sheaf, curve


def make_context(entries, sheaf, env: Environment, score: ScoreConfig,
                 rol: np.ndarray | None = None, cell_field=None) -> ScoreContext:
    return ScoreContext(
        measurements=list(entries), sheaf=sheaf, bs=env.bs,
        rol=env.rol if rol is None else rol,
        combine=score.combine, var_floor=score.var_floor, k_sigma=score.k_sigma,
        delta_floor=score.delta_floor, prelocalize_pitch=score.prelocalize_pitch,
        cell_field=cell_field if score.field_weighted_cells else None)


def draw_user(env: Environment, rng: np.random.Generator,
              rol: np.ndarray | None = None, bs_clearance: float = 3.0,
              max_tries: int = 200) -> Point2:
    poly = env.rol if rol is None else rol
    lo = poly.min(axis=0)
    hi = poly.max(axis=0)
    for _ in range(max_tries):
        p = rng.uniform(lo, hi)
        if not polygon_contains(p[None, :], poly, tol=0.0)[0]:
            continue
        if math.hypot(p[0] - env.bs.x, p[1] - env.bs.y) < bs_clearance:
            continue
        return Point2(float(p[0]), float(p[1]))
    raise ValueError("could not draw a user position")


@dataclass
class TrialRecord:
    x: float
    y: float
    score: float
    region_area: float
    region_fraction: float
    starts: int
    iterations: int
    error_m: float


def path_conditioning(bs: Point2, p_u: Point2, entries) -> float:
    """Smallest singular value of the stacked along-ray sensitivity
    covectors d r_i / d p_u.

    Each path constrains the user position only through the radius of its
    mapped reflector along a fixed bearing; when these covectors are nearly
    collinear the position is unidentifiable even with exact measurements.
    """
    h = 1e-4
    p = p_u.as_array()
    bs_xy = bs.as_array()
    rows = []
    for m, _ in entries:
        er = np.array([math.cos(m.theta), math.sin(m.theta)])
        grad = []
        for dim in range(2):
            e = np.zeros(2)
            e[dim] = h
            sp, okp = invert_xy(m.theta, m.tau, p + e, bs_xy)
            sm, okm = invert_xy(m.theta, m.tau, p - e, bs_xy)
            if not (okp and okm):
                return 0.0
            grad.append(float(er @ (sp - sm)) / (2.0 * h))
        rows.append(grad)
    if len(rows) < 2:
        return 0.0
    return float(np.linalg.svd(np.array(rows), compute_uv=False)[-1])


def run_localize_trial(env: Environment, sheaf, score_cfg: ScoreConfig,
                       online: OnlineConfig, noise: NoiseModel, n_r: int,
                       trial: int, cell_seed: int,
                       rol: np.ndarray | None = None,
                       bs_clearance: float = 3.0,
                       cell_field=None,
                       min_conditioning: float | None = None) -> TrialRecord | None:
    """One online trial: draw a user, synthesize paths, localize.

    Returns None for blind epochs (no usable path).  With
    ``min_conditioning`` set, geometrically degenerate draws (nearly
    collinear path sensitivities) are redrawn a bounded number of times.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cell_seed, spawn_key=(trial, 1)))
    trial_noise = replace(noise, seed=cell_seed)
    mset = None
    p_u = None
    for retry in range(16):
        cand = draw_user(env, rng, rol=rol, bs_clearance=bs_clearance)
        mset = sample_measurements(env, cand, n_r, trial_noise,
                                   epoch=trial * 16 + retry)
        if mset.blind:
            continue
        if (min_conditioning is not None
                and path_conditioning(env.bs, cand, mset.entries) <= min_conditioning):
            continue
        p_u = cand
        break
    if p_u is None:
        return None
    ctx = make_context(mset.entries, sheaf, env, score_cfg, rol=rol,
                       cell_field=cell_field)
    res = localize(ctx, replace(online, seed=int(
        np.random.SeedSequence(cell_seed, spawn_key=(trial, 2)).generate_state(1)[0])))
    rol_poly = env.rol if rol is None else rol
    err = math.hypot(res.p_hat.x - p_u.x, res.p_hat.y - p_u.y)
    iters = max(len(t) for t in res.trace) - 1
    return TrialRecord(x=res.p_hat.x, y=res.p_hat.y, score=res.score,
                       region_area=res.region.area,
                       region_fraction=res.region.area / polygon_area(rol_poly),
                       starts=res.starts, iterations=iters, error_m=err)


def _cdf_chunk_worker(task):
    (env, sheaf, score_cfg, online, noise, n_r, rol, cell_seed,
     bs_clearance, cell_field, min_conditioning, trials) = task
    out = []
    for t in trials:
        rec = run_localize_trial(env, sheaf, score_cfg, online, noise, n_r,
                                 t, cell_seed, rol=rol, bs_clearance=bs_clearance,
                                 cell_field=cell_field,
                                 min_conditioning=min_conditioning)
        out.append(rec)
    return out


def run_cell_trials(env: Environment, sheaf, score_cfg: ScoreConfig,
                    online: OnlineConfig, noise: NoiseModel, n_r: int,
                    trials: int, cell_seed: int, rol: np.ndarray | None = None,
                    bs_clearance: float = 3.0, threads: int = 1, cell_field=None,
                    min_conditioning: float | None = None):
    """All trials of one parameter cell; deterministic regardless of
    threads (chunks preserve trial order)."""
    indices = list(range(trials))
    if threads <= 1:
        recs = _cdf_chunk_worker((env, sheaf, score_cfg, online, noise, n_r, rol,
                                  cell_seed, bs_clearance, cell_field,
                                  min_conditioning, indices))
    else:
        chunks = [c.tolist() for c in np.array_split(indices, threads) if len(c)]
        tasks = [(env, sheaf, score_cfg, online, noise, n_r, rol, cell_seed,
                  bs_clearance, cell_field, min_conditioning, c) for c in chunks]
        recs = []
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for part in ex.map(_cdf_chunk_worker, tasks):
                recs.extend(part)
    return recs


def cdf_cell_noise(base: NoiseModel, scale: float) -> NoiseModel:
    return NoiseModel(sigma_theta=base.sigma_theta * scale,
                      sigma_tau=base.sigma_tau * scale, seed=base.seed)


def small_rol_override(env: Environment, side: float) -> np.ndarray:
    """Centered side x side square used for under-determined path counts."""
    c = env.rol.mean(axis=0)
    return rectangle(c[0] - side / 2, c[1] - side / 2, c[0] + side / 2, c[1] + side / 2)


def run_cdf_experiment(cfg: ExperimentConfig, threads: int = 1):
    """Per-cell error arrays for the (noise scale x n_r) grid.

    The offline phase runs once at the base noise level; cells vary only
    the online measurement noise and the path count.  Cells with n_r <= 2
    use the small-RoL override (two paths alone cannot pin a position).
    Returns a list of dicts with keys scale, n_r, errors, records, blind.
    """
    env, _, _, _, field, _, sheaf, _ = run_offline_pipeline(cfg)
    cell_field = field if cfg.score.field_weighted_cells else None
    cells = []
    cell_idx = 0
    for n_r in cfg.cdf.n_r_values:
        for scale in cfg.cdf.noise_scales:
            cell_seed = int(np.random.SeedSequence(
                cfg.seed, spawn_key=(100 + cell_idx,)).generate_state(1)[0])
            cell_idx += 1
            noise = cdf_cell_noise(cfg.noise, scale)
            rol = small_rol_override(env, cfg.cdf.small_rol_side) if n_r <= 2 else None
            recs = run_cell_trials(env, sheaf, cfg.score, cfg.online, noise, n_r,
                                   cfg.cdf.trials, cell_seed, rol=rol,
                                   bs_clearance=cfg.cdf.user_bs_clearance,
                                   threads=threads, cell_field=cell_field)
            errors = np.array([r.error_m for r in recs if r is not None])
            cells.append({
                "scale": scale, "n_r": n_r, "errors": errors,
                "records": [r for r in recs if r is not None],
                "blind": sum(1 for r in recs if r is None),
            })
    return cells


def q_surface(ctx: ScoreContext, pitch: float) -> GridField:
    """Score field over the RoL bounding box (diagnostic dump)."""
    poly = ctx.rol
    grid = GridField.from_bounds(poly[:, 0].min(), poly[:, 0].max(),
                                 poly[:, 1].min(), poly[:, 1].max(), pitch)
    score_ctx = ctx.with_region(sector_union(ctx)) if ctx.region is None else ctx
    pts = grid.cell_centers()
    grid.values = q_scores(score_ctx, pts).reshape(grid.nx, grid.ny)
    return grid
