"""Ambiguity-bound machinery: the analytic lower bound on the ambiguity
area, the log-scale accuracy ratio, and Monte Carlo estimation of the
empirical ambiguity area for bound verification.

With n_r simultaneous first-order paths, a localization region of area A
and a reflector covering sheaf of area S, the ambiguity area obeys

    Vol(S_u) > A * 2^(-n_r * log2(1 + A/S)) = A / (1 + A/S)^n_r

in the infinite-SNR, non-LoS regime, equivalently an accuracy-ratio cap
R_a < n_r * log2(1 + A/S).  The Monte Carlo side draws random disk-scatter
structures at a fixed area ratio, localizes noiseless observations with a
grid-argmax oracle (no optimizer error), and measures the covering-sheaf
area of the resulting offset cloud.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .envsim import (
    EnvironmentSpec,
    NoiseModel,
    Point2,
    generate_environment,
    sample_measurements,
)
from .localizer import (
    ScoreContext,
    prelocalize,
    q_scores,
    sector_union,
)
from .mapbuilder import GridField, SampleCloud, SheafMask, covering_sheaf, sheaf_from_disks


@dataclass(frozen=True)
class BoundInputs:
    """Areas in m^2, path count and sheaf miss probability."""

    vol_sa: float
    vol_sheaf: float
    n_r: int
    epsilon: float = 0.05

    def __post_init__(self):
        if self.vol_sa <= 0.0 or self.vol_sheaf <= 0.0:
            raise ValueError("areas must be positive")
        if self.n_r < 0:
            raise ValueError("n_r must be non-negative")


def ambiguity_lower_bound(b: BoundInputs) -> float:
    """Analytic lower bound on the ambiguity area, m^2."""
    ratio = b.vol_sa / b.vol_sheaf
    return b.vol_sa * 2.0 ** (-b.n_r * math.log2(1.0 + ratio))


def log_accuracy_ratio(vol_sa: float, vol_su: float) -> float:
    """Accuracy in bits: log2(localization area / ambiguity area)."""
    if vol_sa <= 0.0 or vol_su <= 0.0:
        raise ValueError("areas must be positive")
    return math.log2(vol_sa / vol_su)


def ra_upper_bound(b: BoundInputs) -> float:
    """Cap on the log-scale accuracy ratio, bits."""
    return b.n_r * math.log2(1.0 + b.vol_sa / b.vol_sheaf)


def bound_radius(b: BoundInputs) -> float:
    """Radius of the circle whose area equals the lower bound, meters."""
    return math.sqrt(ambiguity_lower_bound(b) / math.pi)


def theorem_sweep(n_r_values, ratios):
    """Rows of (n_r, ratio, bound/vol_sa) for the bound-versus-ratio curve;
    vol_sa cancels in the normalized bound."""
    rows = []
    for n_r in n_r_values:
        for ratio in ratios:
            frac = 2.0 ** (-n_r * math.log2(1.0 + ratio))
            rows.append((int(n_r), float(ratio), frac))
    return rows


# ---------------------------------------------------------------------------
# Monte Carlo ambiguity

@dataclass
class AmbiguityEstimate:
    """Offset cloud of a localization ensemble and its sheaf area."""

    offsets: np.ndarray   # (T, 2), sorted lexicographically
    area: float           # m^2, covering-sheaf area of the offsets
    trials: int
    skipped: int = 0


def grid_argmax(ctx: ScoreContext, *, coarse_pitch: float = 2.0,
                fine_pitch: float = 0.25, polish_pitch: float = 0.1,
                chunk: int = 2048) -> tuple[Point2, float]:
    """Exhaustive score maximization over the constraint-feasible set.

    Every coarse prelocalized cell is subdivided to ``fine_pitch`` and the
    fine candidates are kept only when they satisfy the per-measurement
    windows, so competing score peaks are all represented (no greedy
    pruning).  A local window at ``polish_pitch`` sharpens the winner.
    Ties resolve to the lowest candidate index."""
    from .envsim import polygon_contains
    from .localizer import constraint_mask

    region = prelocalize(ctx, pitch=coarse_pitch)
    coarse = region.cell_centers()
    if len(coarse) == 0:
        raise ValueError("empty candidate region")
    r = max(1, int(round(coarse_pitch / fine_pitch)))
    offs = (np.arange(r) - (r - 1) / 2.0) * fine_pitch
    mx, my = np.meshgrid(offs, offs, indexing="ij")
    sub = np.column_stack((mx.ravel(), my.ravel()))
    cand = (coarse[:, None, :] + sub[None, :, :]).reshape(-1, 2)
    cand = cand[polygon_contains(cand, ctx.rol, tol=1e-9)]
    if not region.fallback_full and len(cand):
        keep = constraint_mask(ctx, cand,
                               extra_guard=0.5 * math.sqrt(2.0) * fine_pitch)
        cand = cand[keep]
    if len(cand) == 0:
        cand = coarse

    best_q = -np.inf
    best_p = cand[0]
    for c0 in range(0, len(cand), chunk):
        q = q_scores(ctx, cand[c0:c0 + chunk])
        i = int(np.argmax(q))
        if q[i] > best_q:
            best_q = float(q[i])
            best_p = cand[c0 + i]

    half = 1.5 * fine_pitch
    gx = np.arange(best_p[0] - half, best_p[0] + half + polish_pitch / 2, polish_pitch)
    gy = np.arange(best_p[1] - half, best_p[1] + half + polish_pitch / 2, polish_pitch)
    mx, my = np.meshgrid(gx, gy, indexing="ij")
    local = np.column_stack((mx.ravel(), my.ravel()))
    local = local[polygon_contains(local, ctx.rol, tol=1e-9)]
    if len(local):
        q = q_scores(ctx, local)
        i = int(np.argmax(q))
        if q[i] >= best_q:
            best_q = float(q[i])
            best_p = local[i]
    return Point2(float(best_p[0]), float(best_p[1])), best_q


def offsets_sheaf_area(offsets: np.ndarray, epsilon: float,
                       pitch: float | None = None) -> float:
    """Covering-sheaf area of an offset cloud via a kernel-density grid
    (Gaussian bandwidth = 2 * pitch) and the quantile level-set rule.

    The default pitch follows a Silverman-type rule, half of
    sigma * T^(-1/6), so finite clouds bridge their sampling gaps while the
    estimate tightens as trials grow."""
    pts = np.atleast_2d(np.asarray(offsets, dtype=float))
    if pitch is None:
        sigma = float(np.mean(pts.std(axis=0)))
        pitch = max(0.5 * sigma * len(pts) ** (-1.0 / 6.0), 1e-3)
    pad = 10.0 * pitch
    grid = GridField.from_bounds(pts[:, 0].min(), pts[:, 0].max(),
                                 pts[:, 1].min(), pts[:, 1].max(), pitch, pad=pad)
    counts = grid.geometry_like().splat(pts, 1.0)
    density = gaussian_filter(counts, sigma=2.0)
    field = GridField(origin=grid.origin, pitch=grid.pitch, nx=grid.nx, ny=grid.ny,
                      values=density)
    return covering_sheaf(field, SampleCloud(pts), epsilon).area


def environment_sheaf(env, epsilon: float | None = None) -> SheafMask:
    """Ground-truth sheaf mask of a generated disk-scatter environment."""
    meta = env.meta
    if "disk_centers" not in meta:
        raise ValueError("environment has no disk geometry")
    pitch = float(meta["sheaf_pitch"])
    w = env.boundary[:, 0].max()
    h = env.boundary[:, 1].max()
    grid = GridField.from_bounds(0.0, w, 0.0, h, pitch)
    eps = float(meta.get("epsilon", 0.05)) if epsilon is None else epsilon
    return sheaf_from_disks(np.asarray(meta["disk_centers"]),
                            float(meta["disk_radius"]), grid, eps)


def _draw_user(env, rng: np.random.Generator, clearance_bs: float = 5.0,
               clearance_reflector: float = 1.0, max_tries: int = 200) -> Point2 | None:
    lo = env.rol.min(axis=0)
    hi = env.rol.max(axis=0)
    centers = env.meta.get("disk_centers")
    radius = float(env.meta.get("disk_radius", 0.0))
    for _ in range(max_tries):
        p = rng.uniform(lo, hi)
        if not env.contains(p[None, :])[0]:
            continue
        if math.hypot(p[0] - env.bs.x, p[1] - env.bs.y) < clearance_bs:
            continue
        if centers is not None and len(centers):
            if np.min(np.hypot(*(np.asarray(centers) - p).T)) < radius + clearance_reflector:
                continue
        return Point2(float(p[0]), float(p[1]))
    return None


def monte_carlo_ambiguity(spec: EnvironmentSpec, n_r: int, trials: int, seed: int,
                          *, coarse_pitch: float = 2.0, fine_pitch: float = 0.25,
                          polish_pitch: float = 0.1,
                          offset_grid_pitch: float | None = None) -> AmbiguityEstimate:
    """Estimate the empirical ambiguity area at infinite SNR.

    Each trial draws a fresh structure from ``spec``, places a user, emits
    n_r noiseless paths, localizes with the grid-argmax oracle given only
    the structure's covering sheaf, and records the offset.  The area is
    the quantile-level-set sheaf of the offset cloud.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if n_r < 1:
        raise ValueError("the Monte Carlo oracle needs at least one path")
    root = np.random.SeedSequence(seed)
    offsets = []
    skipped = 0
    for trial, child in enumerate(root.spawn(trials)):
        trial_seed = int(child.generate_state(1)[0])
        env = generate_environment(spec, seed=trial_seed)
        sheaf = environment_sheaf(env)
        rng = np.random.default_rng(child)
        p_u = _draw_user(env, rng)
        if p_u is None:
            skipped += 1
            continue
        mset = sample_measurements(env, p_u, n_r,
                                   NoiseModel(0.0, 0.0, seed=trial_seed),
                                   epoch=0)
        if mset.blind:
            skipped += 1
            continue
        ctx = ScoreContext(measurements=mset.entries, sheaf=sheaf, bs=env.bs,
                           rol=env.rol, combine="per_path")
        ctx = ctx.with_region(sector_union(ctx))
        try:
            p_hat, _ = grid_argmax(ctx, coarse_pitch=coarse_pitch,
                                   fine_pitch=fine_pitch,
                                   polish_pitch=polish_pitch)
        except ValueError:
            skipped += 1
            continue
        offsets.append((p_hat.x - p_u.x, p_hat.y - p_u.y))
    if not offsets:
        raise ValueError("every trial was skipped")
    arr = np.array(offsets)
    arr = arr[np.lexsort((arr[:, 1], arr[:, 0]))]
    eps = float(spec.epsilon)
    area = offsets_sheaf_area(arr, eps, pitch=offset_grid_pitch)
    return AmbiguityEstimate(offsets=arr, area=area, trials=len(arr), skipped=skipped)
