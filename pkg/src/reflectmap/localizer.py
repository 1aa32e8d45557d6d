"""Online phase: score candidate user positions against the reflector map,
confine the search with sector/annulus pre-processing, then run
multi-start gradient ascent.

The score of a candidate position maps every measured (AoA, ToA) pair back
to a presumptive reflector location and integrates, over the covering
sheaf, the product of Gaussian factors built from the propagated
measurement covariances.  Two combination rules are provided:

* ``combine='shared'``: a single reflector variable is marginalized for
  the whole measurement set (one integral of the product of factors);
* ``combine='per_path'``: each measurement is marginalized against the map
  independently (product of per-measurement integrals), which is the rule
  the experiment pipeline uses since distinct paths bounce off distinct
  reflectors.

Candidate-independent quantities are precomputed once per context; all
scoring is vectorized over candidate batches and sheaf cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .envsim import points_in_polygon, polygon_contains
from .geometry import (
    C0,
    Measurement,
    MeasurementVariance,
    Point2,
    covariance_entries,
    invert_xy,
    wrap_angles,
)
from .mapbuilder import GridField, SheafMask

_POINT_CHUNK = 512
_CELL_CHUNK = 4096


class LocalizerError(ValueError):
    """Invalid localization request."""


class AscentError(LocalizerError):
    """Gradient ascent hit a non-finite score; carries the trace so far."""

    def __init__(self, message: str, traces):
        super().__init__(message)
        self.traces = traces


@dataclass
class Region:
    """Boolean mask over a regular grid (same conventions as GridField)."""

    origin: tuple[float, float]
    pitch: float
    nx: int
    ny: int
    mask: np.ndarray
    fallback_full: bool = False

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.nx, self.ny):
            raise LocalizerError("mask shape must be (nx, ny)")

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    @property
    def area(self) -> float:
        return self.count * self.pitch * self.pitch

    def cell_centers(self) -> np.ndarray:
        gx = self.origin[0] + np.arange(self.nx) * self.pitch
        gy = self.origin[1] + np.arange(self.ny) * self.pitch
        mx, my = np.meshgrid(gx, gy, indexing="ij")
        pts = np.column_stack((mx.ravel(), my.ravel()))
        return pts[self.mask.ravel()]

    def same_geometry(self, other) -> bool:
        return (self.origin == tuple(other.origin) and self.pitch == other.pitch
                and self.nx == other.nx and self.ny == other.ny)


def region_from_polygon(polygon: np.ndarray, pitch: float) -> Region:
    """Grid-aligned region covering a polygon (cells whose center is inside)."""
    poly = np.asarray(polygon, dtype=float)
    xmin, ymin = poly.min(axis=0)
    xmax, ymax = poly.max(axis=0)
    ox = math.floor(xmin / pitch) * pitch
    oy = math.floor(ymin / pitch) * pitch
    nx = int(math.ceil((xmax - ox) / pitch)) + 1
    ny = int(math.ceil((ymax - oy) / pitch)) + 1
    gx = ox + np.arange(nx) * pitch
    gy = oy + np.arange(ny) * pitch
    mx, my = np.meshgrid(gx, gy, indexing="ij")
    pts = np.column_stack((mx.ravel(), my.ravel()))
    mask = polygon_contains(pts, poly, tol=1e-9).reshape(nx, ny)
    return Region(origin=(ox, oy), pitch=pitch, nx=nx, ny=ny, mask=mask)


@dataclass
class ScoreContext:
    """Everything the score needs: measurements, sheaf, BS and RoL.

    var_floor is a standard deviation in meters added in quadrature to the
    propagated per-measurement covariances; it models the map quantization
    and keeps zero-variance measurements usable.  None defaults to half the
    sheaf pitch.  ``region`` (sheaf-grid geometry) restricts the
    integration domain; ``cov_scale`` scales every effective covariance
    (diagnostic knob).
    """

    measurements: list[tuple[Measurement, MeasurementVariance]]
    sheaf: SheafMask
    bs: Point2
    rol: np.ndarray
    region: Region | None = None
    combine: str = "shared"
    var_floor: float | None = None
    cov_scale: float = 1.0
    k_sigma: float = 3.0
    delta_floor: float = 0.05
    prelocalize_pitch: float = 1.0
    cell_field: GridField | None = None
    _cells: np.ndarray = field(default=None, repr=False)
    _cell_w: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.measurements) < 1:
            raise LocalizerError("need at least one measurement")
        if not self.sheaf.mask.any():
            raise LocalizerError("sheaf mask is empty")
        if self.combine not in ("shared", "per_path"):
            raise LocalizerError(f"unknown combine rule {self.combine!r}")
        if self.cov_scale <= 0.0:
            raise LocalizerError("cov_scale must be positive")
        self.rol = np.asarray(self.rol, dtype=float)
        # canonical measurement ordering makes the score exactly
        # permutation-invariant despite float accumulation
        self.measurements = sorted(
            self.measurements,
            key=lambda mv: (mv[0].theta, mv[0].tau, mv[1].var_theta, mv[1].var_tau))
        self._theta = np.array([m.theta for m, _ in self.measurements])
        self._tau = np.array([m.tau for m, _ in self.measurements])
        self._vt = np.array([v.var_theta for _, v in self.measurements])
        self._vtau = np.array([v.var_tau for _, v in self.measurements])
        self._bs_xy = self.bs.as_array()
        if self.region is not None:
            if not self.region.same_geometry(self.sheaf):
                raise LocalizerError("region and sheaf grids differ")
            mask = self.sheaf.mask & self.region.mask
        else:
            mask = self.sheaf.mask
        grid = GridField(origin=self.sheaf.origin, pitch=self.sheaf.pitch,
                         nx=self.sheaf.nx, ny=self.sheaf.ny)
        self._cells = grid.cell_centers(mask)
        if self.cell_field is not None:
            # density-weighted integration: cells carry the recovered field
            # mass, which preserves sub-cell reflector positions
            if self.cell_field.values.shape != mask.shape:
                raise LocalizerError("cell_field and sheaf grids differ")
            w = np.maximum(self.cell_field.values[mask], 0.0)
            mean_w = w.mean() if w.size else 1.0
            self._cell_w = w / mean_w if mean_w > 0 else None
        else:
            self._cell_w = None

    @property
    def floor_var(self) -> float:
        f = self.var_floor if self.var_floor is not None else self.sheaf.pitch / 2.0
        return f * f

    def with_region(self, region: Region | None) -> "ScoreContext":
        return replace(self, region=region, _cells=None, _cell_w=None)


def _effective_cov(ctx: ScoreContext, pts: np.ndarray):
    """Per-measurement, per-candidate effective covariance entries and the
    mapped reflector positions.  Shapes (n, P)."""
    theta = ctx._theta[:, None]
    tau = ctx._tau[:, None]
    pu = pts[None, :, :]
    sxy, ok = invert_xy(theta, tau, pu, ctx._bs_xy)
    sxx, sxy_c, syy, ok2 = covariance_entries(
        theta, tau, ctx._vt[:, None], ctx._vtau[:, None], pu, ctx._bs_xy)
    fv = ctx.floor_var
    v11 = ctx.cov_scale * (sxx + fv)
    v22 = ctx.cov_scale * (syy + fv)
    v12 = ctx.cov_scale * sxy_c
    return sxy, v11, v12, v22, ok & ok2


def q_scores(ctx: ScoreContext, points: np.ndarray) -> np.ndarray:
    """Score a batch of candidate positions; shape (P,)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros(len(pts))
    cells = ctx._cells
    if cells.shape[0] == 0:
        return out
    w = ctx.sheaf.pitch ** 2
    for p0 in range(0, len(pts), _POINT_CHUNK):
        chunk = pts[p0:p0 + _POINT_CHUNK]
        s, v11, v12, v22, ok = _effective_cov(ctx, chunk)
        det = v11 * v22 - v12 * v12
        # guard: nan mapped points for infeasible entries never contribute
        sx = np.where(ok, s[..., 0], 0.0)
        sy = np.where(ok, s[..., 1], 0.0)
        n, pc = sx.shape
        if ctx.combine == "shared":
            acc = np.zeros(pc)
        else:
            acc = np.zeros((n, pc))
        for c0 in range(0, len(cells), _CELL_CHUNK):
            cc = cells[c0:c0 + _CELL_CHUNK]
            cw = None if ctx._cell_w is None else ctx._cell_w[c0:c0 + _CELL_CHUNK]
            ux = sx[..., None] - cc[None, None, :, 0]
            uy = sy[..., None] - cc[None, None, :, 1]
            expo = -0.5 * (ux * ux * v22[..., None]
                           - 2.0 * ux * uy * v12[..., None]
                           + uy * uy * v11[..., None]) / det[..., None]
            if ctx.combine == "shared":
                term = np.exp(expo.sum(axis=0))
            else:
                term = np.exp(expo)
            if cw is not None:
                term = term * cw
            acc += term.sum(axis=-1)
        if ctx.combine == "shared":
            q = np.where(ok.all(axis=0), acc * w, 0.0)
        else:
            q = np.where(ok, acc * w, 0.0).prod(axis=0)
        out[p0:p0 + _POINT_CHUNK] = q
    return out


def q_score(ctx: ScoreContext, p_hat: Point2) -> float:
    """Score one candidate user position (non-negative; 0 when any
    measurement cannot be explained from there)."""
    return float(q_scores(ctx, p_hat.as_array()[None, :])[0])


def feasible_count(ctx: ScoreContext, p_hat: Point2) -> int:
    """How many measurements are geometrically explainable from p_hat."""
    d = p_hat.distance_to(ctx.bs)
    return int(np.sum(C0 * ctx._tau > d))


# ---------------------------------------------------------------------------
# pre-processing

def sector_subset(sheaf: SheafMask, bs: Point2, theta: float, delta: float) -> Region:
    """Sheaf cells whose bearing from the BS lies within theta +- delta."""
    if delta <= 0.0:
        raise LocalizerError("delta must be positive")
    grid = GridField(origin=sheaf.origin, pitch=sheaf.pitch, nx=sheaf.nx, ny=sheaf.ny)
    gx = grid.xs()[:, None] - bs.x
    gy = grid.ys()[None, :] - bs.y
    bearing = np.arctan2(gy, gx)
    diff = np.abs(wrap_angles(bearing - theta))
    mask = sheaf.mask & (diff <= delta)
    return Region(origin=sheaf.origin, pitch=sheaf.pitch, nx=sheaf.nx, ny=sheaf.ny,
                  mask=mask)


def annulus_region(base: Region, bs: Point2, sector: Region,
                   tau0: float, tau1: float, guard: float = 0.0) -> Region:
    """Cells of ``base`` whose path length via some sector cell q
    (|p - q| + |bs - q|) falls strictly inside (c0 tau0 - guard,
    c0 tau1 + guard)."""
    if tau0 >= tau1:
        raise LocalizerError("need tau0 < tau1")
    q = sector.cell_centers()
    mask = np.zeros((base.nx, base.ny), dtype=bool)
    if len(q) == 0:
        return Region(origin=base.origin, pitch=base.pitch, nx=base.nx, ny=base.ny,
                      mask=mask)
    p = base.cell_centers()
    lb = np.hypot(q[:, 0] - bs.x, q[:, 1] - bs.y)
    lo = C0 * tau0 - guard
    hi = C0 * tau1 + guard
    hit = np.zeros(len(p), dtype=bool)
    for c0 in range(0, len(q), _CELL_CHUNK):
        qq = q[c0:c0 + _CELL_CHUNK]
        ll = lb[c0:c0 + _CELL_CHUNK]
        d = np.hypot(p[:, None, 0] - qq[None, :, 0], p[:, None, 1] - qq[None, :, 1])
        path = d + ll[None, :]
        hit |= ((path > lo) & (path < hi)).any(axis=1)
    mask[base.mask] = hit
    return Region(origin=base.origin, pitch=base.pitch, nx=base.nx, ny=base.ny,
                  mask=mask)


def sector_union(ctx: ScoreContext, k_sigma: float | None = None) -> Region:
    """Union of the per-measurement sheaf sectors (integration restriction)."""
    k = ctx.k_sigma if k_sigma is None else k_sigma
    mask = np.zeros((ctx.sheaf.nx, ctx.sheaf.ny), dtype=bool)
    for th, vt in zip(ctx._theta, ctx._vt):
        delta = max(k * math.sqrt(vt), ctx.delta_floor)
        mask |= sector_subset(ctx.sheaf, ctx.bs, float(th), delta).mask
    return Region(origin=ctx.sheaf.origin, pitch=ctx.sheaf.pitch, nx=ctx.sheaf.nx,
                  ny=ctx.sheaf.ny, mask=mask)


def constraint_mask(ctx: ScoreContext, points: np.ndarray,
                    extra_guard: float = 0.0,
                    k_sigma: float | None = None) -> np.ndarray:
    """Which points satisfy every measurement's sector/annulus window.

    Same windows as :func:`prelocalize` (sheaf-diagonal guard plus
    ``extra_guard``), evaluated at arbitrary candidate positions."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    k = ctx.k_sigma if k_sigma is None else k_sigma
    guard = math.sqrt(2.0) * ctx.sheaf.pitch + extra_guard
    ok = np.ones(len(pts), dtype=bool)
    for th, tau, vt, vtau in zip(ctx._theta, ctx._tau, ctx._vt, ctx._vtau):
        delta = max(k * math.sqrt(vt), ctx.delta_floor)
        sector = sector_subset(ctx.sheaf, ctx.bs, float(th), delta)
        q = sector.cell_centers()
        if len(q) == 0:
            return np.zeros(len(pts), dtype=bool)
        margin = max(5.0 * math.sqrt(vtau), 1e-9)
        lo = C0 * (tau - margin) - guard
        hi = C0 * (tau + margin) + guard
        lb = np.hypot(q[:, 0] - ctx.bs.x, q[:, 1] - ctx.bs.y)
        hit = np.zeros(len(pts), dtype=bool)
        live = np.nonzero(ok)[0]
        for c0 in range(0, len(q), _CELL_CHUNK):
            qq = q[c0:c0 + _CELL_CHUNK]
            ll = lb[c0:c0 + _CELL_CHUNK]
            d = np.hypot(pts[live, None, 0] - qq[None, :, 0],
                         pts[live, None, 1] - qq[None, :, 1])
            path = d + ll[None, :]
            hit[live] |= ((path > lo) & (path < hi)).any(axis=1)
        ok &= hit
        if not ok.any():
            break
    return ok


def prelocalize(ctx: ScoreContext, k_sigma: float | None = None,
                pitch: float | None = None) -> Region:
    """Intersection of the per-measurement sector/annulus constraints on a
    RoL grid.  Falls back to the full RoL (flagged) when empty.

    Delay margins are max(5 sigma_tau, 1 ns) around each measured delay,
    widened by the sheaf and RoL cell diagonals so grid quantization alone
    can never evict the cell holding the true position.
    """
    k = ctx.k_sigma if k_sigma is None else k_sigma
    rol_pitch = pitch or ctx.prelocalize_pitch
    base = region_from_polygon(ctx.rol, rol_pitch)
    guard = math.sqrt(2.0) * ctx.sheaf.pitch + 0.5 * math.sqrt(2.0) * rol_pitch
    inter = base.mask.copy()
    for th, tau, vt, vtau in zip(ctx._theta, ctx._tau, ctx._vt, ctx._vtau):
        delta = max(k * math.sqrt(vt), ctx.delta_floor)
        sector = sector_subset(ctx.sheaf, ctx.bs, float(th), delta)
        margin = max(5.0 * math.sqrt(vtau), 1e-9)
        reg = annulus_region(base, ctx.bs, sector, tau - margin, tau + margin,
                             guard=guard)
        inter &= reg.mask
        if not inter.any():
            break
    if not inter.any():
        return Region(origin=base.origin, pitch=base.pitch, nx=base.nx, ny=base.ny,
                      mask=base.mask, fallback_full=True)
    return Region(origin=base.origin, pitch=base.pitch, nx=base.nx, ny=base.ny,
                  mask=inter)


# ---------------------------------------------------------------------------
# optimization

def clamp_to_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Project points outside a convex polygon onto its boundary."""
    pts = np.atleast_2d(np.asarray(points, dtype=float)).copy()
    poly = np.asarray(polygon, dtype=float)
    outside = ~points_in_polygon(pts, poly)
    if not outside.any():
        return pts
    idx = np.nonzero(outside)[0]
    n = len(poly)
    best_d = np.full(len(idx), np.inf)
    best_p = pts[idx].copy()
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ab = b - a
        denom = float(ab @ ab)
        t = np.clip(((pts[idx] - a) @ ab) / denom, 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.hypot(*(pts[idx] - proj).T)
        better = d < best_d
        best_d[better] = d[better]
        best_p[better] = proj[better]
    pts[idx] = best_p
    return pts


@dataclass
class OnlineConfig:
    """Multi-start ascent settings."""

    n_starts: int = 16
    dx: float = 0.05
    tol: float = 0.01
    max_iter: int = 200
    gamma: float | None = None       # None -> normalized 0.5*dx steps
    backtracking: bool = False
    seed: int = 0


@dataclass
class LocalizationResult:
    p_hat: Point2
    score: float
    region: Region
    starts: int
    trace: list
    prelocalize_fallback: bool = False


def _ascend_batch(ctx, starts: np.ndarray, cfg: OnlineConfig, score_fn=None):
    score = score_fn if score_fn is not None else (lambda pts: q_scores(ctx, pts))
    rol = ctx.rol if ctx is not None else None
    p = np.atleast_2d(np.asarray(starts, dtype=float)).copy()
    ns = len(p)
    q = np.asarray(score(p), dtype=float)
    traces = [[(float(p[i, 0]), float(p[i, 1]), float(q[i]))] for i in range(ns)]
    if not np.all(np.isfinite(q)):
        raise AscentError("non-finite score at a start point", traces)
    best_p = p.copy()
    best_q = q.copy()
    active = np.ones(ns, dtype=bool)

    for _ in range(cfg.max_iter):
        ia = np.nonzero(active)[0]
        if ia.size == 0:
            break
        pa = p[ia]
        off = cfg.dx
        probes = np.concatenate((pa + (off, 0.0), pa - (off, 0.0),
                                 pa + (0.0, off), pa - (0.0, off)))
        qp = np.asarray(score(probes), dtype=float).reshape(4, ia.size)
        if not np.all(np.isfinite(qp)):
            raise AscentError("non-finite score during gradient evaluation", traces)
        g = np.stack(((qp[0] - qp[1]) / (2.0 * off),
                      (qp[2] - qp[3]) / (2.0 * off)), axis=1)
        gn = np.hypot(g[:, 0], g[:, 1])
        if cfg.gamma is None:
            step = (0.5 * cfg.dx) * g / (gn + 1e-300)[:, None]
        else:
            step = cfg.gamma * g
        stalled = gn == 0.0

        prop = pa + step
        if rol is not None:
            prop = clamp_to_polygon(prop, rol)
        qn = np.asarray(score(prop), dtype=float)
        frozen = np.zeros(ia.size, dtype=bool)
        if cfg.backtracking:
            bad = qn < q[ia]
            halvings = 0
            while bad.any() and halvings < 6:
                step[bad] *= 0.5
                prop[bad] = pa[bad] + step[bad]
                if rol is not None:
                    prop[bad] = clamp_to_polygon(prop[bad], rol)
                qn[bad] = np.asarray(score(prop[bad]), dtype=float)
                bad = qn < q[ia]
                halvings += 1
            frozen = bad
            prop[frozen] = pa[frozen]
            qn[frozen] = q[ia][frozen]
        if not np.all(np.isfinite(qn)):
            raise AscentError("non-finite score after a step", traces)

        moved = np.hypot(*(prop - pa).T)
        p[ia] = prop
        q[ia] = qn
        improved = qn > best_q[ia]
        best_p[ia[improved]] = prop[improved]
        best_q[ia[improved]] = qn[improved]
        for j, i in enumerate(ia):
            traces[i].append((float(prop[j, 0]), float(prop[j, 1]), float(qn[j])))
        active[ia] = (moved >= cfg.tol) & ~frozen & ~stalled
    return best_p, best_q, traces


def gradient_ascent(ctx: ScoreContext, start: Point2, *, gamma: float | None = None,
                    dx: float = 0.05, tol: float = 0.01, max_iter: int = 200,
                    backtracking: bool = False, score_fn=None):
    """Single-start gradient ascent with central-difference gradients.

    The step is gamma * grad(Q); with gamma None the step is normalized to
    length 0.5*dx.  Iterates clamp to the RoL and the best visited point is
    returned, so the result never scores below the start.
    """
    cfg = OnlineConfig(n_starts=1, dx=dx, tol=tol, max_iter=max_iter,
                       gamma=gamma, backtracking=backtracking)
    best_p, best_q, traces = _ascend_batch(ctx, start.as_array()[None, :], cfg,
                                           score_fn=score_fn)
    return Point2(float(best_p[0, 0]), float(best_p[0, 1])), traces[0]


def _choose_starts(score_ctx: ScoreContext, region: Region, n_starts: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Half the starts sit on the best-scoring region cells, the rest are
    stratified draws with jitter; all region cells are used when few."""
    cells = region.cell_centers()
    if len(cells) <= n_starts:
        return cells
    scores = q_scores(score_ctx, cells)
    n_best = max(1, n_starts // 2)
    best = cells[np.argsort(-scores, kind="stable")[:n_best]]
    picks = []
    for stratum in np.array_split(np.arange(len(cells)), n_starts - n_best):
        picks.append(stratum[int(rng.integers(len(stratum)))])
    explore = cells[np.array(picks)]
    explore = explore + rng.uniform(-0.5 * region.pitch, 0.5 * region.pitch,
                                    size=explore.shape)
    return np.vstack([best, explore])


def localize(ctx: ScoreContext, cfg: OnlineConfig) -> LocalizationResult:
    """Full online pipeline: prelocalize, stratified multi-start ascent,
    deterministic argmax (ties resolve to the lowest start index)."""
    region = prelocalize(ctx)
    score_ctx = ctx.with_region(sector_union(ctx)) if ctx.region is None else ctx

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    starts = _choose_starts(score_ctx, region, cfg.n_starts, rng)
    starts = clamp_to_polygon(starts, ctx.rol)
    best_p, best_q, traces = _ascend_batch(score_ctx, starts, cfg)
    winner = int(np.argmax(best_q))
    p_hat = Point2(float(best_p[winner, 0]), float(best_p[winner, 1]))
    return LocalizationResult(
        p_hat=p_hat, score=float(best_q[winner]), region=region, starts=len(starts),
        trace=traces, prelocalize_fallback=region.fallback_full)
