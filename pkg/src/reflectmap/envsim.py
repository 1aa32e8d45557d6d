"""Synthetic environments and the measurement-synthesis model.

An :class:`Environment` holds the ground-truth reflector point set, the
physical boundary polyline, the region of localization (RoL) polygon and
the base-station position.  Measurement synthesis activates a subset of
reflectors for a transmitter position and perturbs each forward (AoA, ToA)
pair with independent Gaussian noise; everything is deterministic given
(seed, epoch).

Offline data collection walks transmitter test points along the RoL
boundary (moving a TX close to the boundary suffices to excite every
reflector that matters for the region) and inverts each synthesized
measurement back to a reflector estimate with its propagated covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    C0,
    Measurement,
    MeasurementVariance,
    Point2,
    covariance_entries,
    forward_path,
    invert_xy,
)


class EnvironmentError(ValueError):
    """Invalid environment construction or simulation request."""


# ---------------------------------------------------------------------------
# polygon helpers (convex RoLs; boundaries may be any simple polygon)

def signed_area(vertices: np.ndarray) -> float:
    """Shoelace area, positive for counter-clockwise order."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_area(vertices: np.ndarray) -> float:
    """Unsigned shoelace area."""
    return abs(signed_area(vertices))


def polygon_perimeter(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=float)
    return float(np.sum(np.hypot(*(np.roll(v, -1, axis=0) - v).T)))


def ensure_ccw(vertices: np.ndarray) -> np.ndarray:
    """Return vertices in counter-clockwise order."""
    v = np.asarray(vertices, dtype=float)
    return v if signed_area(v) >= 0 else v[::-1].copy()


def points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd crossing test, vectorized over points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    v = np.asarray(vertices, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(v)
    for i in range(n):
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x2 - x1) * (y - y1) / (y2 - y1) + x1
        inside ^= crosses & (x < xint)
    return inside


def distance_to_boundary(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Distance from each point to the closest polygon edge."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    v = np.asarray(vertices, dtype=float)
    best = np.full(len(pts), np.inf)
    n = len(v)
    for i in range(n):
        a = v[i]
        b = v[(i + 1) % n]
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            d = np.hypot(*(pts - a).T)
        else:
            t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
            d = np.hypot(*(pts - proj).T)
        best = np.minimum(best, d)
    return best


def polygon_contains(points: np.ndarray, vertices: np.ndarray,
                     tol: float = 1e-9) -> np.ndarray:
    """Membership including points within ``tol`` of the boundary."""
    inside = points_in_polygon(points, vertices)
    if tol > 0.0:
        inside |= distance_to_boundary(points, vertices) <= tol
    return inside


def polygon_self_intersects(vertices: np.ndarray) -> bool:
    """True if any two non-adjacent edges properly intersect."""
    v = np.asarray(vertices, dtype=float)
    n = len(v)
    segs = [(v[i], v[(i + 1) % n]) for i in range(n)]

    def _orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    for i in range(n):
        for j in range(i + 1, n):
            if abs(i - j) in (0, 1) or (i == 0 and j == n - 1):
                continue
            a, b = segs[i]
            c, d = segs[j]
            if (_orient(a, b, c) * _orient(a, b, d) < 0
                    and _orient(c, d, a) * _orient(c, d, b) < 0):
                return True
    return False


def inset_convex(vertices: np.ndarray, offset: float) -> np.ndarray:
    """Shift every edge of a convex polygon inward by ``offset`` and
    re-intersect neighbouring edge lines."""
    if offset == 0.0:
        return np.asarray(vertices, dtype=float).copy()
    v = ensure_ccw(vertices)
    n = len(v)
    shifted = []
    for i in range(n):
        a, b = v[i], v[(i + 1) % n]
        e = b - a
        length = math.hypot(*e)
        if length == 0.0:
            raise EnvironmentError("degenerate polygon edge")
        nrm = np.array((-e[1], e[0])) / length  # inward for CCW
        shifted.append((a + offset * nrm, b + offset * nrm))
    out = np.empty_like(v)
    for i in range(n):
        (a1, b1) = shifted[i - 1]
        (a2, b2) = shifted[i]
        d1, d2 = b1 - a1, b2 - a2
        denom = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(denom) < 1e-12:
            out[i] = a2  # parallel neighbours: keep the shifted vertex
        else:
            t = ((a2[0] - a1[0]) * d2[1] - (a2[1] - a1[1]) * d2[0]) / denom
            out[i] = a1 + t * d1
    # a too-large offset re-forms the polygon inside-out: edges reverse
    for i in range(n):
        e_old = v[(i + 1) % n] - v[i]
        e_new = out[(i + 1) % n] - out[i]
        if float(e_old @ e_new) <= 0.0:
            raise EnvironmentError("offset collapses the polygon")
    return out


def rectangle(x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    return np.array([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], dtype=float)


# ---------------------------------------------------------------------------
# domain types

@dataclass
class Environment:
    """Immutable world model for the simulator.

    reflectors: (K, 2) ground-truth reflector points.
    boundary:   (B, 2) closed physical boundary polyline (vertices, not
                repeating the first point).
    rol:        (R, 2) convex region-of-localization polygon.
    bs:         receiver position.
    reflectivity: optional per-reflector coefficients in [0, 1]; stored for
                realism studies, never used by the geometry.
    """

    reflectors: np.ndarray
    boundary: np.ndarray
    rol: np.ndarray
    bs: Point2
    reflectivity: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.reflectors = np.atleast_2d(np.asarray(self.reflectors, dtype=float))
        self.boundary = np.asarray(self.boundary, dtype=float)
        self.rol = ensure_ccw(np.asarray(self.rol, dtype=float))
        if self.reflectors.size == 0 or not np.all(np.isfinite(self.reflectors)):
            raise EnvironmentError("reflectors must be non-empty and finite")
        if len(self.boundary) < 3:
            raise EnvironmentError("boundary needs at least 3 vertices")
        if polygon_self_intersects(self.boundary):
            raise EnvironmentError("boundary polyline self-intersects")
        if polygon_area(self.rol) <= 0.0:
            raise EnvironmentError("rol must have positive area")
        if self.reflectivity is not None:
            self.reflectivity = np.asarray(self.reflectivity, dtype=float)
            if self.reflectivity.shape[0] != self.reflectors.shape[0]:
                raise EnvironmentError("one reflectivity per reflector")

    @property
    def rol_area(self) -> float:
        return polygon_area(self.rol)

    def contains(self, points, tol: float = 1e-6) -> np.ndarray:
        return polygon_contains(points, self.rol, tol=tol)


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian measurement noise levels plus the master seed."""

    sigma_theta: float = 0.0
    sigma_tau: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_theta < 0.0 or self.sigma_tau < 0.0:
            raise EnvironmentError("noise sigmas must be non-negative")


@dataclass
class MeasurementSet:
    """One observation epoch: (measurement, variance) pairs plus simulator
    ground truth (generating reflector indices, -1 for the LoS entry)."""

    entries: list[tuple[Measurement, MeasurementVariance]]
    truth: list[int] | None = None
    blind: bool = False

    def __post_init__(self):
        if self.truth is not None and len(self.truth) != len(self.entries):
            raise EnvironmentError("truth must parallel entries")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class EnvironmentSpec:
    """Config-serializable generator parameters.

    family 'rectangle': a width x height room whose walls carry the
    reflectors (4 wall midpoints when wall_spacing is None, else points
    every wall_spacing meters along the walls); the RoL is the room inset
    by rol_margin.

    family 'ratio': reflector disks scattered in a width x height region
    until the region-to-reflector-area ratio hits target_ratio within
    ratio_tolerance (area measured on a mask_pitch raster, which is also
    how the covering-sheaf area of the generated map is defined).

    family 'points': explicit reflector list inside a width x height room.
    """

    family: str = "rectangle"
    width: float = 60.0
    height: float = 60.0
    bs: list | None = None          # None -> room center
    # rectangle family
    wall_spacing: float | None = None
    rol_margin: float = 5.0
    # ratio family
    target_ratio: float = 15.9
    disk_radius: float = 2.0
    points_per_m2: float = 2.0
    ratio_tolerance: float = 0.05
    bs_clearance: float = 5.0
    mask_pitch: float = 0.25
    epsilon: float = 0.05
    # points family
    points: list | None = None


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _wall_points(w: float, h: float, spacing: float) -> np.ndarray:
    """Points marching along the four walls of (0,0)-(w,h), spaced evenly."""
    pts = []
    for a, b in (((0, 0), (w, 0)), ((w, 0), (w, h)), ((w, h), (0, h)), ((0, h), (0, 0))):
        a = np.array(a, dtype=float)
        b = np.array(b, dtype=float)
        length = np.hypot(*(b - a))
        n = max(1, int(length // spacing))
        for k in range(n):
            t = (k + 0.5) * spacing / length
            if t < 1.0:
                pts.append(a + t * (b - a))
    return np.array(pts)


def generate_environment(spec: EnvironmentSpec, seed: int = 0) -> Environment:
    """Build a deterministic environment from a generator spec and a seed."""
    w, h = float(spec.width), float(spec.height)
    if w <= 0 or h <= 0:
        raise EnvironmentError("region must have positive extent")
    boundary = rectangle(0.0, 0.0, w, h)
    bs = Point2(*(spec.bs if spec.bs is not None else (w / 2.0, h / 2.0)))

    if spec.family == "rectangle":
        if spec.wall_spacing is None:
            reflectors = np.array([(w / 2, 0.0), (w, h / 2), (w / 2, h), (0.0, h / 2)])
        else:
            reflectors = _wall_points(w, h, float(spec.wall_spacing))
        rol = inset_convex(boundary, float(spec.rol_margin))
        return Environment(reflectors=reflectors, boundary=boundary, rol=rol, bs=bs,
                           meta={"family": "rectangle"})

    if spec.family == "points":
        if not spec.points:
            raise EnvironmentError("points family needs an explicit point list")
        reflectors = np.asarray(spec.points, dtype=float)
        rol = inset_convex(boundary, float(spec.rol_margin))
        return Environment(reflectors=reflectors, boundary=boundary, rol=rol, bs=bs,
                           meta={"family": "points"})

    if spec.family == "ratio":
        return _generate_ratio_environment(spec, seed, boundary, bs)

    raise EnvironmentError(f"unknown environment family {spec.family!r}")


def _generate_ratio_environment(spec: EnvironmentSpec, seed: int,
                                boundary: np.ndarray, bs: Point2) -> Environment:
    w, h = float(spec.width), float(spec.height)
    rho = float(spec.disk_radius)
    vol_sa = w * h
    target_area = vol_sa / float(spec.target_ratio)
    tol = float(spec.ratio_tolerance)
    pitch = float(spec.mask_pitch)
    rng = _rng_for(seed, 0)

    nx = int(round(w / pitch)) + 1
    ny = int(round(h / pitch)) + 1
    mask = np.zeros((nx, ny), dtype=bool)
    xs = np.arange(nx) * pitch
    ys = np.arange(ny) * pitch

    centers: list[np.ndarray] = []
    area = 0.0
    attempts = 0
    max_attempts = 20000
    bs_xy = bs.as_array()
    while area < target_area:
        attempts += 1
        if attempts > max_attempts:
            raise EnvironmentError(
                f"cannot reach area ratio {spec.target_ratio} with disks of "
                f"radius {rho} in a {w}x{h} region")
        c = rng.uniform((rho, rho), (w - rho, h - rho))
        if np.hypot(*(c - bs_xy)) < spec.bs_clearance + rho:
            continue
        if centers and np.min(np.hypot(*(np.array(centers) - c).T)) < 2.0 * rho + 0.5:
            continue
        centers.append(c)
        i0, i1 = np.searchsorted(xs, (c[0] - rho, c[0] + rho))
        j0, j1 = np.searchsorted(ys, (c[1] - rho, c[1] + rho))
        lx = xs[i0:i1 + 1][:, None] - c[0]
        ly = ys[j0:j1 + 1][None, :] - c[1]
        mask[i0:i1 + 1, j0:j1 + 1] |= lx * lx + ly * ly <= rho * rho
        area = float(mask.sum()) * pitch * pitch
    if area > target_area * (1.0 + tol):
        raise EnvironmentError("disk granularity overshoots the requested ratio")

    pts_per_disk = max(8, int(round(math.pi * rho * rho * spec.points_per_m2)))
    pts = []
    for c in centers:
        u = rng.uniform(0.0, 1.0, size=pts_per_disk)
        ang = rng.uniform(0.0, 2.0 * math.pi, size=pts_per_disk)
        rr = rho * np.sqrt(u)
        pts.append(np.column_stack((c[0] + rr * np.cos(ang), c[1] + rr * np.sin(ang))))
    reflectors = np.concatenate(pts, axis=0)

    meta = {
        "family": "ratio",
        "disk_centers": np.array(centers),
        "disk_radius": rho,
        "sheaf_area_m2": area,
        "sheaf_pitch": pitch,
        "epsilon": float(spec.epsilon),
        "realized_ratio": vol_sa / area,
    }
    return Environment(reflectors=reflectors, boundary=boundary, rol=boundary.copy(),
                       bs=bs, meta=meta)


# ---------------------------------------------------------------------------
# measurement synthesis

def _segments_properly_cross(p0, p1, q0, q1) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    o1, o2 = orient(p0, p1, q0), orient(p0, p1, q1)
    o3, o4 = orient(q0, q1, p0), orient(q0, q1, p1)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def _blocked(a: np.ndarray, b: np.ndarray, boundary: np.ndarray) -> bool:
    """True when segment a-b properly crosses a boundary edge away from its
    endpoints (reflectors sit on walls, so endpoint touches do not count)."""
    n = len(boundary)
    for i in range(n):
        q0, q1 = boundary[i], boundary[(i + 1) % n]
        if _segments_properly_cross(a, b, q0, q1):
            # ignore crossings within a hair of either segment endpoint
            for endpoint in (a, b):
                d = distance_to_boundary(endpoint[None, :], np.array([q0, q1, q1]))
                if d[0] < 1e-9:
                    break
            else:
                return True
    return False


def sample_measurements(env: Environment, p_u: Point2, n_r: int,
                        noise: NoiseModel, epoch: int, *,
                        activation: str = "fixed",
                        include_los: bool = False,
                        visibility: bool = False) -> MeasurementSet:
    """Synthesize one epoch of noisy (AoA, ToA) pairs seen at the BS.

    Exactly ``n_r`` reflectors activate (uniform draw without replacement);
    with ``activation='poisson'`` the count is Poisson(n_r) capped at the
    reflector population.  Fully deterministic given (noise.seed, epoch).
    """
    if epoch < 0:
        raise EnvironmentError("epoch must be non-negative")
    if n_r < 0:
        raise EnvironmentError("n_r must be non-negative")
    if not env.contains(p_u.as_array()[None, :])[0]:
        raise EnvironmentError(f"TX position ({p_u.x}, {p_u.y}) outside the RoL")

    rng = _rng_for(noise.seed, epoch)
    n_avail = len(env.reflectors)
    if activation == "fixed":
        if n_r > n_avail:
            raise EnvironmentError(f"n_r={n_r} exceeds {n_avail} reflectors")
        k = n_r
    elif activation == "poisson":
        k = min(int(rng.poisson(n_r)), n_avail)
    elif activation == "weighted":
        # reflectivity coefficients as activation weights (geometry unchanged)
        if env.reflectivity is None:
            raise EnvironmentError("weighted activation needs reflectivity")
        if n_r > n_avail:
            raise EnvironmentError(f"n_r={n_r} exceeds {n_avail} reflectors")
        k = n_r
    else:
        raise EnvironmentError(f"unknown activation model {activation!r}")

    if k == 0:
        idx = np.empty(0, dtype=int)
    elif activation == "weighted":
        p = env.reflectivity / env.reflectivity.sum()
        idx = rng.choice(n_avail, size=k, replace=False, p=p)
    else:
        idx = rng.choice(n_avail, size=k, replace=False)
    dth = rng.normal(0.0, noise.sigma_theta, size=k) if k else np.empty(0)
    dta = rng.normal(0.0, noise.sigma_tau, size=k) if k else np.empty(0)

    entries: list[tuple[Measurement, MeasurementVariance]] = []
    truth: list[int] = []
    var = MeasurementVariance(noise.sigma_theta ** 2, noise.sigma_tau ** 2)
    pu_xy = p_u.as_array()
    bs_xy = env.bs.as_array()
    for j, ridx in enumerate(idx):
        s_xy = env.reflectors[ridx]
        if visibility and (_blocked(pu_xy, s_xy, env.boundary)
                           or _blocked(s_xy, bs_xy, env.boundary)):
            continue
        m0 = forward_path(p_u, env.bs, Point2(*s_xy))
        m = Measurement(theta=m0.theta + dth[j], tau=max(m0.tau + dta[j], 1e-12))
        entries.append((m, var))
        truth.append(int(ridx))

    if include_los:
        tau = p_u.distance_to(env.bs) / C0
        if tau > 0.0:
            theta = math.atan2(p_u.y - env.bs.y, p_u.x - env.bs.x)
            entries.append((Measurement(theta=theta, tau=tau), var))
            truth.append(-1)

    return MeasurementSet(entries=entries, truth=truth, blind=(len(entries) == 0))


# ---------------------------------------------------------------------------
# offline phase

def boundary_test_points(env: Environment, spacing: float,
                         offset: float = 0.0) -> np.ndarray:
    """Transmitter test points along the RoL boundary.

    Points are placed at equal arc-length steps of ``spacing`` along the
    boundary inset inward by ``offset``, so consecutive gaps never exceed
    ``spacing``.  Returns an (N, 2) array.
    """
    if spacing <= 0.0:
        raise EnvironmentError("spacing must be positive")
    if offset < 0.0:
        raise EnvironmentError("offset must be non-negative")
    poly = inset_convex(env.rol, offset) if offset > 0.0 else env.rol
    verts = np.vstack((poly, poly[:1]))
    seg = np.diff(verts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate(([0.0], np.cumsum(seg_len)))
    perimeter = cum[-1]
    arcs = np.arange(0.0, perimeter, spacing)
    i = np.clip(np.searchsorted(cum, arcs, side="right") - 1, 0, len(seg) - 1)
    t = (arcs - cum[i]) / seg_len[i]
    return verts[i] + t[:, None] * seg[i]


@dataclass
class OfflineCollection:
    """Inverted reflector estimates harvested from the test points."""

    estimates: np.ndarray     # (N, 2)
    covariances: np.ndarray   # (N, 2, 2)
    truth: np.ndarray         # (N,) generating reflector index
    epoch: np.ndarray         # (N,) test-point index
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.estimates)


def collect_offline(env: Environment, test_points: np.ndarray, n_r: int,
                    noise: NoiseModel, *, activation: str = "fixed") -> OfflineCollection:
    """Run the offline phase: synthesize measurements at every test point
    and invert them with the known TX position.

    Measurements that fail the feasibility or degeneracy preconditions are
    skipped and counted, never silently dropped.
    """
    test_points = np.atleast_2d(np.asarray(test_points, dtype=float))
    est, cov, tru, epo = [], [], [], []
    skipped = 0
    bs_xy = env.bs.as_array()
    for i, tp in enumerate(test_points):
        mset = sample_measurements(env, Point2(*tp), n_r, noise, epoch=i,
                                   activation=activation)
        for (m, v), ridx in zip(mset.entries, mset.truth):
            xy, ok = invert_xy(m.theta, m.tau, tp, bs_xy)
            if not ok:
                skipped += 1
                continue
            sxx, sxy, syy, _ = covariance_entries(
                m.theta, m.tau, v.var_theta, v.var_tau, tp, bs_xy)
            est.append(xy)
            cov.append(((float(sxx), float(sxy)), (float(sxy), float(syy))))
            tru.append(ridx)
            epo.append(i)
    if not est:
        raise EnvironmentError("offline collection produced no samples")
    return OfflineCollection(
        estimates=np.array(est), covariances=np.array(cov),
        truth=np.array(tru, dtype=int), epoch=np.array(epo, dtype=int),
        skipped=skipped)
