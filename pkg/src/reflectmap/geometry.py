"""Forward/inverse mapping between reflector positions and (AoA, ToA) pairs.

A first-order reflection path TX -> reflector -> RX is summarized by the
bearing of the reflector seen from the receiver (AoA, radians from the
x-axis) and the total propagation delay (ToA, seconds).  Fixing both pins
the reflector to the intersection of a ray from the receiver with an
ellipse whose foci are the transmitter and the receiver; only the
intersection lying on the measured ray is physical.

The canonical inversion works in focal-polar form around the receiver:

    r(theta, tau) = (c0^2 tau^2 - d^2) / (2 (c0 tau - d cos(theta - phi)))

with d the TX/RX separation and phi the bearing of the transmitter from
the receiver.  This form is regular for every bearing, unlike the
Cartesian tan(theta) form which blows up near +-pi/2 (kept here only as a
cross-check).  First-order noise propagation maps (var_theta, var_tau)
through the analytic Jacobian of (r cos theta, r sin theta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: Exact SI speed of light (m/s).  Single source of truth for the package.
C0 = 299_792_458.0

#: Focal-chord denominators below this (meters) mean grazing geometry where
#: the first-order model is meaningless; we refuse instead of returning a
#: huge radius.
MIN_DENOM_M = 1e-6


class GeometryError(ValueError):
    """Invalid geometric configuration."""


class InfeasibleMeasurementError(GeometryError):
    """Delay too short for the TX/RX separation: the path ellipse is empty."""


class DegenerateGeometryError(GeometryError):
    """Collapsed or grazing geometry (reflector at RX, ray tangent to LoS)."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle in radians into the principal interval (-pi, pi]."""
    t = math.remainder(theta, 2.0 * math.pi)
    if t <= -math.pi:
        t += 2.0 * math.pi
    return t


def wrap_angles(theta) -> np.ndarray:
    """Vectorized :func:`wrap_angle`."""
    t = np.asarray(theta, dtype=float)
    w = t - 2.0 * np.pi * np.round(t / (2.0 * np.pi))
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


@dataclass(frozen=True)
class Point2:
    """Planar position in meters."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array((self.x, self.y), dtype=float)

    def distance_to(self, other: "Point2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class Measurement:
    """One (AoA, ToA) pair: bearing in radians, delay in seconds > 0."""

    theta: float
    tau: float

    def __post_init__(self):
        if not (math.isfinite(self.theta) and math.isfinite(self.tau)):
            raise GeometryError("non-finite measurement")
        if self.tau <= 0.0:
            raise GeometryError(f"tau must be positive, got {self.tau}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))


@dataclass(frozen=True)
class MeasurementVariance:
    """Per-path measurement variances: radians^2 and seconds^2."""

    var_theta: float
    var_tau: float

    def __post_init__(self):
        if self.var_theta < 0.0 or self.var_tau < 0.0:
            raise GeometryError("variances must be non-negative")


def forward_path(p_u: Point2, p_b: Point2, s: Point2) -> Measurement:
    """Synthesize the (AoA, ToA) a receiver at ``p_b`` sees for the
    first-order path ``p_u -> s -> p_b``.

    tau is the summed leg length over the speed of light, theta the bearing
    of the reflector from the receiver.  Raises
    :class:`DegenerateGeometryError` when the reflector coincides with the
    receiver (the bearing is undefined).
    """
    dx, dy = s.x - p_b.x, s.y - p_b.y
    leg_rx = math.hypot(dx, dy)
    if leg_rx == 0.0:
        raise DegenerateGeometryError("reflector coincides with the receiver")
    leg_tx = math.hypot(s.x - p_u.x, s.y - p_u.y)
    theta = math.atan2(dy, dx)
    return Measurement(theta=theta, tau=(leg_tx + leg_rx) / C0)


def _radius_and_partials(theta, tau, pu_xy, pb_xy):
    """Focal-polar radius r(theta, tau) and its analytic partials.

    All arguments broadcast; ``pu_xy``/``pb_xy`` are (..., 2) arrays.
    Returns (r, dr_dtheta, dr_dtau, feasible, nondegenerate) where the two
    masks flag c0*tau > d and a usable denominator respectively.
    """
    theta = np.asarray(theta, dtype=float)
    tau = np.asarray(tau, dtype=float)
    pu_xy = np.asarray(pu_xy, dtype=float)
    pb_xy = np.asarray(pb_xy, dtype=float)

    rel = pu_xy - pb_xy
    d = np.hypot(rel[..., 0], rel[..., 1])
    phi = np.arctan2(rel[..., 1], rel[..., 0])

    ct = C0 * tau
    feasible = ct > d
    denom = ct - d * np.cos(theta - phi)
    nondegenerate = denom > MIN_DENOM_M
    safe = np.where(nondegenerate, denom, 1.0)

    a_num = ct * ct - d * d
    r = a_num / (2.0 * safe)
    # r = A/B with A = c0^2 tau^2 - d^2 and B = 2 (c0 tau - d cos(theta-phi))
    db_dtheta = 2.0 * d * np.sin(theta - phi)
    dr_dtheta = -a_num * db_dtheta / (4.0 * safe * safe)
    dr_dtau = (2.0 * C0 * C0 * tau * 2.0 * safe - a_num * 2.0 * C0) / (4.0 * safe * safe)
    return r, dr_dtheta, dr_dtau, feasible, nondegenerate


def invert_xy(theta, tau, pu_xy, pb_xy):
    """Vectorized inversion used by the simulator and the scorer.

    Returns (xy, ok) where ``xy`` has shape (..., 2) and ``ok`` is False for
    infeasible or degenerate entries (their coordinates are NaN).
    """
    theta = np.asarray(theta, dtype=float)
    pb_xy = np.asarray(pb_xy, dtype=float)
    r, _, _, feasible, nondeg = _radius_and_partials(theta, tau, pu_xy, pb_xy)
    ok = feasible & nondeg
    r = np.where(ok, r, np.nan)
    xy = np.stack((pb_xy[..., 0] + r * np.cos(theta),
                   pb_xy[..., 1] + r * np.sin(theta)), axis=-1)
    return xy, ok


def invert_measurement(m: Measurement, p_u: Point2, p_b: Point2) -> Point2:
    """Map one (AoA, ToA) pair back to the reflector position.

    Selects the unique ellipse/ray intersection on the measured bearing.
    Raises :class:`InfeasibleMeasurementError` when c0*tau does not exceed
    the TX/RX separation and :class:`DegenerateGeometryError` for grazing
    geometry (denominator under :data:`MIN_DENOM_M`).
    """
    r, _, _, feasible, nondeg = _radius_and_partials(
        m.theta, m.tau, p_u.as_array(), p_b.as_array())
    if not feasible:
        raise InfeasibleMeasurementError(
            f"c0*tau = {C0 * m.tau:.6g} m does not exceed TX/RX distance "
            f"{p_u.distance_to(p_b):.6g} m")
    if not nondeg:
        raise DegenerateGeometryError("grazing geometry: focal denominator ~ 0")
    r = float(r)
    return Point2(p_b.x + r * math.cos(m.theta), p_b.y + r * math.sin(m.theta))


def invert_measurement_cartesian(m: Measurement, p_u: Point2, p_b: Point2) -> Point2:
    """Cartesian-form inversion (x from the closed form, y = x tan(theta)).

    Kept as a cross-check only: tan(theta) is singular near +-pi/2 where the
    polar form stays regular.
    """
    rel_x, rel_y = p_u.x - p_b.x, p_u.y - p_b.y
    d = math.hypot(rel_x, rel_y)
    phi = math.atan2(rel_y, rel_x)
    ct = C0 * m.tau
    if ct <= d:
        raise InfeasibleMeasurementError("c0*tau does not exceed TX/RX distance")
    denom = ct - d * math.cos(m.theta - phi)
    if denom <= MIN_DENOM_M:
        raise DegenerateGeometryError("grazing geometry")
    x = (ct * ct - d * d) * math.cos(m.theta) / (2.0 * denom)
    y = x * math.tan(m.theta)
    return Point2(p_b.x + x, p_b.y + y)


def covariance_entries(theta, tau, var_theta, var_tau, pu_xy, pb_xy):
    """First-order covariance of the inverted position, as broadcast entries.

    Propagates independent (theta, tau) noise through the Jacobian of
    (r cos theta, r sin theta):

        sxx = (r_t c - r s)^2 vt + (r_tau c)^2 vtau
        syy = (r_t s + r c)^2 vt + (r_tau s)^2 vtau
        sxy = (r_t c - r s)(r_t s + r c) vt + r_tau^2 c s vtau

    Returns (sxx, sxy, syy, ok).
    """
    theta = np.asarray(theta, dtype=float)
    var_theta = np.asarray(var_theta, dtype=float)
    var_tau = np.asarray(var_tau, dtype=float)
    r, r_t, r_tau, feasible, nondeg = _radius_and_partials(theta, tau, pu_xy, pb_xy)
    ok = feasible & nondeg
    c, s = np.cos(theta), np.sin(theta)
    dx_dt = r_t * c - r * s
    dy_dt = r_t * s + r * c
    dx_dtau = r_tau * c
    dy_dtau = r_tau * s
    sxx = dx_dt * dx_dt * var_theta + dx_dtau * dx_dtau * var_tau
    syy = dy_dt * dy_dt * var_theta + dy_dtau * dy_dtau * var_tau
    sxy = dx_dt * dy_dt * var_theta + dx_dtau * dy_dtau * var_tau
    return sxx, sxy, syy, ok


def measurement_covariance(m: Measurement, v: MeasurementVariance,
                           p_u: Point2, p_b: Point2) -> np.ndarray:
    """2x2 position covariance of ``invert_measurement`` under measurement
    noise with the given variances.  Symmetric PSD by construction."""
    sxx, sxy, syy, ok = covariance_entries(
        m.theta, m.tau, v.var_theta, v.var_tau, p_u.as_array(), p_b.as_array())
    if not ok:
        raise InfeasibleMeasurementError("infeasible or degenerate measurement")
    return np.array([[float(sxx), float(sxy)], [float(sxy), float(syy)]])


def ellipse_locus(m: Measurement, p_u: Point2, p_b: Point2, n: int) -> list[Point2]:
    """Sample ``n`` points of the constant-delay ellipse (diagnostics).

    Every returned point satisfies |p - p_u| + |p - p_b| = c0 tau by
    construction of the focal-polar parameterization.
    """
    if n < 1:
        raise GeometryError("need at least one sample")
    rel_x, rel_y = p_u.x - p_b.x, p_u.y - p_b.y
    d = math.hypot(rel_x, rel_y)
    ct = C0 * m.tau
    if ct <= d:
        raise InfeasibleMeasurementError("c0*tau does not exceed TX/RX distance")
    phi = math.atan2(rel_y, rel_x)
    psi = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    r = (ct * ct - d * d) / (2.0 * (ct - d * np.cos(psi - phi)))
    xs = p_b.x + r * np.cos(psi)
    ys = p_b.y + r * np.sin(psi)
    return [Point2(float(x), float(y)) for x, y in zip(xs, ys)]
