"""Offline map construction: spectral estimator, band-limited recovery and
the covering-sheaf mask.

The harvested reflector estimates form a sample cloud drawn from the
(unknown) reflector region.  Its normalized 2-D Fourier statistic

    (1/N) sum_i exp(-2 pi j (l1 x_i + l2 y_i))

is an unbiased, variance-(1-|M|^2)/N estimator of the region's normalized
spectrum, which is how we decide when enough test points were collected.
The region indicator itself is recovered on a grid with the classic
iterative non-uniform-sampling scheme (low-pass kernel + resampling
correction term), and the epsilon-covering sheaf is the tightest
superlevel set of the recovered field that still contains a 1-epsilon
fraction of the sample cloud.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve


class MapBuilderError(ValueError):
    """Invalid map-construction request."""


class RecoveryDivergenceError(MapBuilderError):
    """Iterative recovery diverged; carries the iterate history."""

    def __init__(self, message: str, norms: list[float], diffs: list[float]):
        super().__init__(message)
        self.norms = norms
        self.diffs = diffs


@dataclass
class SampleCloud:
    """Discrete reflector samples with optional weights (default 1)."""

    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size == 0 or not np.all(np.isfinite(self.points)):
            raise MapBuilderError("cloud must be non-empty and finite")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape[0] != self.points.shape[0]:
                raise MapBuilderError("one weight per point")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class GridField:
    """Scalar field sampled on a regular grid.

    Node (i, j) sits at origin + (i*pitch, j*pitch) and represents the
    pitch x pitch cell centered on it; ``values`` is indexed [i, j].
    """

    origin: tuple[float, float]
    pitch: float
    nx: int
    ny: int
    values: np.ndarray = None

    def __post_init__(self):
        if self.pitch <= 0.0:
            raise MapBuilderError("pitch must be positive")
        if self.values is None:
            self.values = np.zeros((self.nx, self.ny))
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.nx, self.ny):
            raise MapBuilderError("values shape must be (nx, ny)")

    @classmethod
    def from_bounds(cls, xmin, xmax, ymin, ymax, pitch, pad=0.0) -> "GridField":
        ox, oy = xmin - pad, ymin - pad
        nx = int(math.floor((xmax + pad - ox) / pitch)) + 1
        ny = int(math.floor((ymax + pad - oy) / pitch)) + 1
        return cls(origin=(ox, oy), pitch=pitch, nx=nx, ny=ny)

    def geometry_like(self) -> "GridField":
        return GridField(origin=self.origin, pitch=self.pitch, nx=self.nx, ny=self.ny)

    def xs(self) -> np.ndarray:
        return self.origin[0] + np.arange(self.nx) * self.pitch

    def ys(self) -> np.ndarray:
        return self.origin[1] + np.arange(self.ny) * self.pitch

    def cell_centers(self, mask: np.ndarray | None = None) -> np.ndarray:
        """(M, 2) centers of all (or masked) cells."""
        gx, gy = np.meshgrid(self.xs(), self.ys(), indexing="ij")
        pts = np.column_stack((gx.ravel(), gy.ravel()))
        if mask is not None:
            pts = pts[np.asarray(mask, dtype=bool).ravel()]
        return pts

    def nearest_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ix = np.clip(np.round((pts[:, 0] - self.origin[0]) / self.pitch).astype(int),
                     0, self.nx - 1)
        iy = np.clip(np.round((pts[:, 1] - self.origin[1]) / self.pitch).astype(int),
                     0, self.ny - 1)
        return ix, iy

    def interpolate(self, points: np.ndarray) -> np.ndarray:
        """Bilinear interpolation; points outside the grid read as 0."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        fx = (pts[:, 0] - self.origin[0]) / self.pitch
        fy = (pts[:, 1] - self.origin[1]) / self.pitch
        i0 = np.floor(fx).astype(int)
        j0 = np.floor(fy).astype(int)
        tx = fx - i0
        ty = fy - j0
        out = np.zeros(len(pts))
        for di, dj, wgt in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                            (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
            ii = i0 + di
            jj = j0 + dj
            ok = (ii >= 0) & (ii < self.nx) & (jj >= 0) & (jj < self.ny)
            out[ok] += wgt[ok] * self.values[ii[ok], jj[ok]]
        return out

    def splat(self, points: np.ndarray, values: np.ndarray | float = 1.0) -> np.ndarray:
        """Adjoint of :meth:`interpolate`: deposit point masses bilinearly.

        Returns an (nx, ny) impulse-mass array (units: mass per node, not
        per area); callers convolving against a continuum kernel should not
        multiply by pitch^2.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vals = np.broadcast_to(np.asarray(values, dtype=float), (len(pts),))
        grid = np.zeros((self.nx, self.ny))
        fx = (pts[:, 0] - self.origin[0]) / self.pitch
        fy = (pts[:, 1] - self.origin[1]) / self.pitch
        i0 = np.floor(fx).astype(int)
        j0 = np.floor(fy).astype(int)
        tx = fx - i0
        ty = fy - j0
        for di, dj, wgt in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                            (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
            ii = i0 + di
            jj = j0 + dj
            ok = (ii >= 0) & (ii < self.nx) & (jj >= 0) & (jj < self.ny)
            np.add.at(grid, (ii[ok], jj[ok]), wgt[ok] * vals[ok])
        return grid


@dataclass
class SheafMask:
    """Boolean covering-sheaf mask on a grid, with its quantile level."""

    origin: tuple[float, float]
    pitch: float
    nx: int
    ny: int
    mask: np.ndarray
    epsilon: float
    threshold: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise MapBuilderError("epsilon must lie in (0, 1)")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.nx, self.ny):
            raise MapBuilderError("mask shape must be (nx, ny)")

    @property
    def area(self) -> float:
        return float(self.mask.sum()) * self.pitch * self.pitch

    def as_field(self) -> GridField:
        return GridField(origin=self.origin, pitch=self.pitch, nx=self.nx,
                         ny=self.ny, values=self.mask.astype(float))

    def cell_centers(self) -> np.ndarray:
        return self.as_field().cell_centers(self.mask)


# ---------------------------------------------------------------------------
# spectral estimator

def fourier_estimate(cloud: SampleCloud, lambda1, lambda2, volume: float | None = None):
    """Normalized non-uniform Fourier statistic of the sample cloud.

    Returns (1/N) sum_i w_i exp(-2 pi j (l1 x_i + l2 y_i)) / mean(w);
    multiply by ``volume`` when the sampled region's area is known and the
    unnormalized spectrum is wanted.  ``lambda1``/``lambda2`` broadcast, so
    arrays of frequencies evaluate in one call.
    """
    l1 = np.asarray(lambda1, dtype=float)
    l2 = np.asarray(lambda2, dtype=float)
    x = cloud.points[:, 0]
    y = cloud.points[:, 1]
    phase = 2.0 * np.pi * (l1[..., None] * x + l2[..., None] * y)
    ph = np.exp(-1j * phase)
    if cloud.weights is None:
        out = ph.mean(axis=-1)
    else:
        w = cloud.weights
        out = (ph * w).sum(axis=-1) / w.sum()
    if volume is not None:
        out = out * volume
    return out if out.ndim else complex(out)


def convergence_curve(cloud: SampleCloud, lambdas, prefix_sizes):
    """|estimate| in dB for growing sample prefixes.

    lambdas: sequence of (l1, l2) pairs; prefix_sizes: ascending ints <= N.
    Returns a dict with 'prefix_sizes' (P,), 'lambdas' (L, 2) and 'db'
    (P, L).  Deterministic for a fixed cloud ordering.
    """
    sizes = np.asarray(prefix_sizes, dtype=int)
    if sizes.size == 0 or np.any(sizes <= 0):
        raise MapBuilderError("prefix sizes must be positive")
    if np.any(np.diff(sizes) <= 0):
        raise MapBuilderError("prefix sizes must be strictly ascending")
    if sizes[-1] > len(cloud):
        raise MapBuilderError("prefix size exceeds the cloud")
    lam = np.atleast_2d(np.asarray(lambdas, dtype=float))
    x = cloud.points[:, 0]
    y = cloud.points[:, 1]
    phase = 2.0 * np.pi * (lam[:, 0][:, None] * x + lam[:, 1][:, None] * y)
    csum = np.cumsum(np.exp(-1j * phase), axis=1)   # (L, N)
    vals = csum[:, sizes - 1] / sizes               # (L, P)
    db = 10.0 * np.log10(np.maximum(np.abs(vals.T), 1e-300))
    return {"prefix_sizes": sizes, "lambdas": lam, "db": db}


def estimator_variance(modulus: float, n: int) -> float:
    """Theoretical variance (1 - |M|^2)/N of the normalized estimator."""
    return (1.0 - modulus * modulus) / n


# ---------------------------------------------------------------------------
# iterative band-limited recovery

def lowpass_kernel(grid: GridField, lambda_m: float) -> np.ndarray:
    """Separable sin(2 pi lm t)/(pi t) kernel sampled on grid offsets.

    Full (2nx-1, 2ny-1) support so that a 'same'-mode convolution equals
    the exact linear convolution restricted to the grid.
    """
    def axis(n):
        t = np.arange(-(n - 1), n) * grid.pitch
        out = np.empty_like(t)
        nz = t != 0.0
        out[nz] = np.sin(2.0 * np.pi * lambda_m * t[nz]) / (np.pi * t[nz])
        out[~nz] = 2.0 * lambda_m
        return out

    return np.outer(axis(grid.nx), axis(grid.ny))


def _convolve(grid_values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return fftconvolve(grid_values, kernel, mode="same")


@dataclass
class RecoveryTrace:
    diffs: list[float] = field(default_factory=list)
    norms: list[float] = field(default_factory=list)


def density_weights(points: np.ndarray, cell: float) -> np.ndarray:
    """Inverse of the sample count within a cell/2 radius of each sample.

    Caps the sampling-comb mass per resolution cell at roughly one so the
    recovery iteration stays contractive on clustered clouds (repeated or
    near-coincident samples would otherwise multiply the comb gain)."""
    from scipy.spatial import cKDTree

    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tree = cKDTree(pts)
    counts = np.array(tree.query_ball_point(pts, r=cell / 2.0,
                                            return_length=True))
    return 1.0 / np.maximum(counts, 1)


def recovery_step(field_values: np.ndarray, grid: GridField, kernel: np.ndarray,
                  lowpassed_samples: np.ndarray, points: np.ndarray,
                  alpha: float, weights: np.ndarray | float = 1.0) -> np.ndarray:
    """One recovery iteration on grid values.

    new = alpha * (l * M_d) + l * M - alpha * l * (M sampled on the cloud),
    with the comb terms realized as (weighted) interpolate-then-splat and
    the field convolution carrying the pitch^2 area element.
    """
    work = grid.geometry_like()
    work.values = field_values
    resampled = work.splat(points, weights * work.interpolate(points))
    lowpass_field = _convolve(field_values, kernel) * grid.pitch * grid.pitch
    return alpha * (lowpassed_samples - _convolve(resampled, kernel)) + lowpass_field


def recover_map(cloud: SampleCloud, grid: GridField, alpha: float = 0.2,
                iterations: int = 10, lambda_m: float = 1.0,
                return_trace: bool = False):
    """Recover the band-limited reflector indicator field from the cloud.

    alpha is the relaxation constant in (0, 2); lambda_m the band limit in
    cycles/m, representable only when lambda_m <= 1/(2 pitch).  Divergence
    (iterate norm growing more than 10x over 3 iterations) raises
    :class:`RecoveryDivergenceError` carrying the history.
    """
    if not (0.0 < alpha < 2.0):
        raise MapBuilderError(f"alpha must lie in (0, 2), got {alpha}")
    if iterations < 1:
        raise MapBuilderError("need at least one iteration")
    nyquist = 1.0 / (2.0 * grid.pitch)
    if lambda_m > nyquist * (1.0 + 1e-12):
        raise MapBuilderError(
            f"band limit {lambda_m} exceeds grid Nyquist {nyquist}")

    kernel = lowpass_kernel(grid, lambda_m)
    weights = 1.0 if cloud.weights is None else cloud.weights
    impulses = grid.geometry_like().splat(cloud.points, weights)
    lowpassed_samples = _convolve(impulses, kernel)

    values = np.zeros((grid.nx, grid.ny))
    trace = RecoveryTrace()
    for _ in range(iterations):
        new = recovery_step(values, grid, kernel, lowpassed_samples,
                            cloud.points, alpha, weights=weights)
        trace.diffs.append(float(np.linalg.norm(new - values)))
        trace.norms.append(float(np.linalg.norm(new)))
        values = new
        if len(trace.norms) >= 4 and trace.norms[-4] > 0.0 \
                and trace.norms[-1] > 10.0 * trace.norms[-4]:
            raise RecoveryDivergenceError(
                "recovery iterates grew more than 10x over 3 iterations",
                norms=trace.norms, diffs=trace.diffs)

    out = GridField(origin=grid.origin, pitch=grid.pitch, nx=grid.nx, ny=grid.ny,
                    values=values)
    return (out, trace) if return_trace else out


# ---------------------------------------------------------------------------
# covering sheaf

def covering_sheaf(field: GridField, cloud: SampleCloud, epsilon: float) -> SheafMask:
    """Quantile level-set sheaf: the highest threshold whose superlevel set
    still contains at least a 1-epsilon fraction of the cloud (ties broken
    toward inclusion)."""
    if not (0.0 < epsilon < 1.0):
        raise MapBuilderError("epsilon must lie in (0, 1)")
    ix, iy = field.nearest_index(cloud.points)
    v = field.values[ix, iy]
    n = len(v)
    k = min(max(int(math.ceil((1.0 - epsilon) * n)), 1), n)
    threshold = float(np.partition(v, n - k)[n - k])
    mask = field.values >= threshold
    return SheafMask(origin=field.origin, pitch=field.pitch, nx=field.nx,
                     ny=field.ny, mask=mask, epsilon=epsilon, threshold=threshold)


def covering_sheaf_gaussian(cloud: SampleCloud, covariances: np.ndarray,
                            grid: GridField, epsilon: float) -> SheafMask:
    """Alternative sheaf: union of per-sample covariance ellipses at the
    1-epsilon chi-square level (two degrees of freedom)."""
    from scipy.stats import chi2

    if not (0.0 < epsilon < 1.0):
        raise MapBuilderError("epsilon must lie in (0, 1)")
    cov = np.asarray(covariances, dtype=float)
    if cov.shape != (len(cloud), 2, 2):
        raise MapBuilderError("covariances must be (N, 2, 2)")
    level = chi2.ppf(1.0 - epsilon, df=2)
    mask = np.zeros((grid.nx, grid.ny), dtype=bool)
    xs = grid.xs()
    ys = grid.ys()
    for p, V in zip(cloud.points, cov):
        v11, v12, v22 = V[0, 0], V[0, 1], V[1, 1]
        det = v11 * v22 - v12 * v12
        if det <= 0.0:
            ix, iy = grid.nearest_index(p[None, :])
            mask[ix[0], iy[0]] = True
            continue
        # bounding box of the ellipse, then the exact quadratic-form test
        half_x = math.sqrt(level * v11)
        half_y = math.sqrt(level * v22)
        i0, i1 = np.searchsorted(xs, (p[0] - half_x, p[0] + half_x))
        j0, j1 = np.searchsorted(ys, (p[1] - half_y, p[1] + half_y))
        i1 = min(i1 + 1, grid.nx)
        j1 = min(j1 + 1, grid.ny)
        if i0 >= i1 or j0 >= j1:
            continue
        lx = xs[i0:i1][:, None] - p[0]
        ly = ys[j0:j1][None, :] - p[1]
        q = (lx * lx * v22 - 2.0 * lx * ly * v12 + ly * ly * v11) / det
        mask[i0:i1, j0:j1] |= q <= level
    return SheafMask(origin=grid.origin, pitch=grid.pitch, nx=grid.nx, ny=grid.ny,
                     mask=mask, epsilon=epsilon, threshold=float("nan"))


def sheaf_from_disks(centers: np.ndarray, radius: float, grid: GridField,
                     epsilon: float) -> SheafMask:
    """Rasterize a union of disks as a sheaf mask (ground-truth sheaves for
    generated environments)."""
    mask = np.zeros((grid.nx, grid.ny), dtype=bool)
    xs = grid.xs()
    ys = grid.ys()
    for c in np.atleast_2d(np.asarray(centers, dtype=float)):
        i0, i1 = np.searchsorted(xs, (c[0] - radius, c[0] + radius))
        j0, j1 = np.searchsorted(ys, (c[1] - radius, c[1] + radius))
        i1 = min(i1 + 1, grid.nx)
        j1 = min(j1 + 1, grid.ny)
        if i0 >= i1 or j0 >= j1:
            continue
        lx = xs[i0:i1][:, None] - c[0]
        ly = ys[j0:j1][None, :] - c[1]
        mask[i0:i1, j0:j1] |= lx * lx + ly * ly <= radius * radius
    return SheafMask(origin=grid.origin, pitch=grid.pitch, nx=grid.nx, ny=grid.ny,
                     mask=mask, epsilon=epsilon, threshold=float("nan"))
