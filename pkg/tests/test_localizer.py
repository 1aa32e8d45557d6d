import math
from dataclasses import replace

import numpy as np
import pytest

from reflectmap.envsim import (
    EnvironmentSpec,
    NoiseModel,
    generate_environment,
    rectangle,
    sample_measurements,
)
from reflectmap.geometry import C0, Measurement, MeasurementVariance, Point2, forward_path
from reflectmap.localizer import (
    AscentError,
    LocalizerError,
    OnlineConfig,
    ScoreContext,
    annulus_region,
    clamp_to_polygon,
    constraint_mask,
    gradient_ascent,
    localize,
    prelocalize,
    q_score,
    q_scores,
    region_from_polygon,
    sector_subset,
    sector_union,
)
from reflectmap.mapbuilder import GridField, SheafMask


def make_sheaf(origin, pitch, nx, ny, true_cells, epsilon=0.05):
    mask = np.zeros((nx, ny), dtype=bool)
    for i, j in true_cells:
        mask[i, j] = True
    return SheafMask(origin=origin, pitch=pitch, nx=nx, ny=ny, mask=mask,
                     epsilon=epsilon)


def point_sheaf(points, pitch=0.25, pad=5.0, epsilon=0.05):
    """Sheaf whose mask is exactly the cells containing the given points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    grid = GridField.from_bounds(pts[:, 0].min(), pts[:, 0].max(),
                                 pts[:, 1].min(), pts[:, 1].max(), pitch, pad=pad)
    ix, iy = grid.nearest_index(pts)
    mask = np.zeros((grid.nx, grid.ny), dtype=bool)
    mask[ix, iy] = True
    return SheafMask(origin=grid.origin, pitch=grid.pitch, nx=grid.nx,
                     ny=grid.ny, mask=mask, epsilon=epsilon)


def zero_noise_ctx(reflectors, p_u, bs, rol, pitch=0.25, combine="per_path",
                   **kw):
    entries = []
    for s in np.atleast_2d(reflectors):
        m = forward_path(p_u, bs, Point2(*s))
        entries.append((m, MeasurementVariance(0.0, 0.0)))
    sheaf = point_sheaf(reflectors, pitch=pitch)
    return ScoreContext(measurements=entries, sheaf=sheaf, bs=bs, rol=rol,
                        combine=combine, **kw)


class TestQScore:
    def test_single_cell_at_mapped_reflector(self):
        bs = Point2(0.0, 0.0)
        p_u = Point2(10.0, 0.0)
        s = np.array([5.0, 5.0])
        m = forward_path(p_u, bs, Point2(*s))
        pitch = 0.25
        grid = GridField.from_bounds(s[0], s[0], s[1], s[1], pitch)
        sheaf = SheafMask(origin=(s[0], s[1]), pitch=pitch, nx=1, ny=1,
                          mask=np.ones((1, 1), dtype=bool), epsilon=0.05)
        for combine in ("shared", "per_path"):
            ctx = ScoreContext(measurements=[(m, MeasurementVariance(0, 0))],
                               sheaf=sheaf, bs=bs, rol=rectangle(0, -10, 20, 10),
                               combine=combine, var_floor=0.1)
            assert q_score(ctx, p_u) == pytest.approx(pitch ** 2, rel=1e-12)

    def test_distant_sheaf_scores_negligibly(self):
        bs = Point2(0.0, 0.0)
        p_u = Point2(10.0, 0.0)
        m = forward_path(p_u, bs, Point2(5.0, 5.0))
        sheaf = make_sheaf(origin=(500.0, 500.0), pitch=0.25, nx=3, ny=3,
                           true_cells=[(1, 1)])
        ctx = ScoreContext(measurements=[(m, MeasurementVariance(0, 0))],
                           sheaf=sheaf, bs=bs, rol=rectangle(0, -10, 20, 10),
                           var_floor=0.1)
        assert q_score(ctx, p_u) < 1e-30 * 0.25 ** 2

    def test_true_position_beats_offset_on_clustered_scene(self):
        # clustered reflectors keep the shared-reflector integrand coherent;
        # oracle: exhaustive grid evaluation of the score over the RoL
        bs = Point2(0.0, 0.0)
        p_u = Point2(14.0, -3.0)
        reflectors = np.array([[6.0, 8.0], [6.6, 8.2], [6.2, 8.7]])
        rol = rectangle(5.0, -12.0, 25.0, 6.0)
        ctx = zero_noise_ctx(reflectors, p_u, bs, rol, combine="shared",
                             var_floor=0.5)
        q_true = q_score(ctx, p_u)
        q_off = q_score(ctx, Point2(p_u.x + 5.0, p_u.y))
        assert q_true > q_off
        grid = region_from_polygon(rol, 0.5)
        cells = grid.cell_centers()
        qs = q_scores(ctx, cells)
        i_true = int(np.argmin(np.hypot(cells[:, 0] - p_u.x, cells[:, 1] - p_u.y)))
        i_off = int(np.argmin(np.hypot(cells[:, 0] - p_u.x - 5.0,
                                       cells[:, 1] - p_u.y)))
        assert qs[i_true] > qs[i_off]

    def test_per_path_argmax_anchors_at_truth(self):
        # the independent per-measurement marginalization localizes exactly:
        # oracle is exhaustive grid evaluation over the RoL
        bs = Point2(0.0, 0.0)
        p_u = Point2(14.0, -3.0)
        reflectors = np.array([[6.0, 8.0], [-3.0, 7.0], [10.0, -9.0]])
        rol = rectangle(5.0, -12.0, 25.0, 6.0)
        ctx = zero_noise_ctx(reflectors, p_u, bs, rol, combine="per_path",
                             var_floor=0.25)
        grid = region_from_polygon(rol, 0.5)
        cells = grid.cell_centers()
        qs = q_scores(ctx, cells)
        best = cells[int(np.argmax(qs))]
        assert math.hypot(best[0] - p_u.x, best[1] - p_u.y) <= 0.5 * math.sqrt(2)

    def test_permutation_invariance_exact(self):
        bs = Point2(0.0, 0.0)
        p_u = Point2(12.0, 4.0)
        reflectors = np.array([[3.0, 9.0], [-4.0, 6.0], [8.0, -5.0]])
        rol = rectangle(0, -10, 20, 10)
        entries = []
        for s in reflectors:
            m = forward_path(p_u, bs, Point2(*s))
            entries.append((m, MeasurementVariance(1e-6, 1e-18)))
        sheaf = point_sheaf(reflectors)
        probe = Point2(11.5, 3.5)
        vals = []
        for perm in ([0, 1, 2], [2, 0, 1], [1, 2, 0], [2, 1, 0]):
            ctx = ScoreContext(measurements=[entries[i] for i in perm],
                               sheaf=sheaf, bs=bs, rol=rol, combine="per_path")
            vals.append(q_score(ctx, probe))
        assert len(set(vals)) == 1

    def test_covariance_scaling_never_decreases_score(self):
        bs = Point2(0.0, 0.0)
        p_u = Point2(12.0, 4.0)
        reflectors = np.array([[3.0, 9.0], [-4.0, 6.0], [8.0, -5.0]])
        rol = rectangle(0, -10, 20, 10)
        rng = np.random.default_rng(0)
        probes = rng.uniform((2, -8), (18, 8), (40, 2))
        for combine in ("shared", "per_path"):
            base = zero_noise_ctx(reflectors, p_u, bs, rol, combine=combine,
                                  var_floor=0.25)
            wide = replace(base, cov_scale=3.0, _cells=None, _cell_w=None)
            assert np.all(q_scores(wide, probes) >= q_scores(base, probes) - 1e-15)

    def test_any_infeasible_measurement_zeroes_score(self):
        bs = Point2(0.0, 0.0)
        p_u = Point2(10.0, 0.0)
        m_good = forward_path(p_u, bs, Point2(5.0, 5.0))
        m_short = Measurement(theta=0.1, tau=1.0 / C0)  # c0 tau = 1 m
        sheaf = point_sheaf(np.array([[5.0, 5.0]]))
        ctx = ScoreContext(
            measurements=[(m_good, MeasurementVariance(0, 0)),
                          (m_short, MeasurementVariance(0, 0))],
            sheaf=sheaf, bs=bs, rol=rectangle(0, -10, 20, 10), var_floor=0.1)
        assert q_score(ctx, p_u) == 0.0

    def test_chunked_batches_match_single_evaluations(self):
        bs = Point2(0.0, 0.0)
        p_u = Point2(9.0, 2.0)
        reflectors = np.array([[3.0, 9.0], [-4.0, 6.0]])
        ctx = zero_noise_ctx(reflectors, p_u, bs, rectangle(0, -10, 20, 10),
                             var_floor=0.3)
        rng = np.random.default_rng(1)
        pts = rng.uniform((1, -9), (19, 9), (700, 2))
        batch = q_scores(ctx, pts)
        singles = np.array([q_score(ctx, Point2(*p)) for p in pts[:20]])
        assert np.allclose(batch[:20], singles, rtol=0, atol=0)


class TestPreprocessing:
    def test_sector_full_circle(self):
        sheaf = point_sheaf(np.array([[5.0, 5.0], [-3.0, 2.0], [1.0, -4.0]]))
        reg = sector_subset(sheaf, Point2(0, 0), 0.3, math.pi)
        assert reg.mask.sum() == sheaf.mask.sum()

    def test_sector_single_cell_due_north(self):
        sheaf = point_sheaf(np.array([[0.0, 10.0]]), pad=2.0)
        reg = sector_subset(sheaf, Point2(0, 0), math.pi / 2, 0.1)
        assert reg.mask.sum() == 1

    def test_sector_requires_positive_delta(self):
        sheaf = point_sheaf(np.array([[0.0, 10.0]]))
        with pytest.raises(LocalizerError):
            sector_subset(sheaf, Point2(0, 0), 0.0, 0.0)

    def test_annulus_contains_true_user(self):
        bs = Point2(0.0, 0.0)
        p_u = Point2(12.0, -7.0)
        s = np.array([4.0, 9.0])
        m = forward_path(p_u, bs, Point2(*s))
        sheaf = point_sheaf(s)
        sector = sector_subset(sheaf, bs, m.theta, 0.05)
        base = region_from_polygon(rectangle(0, -15, 20, 15), 0.5)
        margin = 1e-9
        reg = annulus_region(base, bs, sector, m.tau - margin, m.tau + margin,
                             guard=math.sqrt(2.0) * (sheaf.pitch + 0.25))
        ix = int(round((p_u.x - reg.origin[0]) / reg.pitch))
        iy = int(round((p_u.y - reg.origin[1]) / reg.pitch))
        assert reg.mask[ix, iy]

    def test_annulus_unbounded_upper_delay_covers_rol(self):
        bs = Point2(0.0, 0.0)
        sheaf = point_sheaf(np.array([[4.0, 9.0]]))
        sector = sector_subset(sheaf, bs, math.atan2(9, 4), 0.2)
        base = region_from_polygon(rectangle(0, -15, 20, 15), 1.0)
        reg = annulus_region(base, bs, sector, 1e-12, 1.0)  # c0 tau1 huge
        assert reg.mask.sum() == base.mask.sum()

    def test_annulus_empty_sector_empty_region(self):
        bs = Point2(0.0, 0.0)
        sheaf = point_sheaf(np.array([[4.0, 9.0]]))
        sector = sector_subset(sheaf, bs, -math.atan2(9, 4), 0.01)
        base = region_from_polygon(rectangle(0, -15, 20, 15), 1.0)
        assert sector.mask.sum() == 0
        reg = annulus_region(base, bs, sector, 1e-9, 2e-9)
        assert reg.mask.sum() == 0

    def test_prelocalize_soundness_zero_noise(self):
        spec = EnvironmentSpec(family="rectangle", width=50, height=50,
                              wall_spacing=2.5, rol_margin=6.0)
        env = generate_environment(spec, seed=2)
        sheaf = point_sheaf(env.reflectors, pad=2.0)
        noise = NoiseModel(0.0, 0.0, seed=31)
        rng = np.random.default_rng(7)
        for trial in range(50):
            p_u = Point2(*rng.uniform(8, 42, 2))
            mset = sample_measurements(env, p_u, 3, noise, epoch=trial)
            ctx = ScoreContext(measurements=mset.entries, sheaf=sheaf,
                               bs=env.bs, rol=env.rol, prelocalize_pitch=0.5)
            reg = prelocalize(ctx)
            assert not reg.fallback_full
            ix = int(round((p_u.x - reg.origin[0]) / reg.pitch))
            iy = int(round((p_u.y - reg.origin[1]) / reg.pitch))
            assert reg.mask[ix, iy]
            assert constraint_mask(ctx, p_u.as_array()[None, :])[0]

    def test_prelocalize_area_shrinks_with_more_measurements(self):
        spec = EnvironmentSpec(family="rectangle", width=50, height=50,
                              wall_spacing=2.5, rol_margin=6.0)
        env = generate_environment(spec, seed=2)
        sheaf = point_sheaf(env.reflectors, pad=2.0)
        p_u = Point2(20.0, 30.0)
        mset = sample_measurements(env, p_u, 5, NoiseModel(0, 0, seed=3), epoch=0)
        areas = []
        for k in (1, 2, 3, 4, 5):
            ctx = ScoreContext(measurements=mset.entries[:k], sheaf=sheaf,
                               bs=env.bs, rol=env.rol, prelocalize_pitch=0.5)
            areas.append(prelocalize(ctx).area)
        assert all(a2 <= a1 for a1, a2 in zip(areas, areas[1:]))

    def test_prelocalize_fallback_flag(self):
        bs = Point2(0.0, 0.0)
        sheaf = point_sheaf(np.array([[5.0, 5.0]]))
        # delay far too short for any position in the rol
        m = Measurement(theta=math.atan2(5, 5), tau=0.5 / C0)
        ctx = ScoreContext(measurements=[(m, MeasurementVariance(0, 0))],
                           sheaf=sheaf, bs=bs, rol=rectangle(30, 30, 60, 60),
                           prelocalize_pitch=1.0)
        reg = prelocalize(ctx)
        assert reg.fallback_full
        assert reg.mask.sum() == region_from_polygon(ctx.rol, 1.0).mask.sum()


class TestGradientAscent:
    def quad_hook(self, target):
        def score(pts):
            d = np.atleast_2d(pts) - target
            return -(d * d).sum(axis=1)

        return score

    def _dummy_ctx(self):
        bs = Point2(0.0, 0.0)
        p_u = Point2(10.0, 0.0)
        return zero_noise_ctx(np.array([[5.0, 5.0]]), p_u, bs,
                              rectangle(-50, -50, 50, 50), var_floor=0.2)

    def test_zero_gradient_terminates_immediately(self):
        ctx = self._dummy_ctx()
        start = Point2(7.0, 3.0)
        p, trace = gradient_ascent(ctx, start, gamma=0.3,
                                   score_fn=self.quad_hook(np.array([7.0, 3.0])))
        assert len(trace) <= 3
        assert p.x == start.x and p.y == start.y

    def test_quadratic_converges_below_stability_threshold(self):
        ctx = self._dummy_ctx()
        target = np.array([3.0, -2.0])
        p, trace = gradient_ascent(ctx, Point2(8.0, 6.0), gamma=0.4, tol=1e-4,
                                   max_iter=500,
                                   score_fn=self.quad_hook(target))
        assert math.hypot(p.x - target[0], p.y - target[1]) < 1e-2

    def test_quadratic_diverges_above_threshold_but_best_is_kept(self):
        ctx = self._dummy_ctx()
        target = np.array([3.0, -2.0])
        start = Point2(4.0, -1.0)
        score = self.quad_hook(target)
        p, trace = gradient_ascent(ctx, start, gamma=1.2, tol=1e-6, max_iter=40,
                                   score_fn=score)
        assert score(np.array([[p.x, p.y]]))[0] >= \
            score(np.array([[start.x, start.y]]))[0] - 1e-12

    def test_backtracking_trace_is_monotone(self):
        ctx = self._dummy_ctx()
        p_u = Point2(10.0, 0.0)
        start = Point2(9.0, 1.0)
        _, trace = gradient_ascent(ctx, start, dx=0.05, max_iter=60,
                                   backtracking=True)
        qs = [q for _, _, q in trace]
        assert all(b >= a - 1e-15 for a, b in zip(qs, qs[1:]))

    def test_final_never_scores_below_start(self):
        ctx = self._dummy_ctx()
        start = Point2(6.0, -4.0)
        p, trace = gradient_ascent(ctx, start, dx=0.1, max_iter=50)
        assert q_score(ctx, p) >= trace[0][2] - 1e-12

    def test_iterates_clamped_to_rol(self):
        ctx = self._dummy_ctx()
        target = np.array([200.0, 0.0])  # pulls outside the rol
        p, trace = gradient_ascent(ctx, Point2(45.0, 0.0), gamma=1e-3,
                                   max_iter=100, score_fn=self.quad_hook(target))
        xs = np.array([[x, y] for x, y, _ in trace])
        from reflectmap.envsim import polygon_contains

        assert polygon_contains(xs, ctx.rol, tol=1e-9).all()

    def test_non_finite_score_raises_with_trace(self):
        ctx = self._dummy_ctx()

        def bad(pts):
            return np.full(len(np.atleast_2d(pts)), np.nan)

        with pytest.raises(AscentError) as err:
            gradient_ascent(ctx, Point2(1.0, 1.0), score_fn=bad)
        assert err.value.traces


class TestLocalize:
    def test_single_cell_rol_returns_center(self):
        bs = Point2(-5.0, 0.0)
        sheaf = point_sheaf(np.array([[100.0, 100.0]]), pad=1.0)
        m = Measurement(theta=0.3, tau=300.0 / C0)
        ctx = ScoreContext(measurements=[(m, MeasurementVariance(0, 0))],
                           sheaf=sheaf, bs=bs, rol=rectangle(9.6, 9.6, 10.4, 10.4),
                           prelocalize_pitch=1.0, var_floor=0.2)
        res = localize(ctx, OnlineConfig(n_starts=4, seed=3))
        assert res.starts == 1
        assert (res.p_hat.x, res.p_hat.y) == (10.0, 10.0)

    def test_zero_noise_three_paths_recovers_user(self):
        bs = Point2(25.0, 25.0)
        p_u = Point2(33.0, 14.0)
        reflectors = np.array([[5.0, 40.0], [45.0, 42.0], [12.0, 6.0]])
        rol = rectangle(2, 2, 48, 48)
        ctx = zero_noise_ctx(reflectors, p_u, bs, rol, pitch=0.125,
                             var_floor=0.125, prelocalize_pitch=0.5)
        res = localize(ctx, OnlineConfig(n_starts=8, dx=0.05, tol=0.01,
                                         max_iter=120, backtracking=True, seed=5))
        assert math.hypot(res.p_hat.x - p_u.x, res.p_hat.y - p_u.y) < 0.25
        assert q_score(ctx.with_region(sector_union(ctx)), res.p_hat) == \
            pytest.approx(res.score, rel=1e-9)

    def test_deterministic_given_seed(self):
        bs = Point2(25.0, 25.0)
        p_u = Point2(18.0, 30.0)
        reflectors = np.array([[5.0, 40.0], [45.0, 42.0], [12.0, 6.0]])
        rol = rectangle(2, 2, 48, 48)
        ctx = zero_noise_ctx(reflectors, p_u, bs, rol, var_floor=0.2,
                             prelocalize_pitch=0.5)
        cfg = OnlineConfig(n_starts=6, dx=0.1, max_iter=40, seed=11)
        a = localize(ctx, cfg)
        b = localize(ctx, cfg)
        assert (a.p_hat.x, a.p_hat.y, a.score) == (b.p_hat.x, b.p_hat.y, b.score)

    def test_result_inside_rol(self):
        bs = Point2(25.0, 25.0)
        p_u = Point2(10.0, 10.0)
        reflectors = np.array([[5.0, 40.0], [45.0, 42.0]])
        rol = rectangle(8, 8, 42, 42)
        ctx = zero_noise_ctx(reflectors, p_u, bs, rol, var_floor=0.3)
        res = localize(ctx, OnlineConfig(n_starts=4, max_iter=30, seed=0))
        from reflectmap.envsim import polygon_contains

        assert polygon_contains(np.array([[res.p_hat.x, res.p_hat.y]]), rol,
                                tol=1e-9)[0]

    def test_empty_measurements_rejected(self):
        sheaf = point_sheaf(np.array([[5.0, 5.0]]))
        with pytest.raises(LocalizerError):
            ScoreContext(measurements=[], sheaf=sheaf, bs=Point2(0, 0),
                         rol=rectangle(0, 0, 10, 10))


class TestClamp:
    def test_inside_points_untouched(self):
        poly = rectangle(0, 0, 10, 10)
        pts = np.array([[5.0, 5.0], [0.1, 9.9]])
        assert np.array_equal(clamp_to_polygon(pts, poly), pts)

    def test_outside_points_projected(self):
        poly = rectangle(0, 0, 10, 10)
        out = clamp_to_polygon(np.array([[15.0, 5.0], [-3.0, -4.0]]), poly)
        assert np.allclose(out, [[10.0, 5.0], [0.0, 0.0]])
