"""Command-line experiment harness.

Subcommands: simulate | build-map | localize | experiment-cdf | bounds.
Every run writes a manifest (config hash, seed, package version) next to
its artifacts; identical config + seed reproduce identical files.  Exit
codes: 0 success, 2 config error, 3 runtime/model error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bounds as bounds_mod
from . import io as rio
from .config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    config_to_json,
    load_config,
)
from .envsim import EnvironmentSpec, sample_measurements
from .experiments import (
    build_environment,
    cloud_from_log,
    build_map_products,
    draw_user,
    make_context,
    offline_test_points,
    q_surface,
    run_cdf_experiment,
    simulate_offline,
)
from .geometry import Point2
from .localizer import localize

OUT_ENV_VAR = "REFLECTMAP_OUT"


def _out_dir(args, cfg) -> Path:
    root = args.out or os.environ.get(OUT_ENV_VAR) or cfg.out_dir
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _prepare(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"seed={args.seed}"])
    return cfg


def _finish(out: Path, cfg, command: str) -> None:
    text = config_to_json(cfg)
    (out / "config.json").write_text(text)
    rio.write_manifest(out / "manifest.json", text, cfg.seed, command)


def cmd_simulate(args) -> int:
    cfg = _prepare(args)
    out = _out_dir(args, cfg)
    env = build_environment(cfg)
    tps, rows = simulate_offline(cfg, env)
    rio.write_environment(out / "environment.json", env)
    rio.write_measurement_log(out / "measurements.csv", rows)
    rio.write_csv(out / "test_points.csv", ["epoch", "x", "y"],
                  [(i, float(p[0]), float(p[1])) for i, p in enumerate(tps)])
    if "realized_ratio" in env.meta:
        print(f"realized area ratio: {env.meta['realized_ratio']:.3f}")
    _finish(out, cfg, "simulate")
    print(f"simulate: {len(tps)} test points, {len(rows)} measurements -> {out}")
    return 0


def cmd_build_map(args) -> int:
    cfg = _prepare(args)
    out = _out_dir(args, cfg)
    env_path = out / "environment.json"
    log_path = out / "measurements.csv"
    if not env_path.exists() or not log_path.exists():
        raise RuntimeError(f"run simulate first ({env_path} or {log_path} missing)")
    env = rio.read_environment(env_path)
    rows_d = rio.read_measurement_log(log_path)
    if not rows_d:
        raise RuntimeError("measurement log is empty")
    rows = [(r["epoch"], r["path_index"], r["theta_rad"], r["tau_s"],
             r["var_theta"], r["var_tau"], r["truth_index"]) for r in rows_d]
    tps = offline_test_points(cfg, env)
    cloud, _, skipped = cloud_from_log(env, tps, rows)
    field, trace, sheaf, curve = build_map_products(cfg, env, cloud)
    rio.write_grid_binary(out / "recovery.grid", field)
    rio.write_grid_csv(out / "recovery.csv", field)
    rio.write_grid_binary(out / "sheaf.grid", rio.mask_as_field(sheaf))
    curve_rows = []
    for pi, n in enumerate(curve["prefix_sizes"]):
        for li, (l1, l2) in enumerate(curve["lambdas"]):
            curve_rows.append((int(n), float(l1), float(l2),
                               float(curve["db"][pi, li])))
    rio.write_csv(out / "convergence.csv", ["n", "lambda1", "lambda2", "db"],
                  curve_rows)
    _finish(out, cfg, "build-map")
    print(f"build-map: {len(cloud)} samples ({skipped} skipped), "
          f"sheaf area {sheaf.area:.1f} m^2, final diff {trace.diffs[-1]:.3g} -> {out}")
    return 0


def cmd_localize(args) -> int:
    cfg = _prepare(args)
    out = _out_dir(args, cfg)
    env = rio.read_environment(out / "environment.json")
    sheaf_field = rio.read_grid_binary(out / "sheaf.grid")
    sheaf = rio.sheaf_from_grid(sheaf_field, cfg.offline.epsilon)
    cell_field = None
    if cfg.score.field_weighted_cells and (out / "recovery.grid").exists():
        cell_field = rio.read_grid_binary(out / "recovery.grid")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(42,)))
    if cfg.user is not None:
        p_u = Point2(*cfg.user)
    else:
        p_u = draw_user(env, rng)
    from .experiments import effective_noise

    mset = sample_measurements(env, p_u, cfg.offline.n_r, effective_noise(cfg),
                               epoch=0)
    if not mset.entries:
        raise RuntimeError("no measurements synthesized (blind spot)")
    ctx = make_context(mset.entries, sheaf, env, cfg.score, cell_field=cell_field)
    res = localize(ctx, replace(cfg.online, seed=cfg.seed))
    err = math.hypot(res.p_hat.x - p_u.x, res.p_hat.y - p_u.y)
    iters = max(len(t) for t in res.trace) - 1
    rio.write_csv(out / "localization.csv",
                  ["x", "y", "score", "region_area", "starts", "iterations",
                   "true_x", "true_y", "error_m"],
                  [(res.p_hat.x, res.p_hat.y, res.score, res.region.area,
                    res.starts, iters, p_u.x, p_u.y, err)])
    if args.dump_surface:
        rio.write_grid_binary(out / "q_surface.grid",
                              q_surface(ctx, args.surface_pitch))
    _finish(out, cfg, "localize")
    print(f"localize: p_hat=({res.p_hat.x:.3f}, {res.p_hat.y:.3f}) "
          f"error {err:.3f} m, region {res.region.area:.0f} m^2 -> {out}")
    return 0


def cmd_experiment_cdf(args) -> int:
    cfg = _prepare(args)
    out = _out_dir(args, cfg)
    cells = run_cdf_experiment(cfg, threads=args.threads)
    summary = []
    for cell in cells:
        if cell["errors"].size == 0:
            print(f"cell n_r={cell['n_r']} scale={cell['scale']}: all trials blind")
            continue
        name = f"cdf_nr{cell['n_r']}_scale{cell['scale']:g}.csv"
        rio.write_cdf(out / name, cell["errors"])
        med = float(np.median(cell["errors"]))
        summary.append((cell["n_r"], cell["scale"], len(cell["errors"]),
                        cell["blind"], med))
        print(f"cell n_r={cell['n_r']} scale={cell['scale']:g}: "
              f"median error {med:.3f} m over {len(cell['errors'])} trials")
    rio.write_csv(out / "cdf_summary.csv",
                  ["n_r", "noise_scale", "trials", "blind", "median_error_m"],
                  summary)
    _finish(out, cfg, "experiment-cdf")
    return 0


def cmd_bounds(args) -> int:
    cfg = _prepare(args)
    out = _out_dir(args, cfg)
    b = cfg.bounds
    ratios = np.geomspace(b.sweep_ratio_min, b.sweep_ratio_max, b.sweep_points)
    rio.write_csv(out / "bound_sweep.csv", ["n_r", "ratio", "bound_over_vol_sa"],
                  bounds_mod.theorem_sweep(b.sweep_n_r, ratios))
    vol_sa = b.region_side ** 2
    rows = []
    for k, ratio in enumerate(b.ratios):
        spec = EnvironmentSpec(family="ratio", width=b.region_side,
                               height=b.region_side, target_ratio=ratio,
                               disk_radius=b.disk_radius, epsilon=b.epsilon)
        inputs = bounds_mod.BoundInputs(vol_sa=vol_sa, vol_sheaf=vol_sa / ratio,
                                        n_r=b.n_r, epsilon=b.epsilon)
        bound = bounds_mod.ambiguity_lower_bound(inputs)
        est = bounds_mod.monte_carlo_ambiguity(
            spec, b.n_r, b.structures,
            seed=int(np.random.SeedSequence(cfg.seed, spawn_key=(200 + k,))
                     .generate_state(1)[0]))
        violations = int(est.area < bound)
        rows.append((b.n_r, ratio, vol_sa, bound, bounds_mod.bound_radius(inputs),
                     est.area, est.trials, violations))
        print(f"ratio {ratio:g}: bound {bound:.2f} m^2 "
              f"(radius {bounds_mod.bound_radius(inputs):.2f} m), "
              f"empirical {est.area:.2f} m^2 over {est.trials} trials, "
              f"violations {violations}")
    rio.write_csv(out / "bound_dominance.csv",
                  ["n_r", "ratio", "vol_sa", "bound_m2", "bound_radius_m",
                   "empirical_area_m2", "trials", "violations"], rows)
    _finish(out, cfg, "bounds")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reflectmap",
                                description="reflection-map localization harness")
    p.add_argument("--config", help="JSON config path (defaults apply otherwise)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help=f"output dir (default ${OUT_ENV_VAR} or config)")
    p.add_argument("--threads", type=int, default=1, help="trial-loop workers")
    p.add_argument("--override", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override, repeatable")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", help="generate environment + offline measurement log")
    sub.add_parser("build-map", help="recover the map and covering sheaf from a log")
    loc = sub.add_parser("localize", help="run one online localization")
    loc.add_argument("--dump-surface", action="store_true",
                     help="also dump the score surface grid")
    loc.add_argument("--surface-pitch", type=float, default=0.5)
    sub.add_parser("experiment-cdf", help="error CDFs over the noise / n_r grid")
    sub.add_parser("bounds", help="bound sweep + Monte Carlo dominance ensembles")
    return p


_COMMANDS = {
    "simulate": cmd_simulate,
    "build-map": cmd_build_map,
    "localize": cmd_localize,
    "experiment-cdf": cmd_experiment_cdf,
    "bounds": cmd_bounds,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
