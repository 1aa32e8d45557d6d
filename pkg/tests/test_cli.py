import json
import math
from pathlib import Path

import numpy as np

from reflectmap import io as rio
from reflectmap.cli import main
from reflectmap.config import ExperimentConfig, save_config
from reflectmap.experiments import run_cell_trials, run_offline_pipeline
from reflectmap.localizer import OnlineConfig


def tiny_config(tmp_path, **kw):
    cfg = ExperimentConfig(seed=5, out_dir=str(tmp_path / "out"))
    cfg.environment.width = 36.0
    cfg.environment.height = 36.0
    cfg.environment.wall_spacing = 3.0
    cfg.environment.rol_margin = 5.0
    cfg.offline.spacing = 2.0
    cfg.online = OnlineConfig(n_starts=4, dx=0.1, tol=0.01, max_iter=30,
                              backtracking=True)
    cfg.cdf.noise_scales = [1.0]
    cfg.cdf.n_r_values = [3]
    cfg.cdf.trials = 4
    for k, v in kw.items():
        setattr(cfg, k, v)
    path = tmp_path / "config.json"
    save_config(path, cfg)
    return cfg, path


def read_bytes_map(folder):
    return {p.name: p.read_bytes() for p in sorted(Path(folder).iterdir())}


class TestPipelineCommands:
    def test_simulate_build_localize_chain(self, tmp_path):
        cfg, cfg_path = tiny_config(tmp_path)
        out = tmp_path / "out"
        assert main(["--config", str(cfg_path), "--out", str(out), "simulate"]) == 0
        assert (out / "environment.json").exists()
        log = rio.read_measurement_log(out / "measurements.csv")
        assert log and {r["epoch"] for r in log}

        assert main(["--config", str(cfg_path), "--out", str(out), "build-map"]) == 0
        field = rio.read_grid_binary(out / "recovery.grid")
        assert field.pitch == cfg.offline.grid_pitch
        header, rows = rio.read_csv(out / "convergence.csv")
        assert header == ["n", "lambda1", "lambda2", "db"]
        assert len(rows) > 0

        assert main(["--config", str(cfg_path), "--out", str(out), "localize",
                     "--dump-surface", "--surface-pitch", "1.0"]) == 0
        header, rows = rio.read_csv(out / "localization.csv")
        assert header[:6] == ["x", "y", "score", "region_area", "starts",
                              "iterations"]
        surface = rio.read_grid_binary(out / "q_surface.grid")
        rol = rio.read_environment(out / "environment.json").rol
        assert surface.nx == int(math.floor((rol[:, 0].max() - rol[:, 0].min()))) + 1

    def test_simulate_deterministic_bytes(self, tmp_path):
        cfg, cfg_path = tiny_config(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["--config", str(cfg_path), "--out", str(a), "simulate"]) == 0
        assert main(["--config", str(cfg_path), "--out", str(b), "simulate"]) == 0
        assert read_bytes_map(a) == read_bytes_map(b)

    def test_experiment_cdf(self, tmp_path):
        cfg, cfg_path = tiny_config(tmp_path)
        out = tmp_path / "out"
        assert main(["--config", str(cfg_path), "--out", str(out),
                     "experiment-cdf"]) == 0
        err, prob = rio.read_cdf(out / "cdf_nr3_scale1.csv")
        assert np.all(np.diff(prob) >= 0) and prob[-1] == 1.0
        assert np.all(err >= 0)
        header, rows = rio.read_csv(out / "cdf_summary.csv")
        assert header[0] == "n_r" and rows

    def test_manifest_and_config_written(self, tmp_path):
        cfg, cfg_path = tiny_config(tmp_path)
        out = tmp_path / "out"
        main(["--config", str(cfg_path), "--out", str(out), "simulate"])
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == cfg.seed
        assert manifest["command"] == "simulate"
        assert len(manifest["config_sha256"]) == 64

    def test_seed_flag_overrides(self, tmp_path):
        cfg, cfg_path = tiny_config(tmp_path)
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        main(["--config", str(cfg_path), "--out", str(out1), "--seed", "1",
              "simulate"])
        main(["--config", str(cfg_path), "--out", str(out2), "--seed", "2",
              "simulate"])
        a = (out1 / "measurements.csv").read_bytes()
        b = (out2 / "measurements.csv").read_bytes()
        assert a != b


class TestBoundsCommand:
    def test_tiny_ensemble(self, tmp_path):
        cfg, cfg_path = tiny_config(tmp_path)
        out = tmp_path / "out"
        rc = main(["--config", str(cfg_path), "--out", str(out),
                   "--override", "bounds.structures=2",
                   "--override", "bounds.ratios=[12.0]",
                   "--override", "bounds.region_side=100.0",
                   "--override", "bounds.sweep_points=5",
                   "bounds"])
        assert rc == 0
        header, rows = rio.read_csv(out / "bound_sweep.csv")
        assert header == ["n_r", "ratio", "bound_over_vol_sa"]
        assert len(rows) == 4 * 5
        header, rows = rio.read_csv(out / "bound_dominance.csv")
        assert header[-1] == "violations"
        assert len(rows) == 1


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{\"bogus\": 1}")
        assert main(["--config", str(bad), "--out", str(tmp_path / "o"),
                     "simulate"]) == 2

    def test_runtime_error_is_3(self, tmp_path):
        cfg, cfg_path = tiny_config(tmp_path)
        # build-map without simulate first
        assert main(["--config", str(cfg_path), "--out",
                     str(tmp_path / "fresh"), "build-map"]) == 3

    def test_output_env_var_root(self, tmp_path, monkeypatch):
        cfg, cfg_path = tiny_config(tmp_path)
        root = tmp_path / "from_env"
        monkeypatch.setenv("REFLECTMAP_OUT", str(root))
        assert main(["--config", str(cfg_path), "simulate"]) == 0
        assert (root / "environment.json").exists()

    def test_override_flag(self, tmp_path):
        cfg, cfg_path = tiny_config(tmp_path)
        out = tmp_path / "o"
        assert main(["--config", str(cfg_path), "--out", str(out),
                     "--override", "offline.spacing=4.0", "simulate"]) == 0
        saved = json.loads((out / "config.json").read_text())
        assert saved["offline"]["spacing"] == 4.0


class TestThreadDeterminism:
    def test_parallel_trials_match_serial(self, tmp_path):
        cfg, _ = tiny_config(tmp_path)
        env, _, _, _, field, _, sheaf, _ = run_offline_pipeline(cfg)
        args = (env, sheaf, cfg.score, cfg.online, cfg.noise, 3, 4, 123)
        serial = run_cell_trials(*args, threads=1)
        parallel = run_cell_trials(*args, threads=2)
        assert len(serial) == len(parallel)
        for a, b in zip(serial, parallel):
            assert (a is None) == (b is None)
            if a is not None:
                assert (a.x, a.y, a.score, a.error_m) == (b.x, b.y, b.score,
                                                          b.error_m)
