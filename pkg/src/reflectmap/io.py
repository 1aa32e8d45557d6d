"""File formats for environments, measurement logs, grids and result tables.

Formats (all little-endian, all deterministic):

* environment: versioned JSON with bs, boundary, rol, reflectors,
  reflectivity and generator metadata; floats round-trip exactly through
  repr.
* measurement log: CSV with columns
  epoch,path_index,theta_rad,tau_s,var_theta,var_tau,truth_index.
* grid dump: binary header <4s I 2d d 2I> = magic b'RMGF', version,
  origin x/y, pitch, nx, ny followed by nx*ny float64 values in row-major
  (x-index major) order.  Mask dumps store 0/1 values in the same layout.
* grid CSV: x,y,value rows.
* cdf table: CSV error_m,prob with monotone probabilities ending at 1.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .envsim import Environment
from .geometry import Point2
from .mapbuilder import GridField, SheafMask

GRID_MAGIC = b"RMGF"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sIddd II".replace(" ", ""))

ENV_VERSION = 1


class FormatError(ValueError):
    """Malformed file content."""


# ---------------------------------------------------------------------------
# environment

def environment_to_dict(env: Environment) -> dict:
    def listify(a):
        return np.asarray(a, dtype=float).tolist()

    meta = {}
    for k, v in env.meta.items():
        meta[k] = listify(v) if isinstance(v, np.ndarray) else v
    return {
        "version": ENV_VERSION,
        "bs": [env.bs.x, env.bs.y],
        "boundary": listify(env.boundary),
        "rol": listify(env.rol),
        "reflectors": listify(env.reflectors),
        "reflectivity": None if env.reflectivity is None else listify(env.reflectivity),
        "meta": meta,
    }


def environment_from_dict(d: dict) -> Environment:
    if d.get("version") != ENV_VERSION:
        raise FormatError(f"unsupported environment version {d.get('version')!r}")
    meta = dict(d.get("meta", {}))
    if "disk_centers" in meta:
        meta["disk_centers"] = np.asarray(meta["disk_centers"], dtype=float)
    refl = d.get("reflectivity")
    return Environment(
        reflectors=np.asarray(d["reflectors"], dtype=float),
        boundary=np.asarray(d["boundary"], dtype=float),
        rol=np.asarray(d["rol"], dtype=float),
        bs=Point2(*d["bs"]),
        reflectivity=None if refl is None else np.asarray(refl, dtype=float),
        meta=meta,
    )


def write_environment(path, env: Environment) -> None:
    Path(path).write_text(json.dumps(environment_to_dict(env), indent=1) + "\n")


def read_environment(path) -> Environment:
    return environment_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# measurement log

LOG_COLUMNS = ["epoch", "path_index", "theta_rad", "tau_s",
               "var_theta", "var_tau", "truth_index"]


def write_measurement_log(path, rows) -> None:
    """rows: iterable of (epoch, path_index, theta, tau, vt, vtau, truth)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in r])


def read_measurement_log(path):
    """Returns a list of dicts keyed by LOG_COLUMNS with parsed numbers."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_COLUMNS:
            raise FormatError(f"unexpected log columns {reader.fieldnames}")
        for row in reader:
            out.append({
                "epoch": int(row["epoch"]),
                "path_index": int(row["path_index"]),
                "theta_rad": float(row["theta_rad"]),
                "tau_s": float(row["tau_s"]),
                "var_theta": float(row["var_theta"]),
                "var_tau": float(row["var_tau"]),
                "truth_index": int(row["truth_index"]),
            })
    return out


# ---------------------------------------------------------------------------
# grids

def write_grid_binary(path, field: GridField) -> None:
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, field.origin[0], field.origin[1],
                          field.pitch, field.nx, field.ny)
    data = np.ascontiguousarray(field.values, dtype="<f8").tobytes()
    Path(path).write_bytes(header + data)


def read_grid_binary(path) -> GridField:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated grid file")
    magic, version, ox, oy, pitch, nx, ny = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != GRID_VERSION:
        raise FormatError(f"unsupported grid version {version}")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if values.size != nx * ny:
        raise FormatError("grid payload size mismatch")
    return GridField(origin=(ox, oy), pitch=pitch, nx=nx, ny=ny,
                     values=values.reshape(nx, ny).copy())


def write_grid_csv(path, field: GridField) -> None:
    xs = field.xs()
    ys = field.ys()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for i in range(field.nx):
            for j in range(field.ny):
                w.writerow([repr(float(xs[i])), repr(float(ys[j])),
                            repr(float(field.values[i, j]))])


def mask_as_field(sheaf: SheafMask) -> GridField:
    return GridField(origin=sheaf.origin, pitch=sheaf.pitch, nx=sheaf.nx,
                     ny=sheaf.ny, values=sheaf.mask.astype(float))


def sheaf_from_grid(field: GridField, epsilon: float) -> SheafMask:
    return SheafMask(origin=field.origin, pitch=field.pitch, nx=field.nx,
                     ny=field.ny, mask=field.values > 0.5, epsilon=epsilon)


# ---------------------------------------------------------------------------
# tables

def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in r])


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def write_cdf(path, errors: np.ndarray) -> None:
    """Empirical CDF of non-negative errors: sorted values with cumulative
    probabilities k/n."""
    e = np.sort(np.asarray(errors, dtype=float))
    if e.size == 0:
        raise FormatError("empty error sample")
    if np.any(e < 0.0) or not np.all(np.isfinite(e)):
        raise FormatError("errors must be finite and non-negative")
    probs = np.arange(1, e.size + 1) / e.size
    write_csv(path, ["error_m", "prob"],
              [(float(v), float(p)) for v, p in zip(e, probs)])


def read_cdf(path):
    header, rows = read_csv(path)
    if header != ["error_m", "prob"]:
        raise FormatError(f"unexpected cdf columns {header}")
    err = np.array([float(r[0]) for r in rows])
    prob = np.array([float(r[1]) for r in rows])
    return err, prob


def cdf_quantile(errors: np.ndarray, probs: np.ndarray, q: float) -> float:
    """Smallest error whose cumulative probability reaches q."""
    i = int(np.searchsorted(probs, q, side="left"))
    return float(errors[min(i, len(errors) - 1)])


def write_manifest(path, config_text: str, seed: int, command: str) -> None:
    from . import __version__

    manifest = {
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "command": command,
        "package_version": __version__,
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
