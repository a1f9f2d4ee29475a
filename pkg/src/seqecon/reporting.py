"""CSV artifacts and run manifests.

Every CSV starts with a versioned schema comment line so downstream readers
can detect layout changes; floats are written with repr precision so
identical runs produce byte-identical files.  Each run directory gets a
manifest recording the config hash, seed, a content hash of the package
source, and wall-clock time, which is enough to reproduce the run exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import time

SCHEMAS = {
    "loss_curve": ("v1", ("episode", "loss")),
    "loss_curve_stepped": ("v1", ("episode", "step", "loss")),
    "error_distribution": ("v1", ("group", "mean", "p90", "p99", "p99.9")),
    "policy_grid": ("v1", ("idio_index", "grid_value", "policy_value")),
    "truncation_sweep": ("v1", ("T", "gap", "analytic_bound")),
    "compare_stats": ("v1", ("metric", "value")),
    "shock_panel": ("v1", ("trajectory", "date", "label", "value")),
}


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, schema, rows):
    version, header = SCHEMAS[schema]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# schema: {schema} {version}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            if isinstance(row, dict):
                row = [row[h] for h in header]
            f.write(",".join(_fmt(x) for x in row) + "\n")


def read_csv_header(path):
    with open(path) as f:
        schema_line = f.readline().strip()
        header = f.readline().strip()
    return schema_line, header


def source_hash():
    """Content hash of the installed package source, for the manifest."""
    pkg_dir = os.path.dirname(os.path.abspath(__file__))
    digest = hashlib.sha256()
    for name in sorted(os.listdir(pkg_dir)):
        if name.endswith(".py"):
            with open(os.path.join(pkg_dir, name), "rb") as f:
                digest.update(name.encode())
                digest.update(f.read())
    return digest.hexdigest()


def write_manifest(outdir, config, started, extra=None):
    os.makedirs(outdir, exist_ok=True)
    payload = {
        "config_hash": config.config_hash(),
        "model": config.model,
        "seed": config.seed,
        "precision": config.precision,
        "source_hash": source_hash(),
        "wall_clock_seconds": time.time() - started,
        "defaulted_keys": [list(d) for d in config.defaulted],
        "schema_versions": {k: v[0] for k, v in SCHEMAS.items()},
    }
    if extra:
        payload.update(extra)
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


def write_diagnostics(outdir, message, detail=None):
    """Failure note accompanying exit code 2."""
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "diagnostics.json")
    with open(path, "w") as f:
        json.dump({"error": message, "detail": detail or {}}, f, indent=2)
    return path
