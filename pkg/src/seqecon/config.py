"""Run configuration: flat key=value files with section headers.

Strict by design: unknown sections or keys are rejected with the offending
line named, every known key is either present or defaulted with a logged
default, and all randomness descends from the single seed.  Key names in
the [hyper] block mirror the hyperparameter names the calibration tables
use (N_quad, T, N_hidden1, N_data, N_mb, N_episodes, alpha_learn, ...).
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    pass


def _parse_text(text):
    """Sections of key=value pairs; comments with '#', blank lines ignored."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{current}]")
            sections[current] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, val = (part.strip() for part in line.split("=", 1))
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = val
    return sections


# (type, default) per key; None default means required
_RUN_KEYS = {
    "model": (str, None),
    "seed": (int, 0),
    "outdir": (str, "runs/out"),
    "precision": (str, "float64"),
    "threads": (int, 0),
}

_SCHEMAS = {
    "growth": {
        "calibration": {
            "gamma": (float, 2.0), "delta": (float, 0.1), "beta": (float, 0.95),
            "alpha": (float, 1.0 / 3.0), "rho_A": (float, 0.8),
            "sigma_A": (float, 0.03),
        },
        "hyper": {
            "N_quad": (int, 8), "T": (int, 100),
            "N_hidden1": (int, 128), "N_hidden2": (int, 128), "N_hidden3": (int, 128),
            "N_output": (int, 1), "N_data": (int, 4096), "N_mb": (int, 256),
            "N_episodes": (int, 40_000), "optimizer": (str, "adam"),
            "alpha_learn": (float, 1e-5), "lr_decay": (float, 1.0),
            "lr_min": (float, 0.0),
        },
    },
    "olg": {
        "calibration": {
            "H": (int, 72), "gamma": (float, 2.0), "beta": (float, 0.96),
            "B": (float, 0.75), "b_floor": (float, 0.0), "k_floor": (float, 0.0),
            "xi_adj": (float, 0.1), "rho": (float, 0.85), "sigma_A": (float, 0.03),
            "delta_bar": (float, 0.1), "rho_delta": (float, 0.0),
            "sigma_delta": (float, 0.2), "mu_delta": (float, -1.10),
            "pi_nn": (float, 0.94), "pi_dd": (float, 2.0 / 3.0),
            "alpha": (float, 0.3),
        },
        "hyper": {
            "N_quad": (int, 4), "T": (int, 144),
            "N_hidden1": (int, 720), "N_hidden2": (int, 720), "N_hidden3": (int, 720),
            "N_data": (int, 8192), "N_mb": (int, 64),
            "N_episodes_step1": (int, 512), "N_episodes_step2": (int, 1536),
            "N_bond_steps": (int, 4), "N_episodes_step3": (int, 16_384),
            "N_episodes_step4": (int, 32_768), "optimizer": (str, "adam"),
            "alpha_learn": (float, 1e-5), "alpha_learn_polish": (float, 0.0),
        },
    },
    "hetero": {
        "calibration": {
            "gamma": (float, 2.0), "beta": (float, 0.95), "theta_floor": (float, 0.0),
            "rho_e": (float, 0.871), "sigma_e": (float, 0.246),
            "rho_A": (float, 0.8145), "sigma_A_L": (float, 0.0124),
            "sigma_A_H": (float, 0.0199), "delta": (float, 0.1),
            "alpha": (float, 0.25), "zeta": (float, 0.25),
            "Gamma_surv": (float, 0.965), "u_spread": (float, 0.075),
            "xi_up": (float, 1.0), "xi_down": (float, 2.5), "s": (float, 400.0),
            "d_floor": (float, 0.0), "fix_wage": (float, float("nan")),
        },
        "hyper": {
            "N_quad": (int, 5), "T": (int, 300), "N_k": (int, 200),
            "N_theta": (int, 200),
            "N_hidden1": (int, 1024), "N_hidden2": (int, 1024),
            "N_hidden3": (int, 1024), "N_data": (int, 131_072), "N_mb": (int, 128),
            "N_episodes_step1": (int, 100), "N_episodes_step2": (int, 100),
            "N_episodes_step3": (int, 100), "N_episodes_step4": (int, 500),
            "N_episodes_step5": (int, 16_300), "optimizer": (str, "adam"),
            "alpha_learn": (float, 1e-6), "k_lo": (float, 0.1), "k_hi": (float, 6.0),
            "theta_max": (float, 10.0), "N_firm_samples": (int, 24),
            "newton_initial": (int, 10), "newton_late": (int, 3),
        },
    },
}


@dataclass
class RunConfig:
    model: str
    seed: int
    outdir: str
    precision: str
    threads: int
    calibration: dict
    hyper: dict
    defaulted: list
    text: str

    def config_hash(self):
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def _coerce(section, key, val, typ, lineno_hint=""):
    try:
        if typ is int:
            f = float(val)
            if f != int(f):
                raise ValueError
            return int(f)
        return typ(val)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {val!r} as {typ.__name__}")


def load_config(path=None, text=None):
    """Parse and validate; returns a RunConfig with defaults applied and the
    list of (section, key, default) that were filled in."""
    if text is None:
        with open(path) as f:
            text = f.read()
    sections = _parse_text(text)
    if "run" not in sections:
        raise ConfigError("missing [run] section")
    run_raw = sections["run"]
    for key in run_raw:
        if key not in _RUN_KEYS:
            raise ConfigError(f"[run] unknown key {key!r}")
    model = run_raw.get("model")
    if model is None:
        raise ConfigError("[run] model is required")
    if model not in _SCHEMAS:
        raise ConfigError(f"[run] unknown model {model!r}; expected one of "
                          f"{sorted(_SCHEMAS)}")
    defaulted = []
    run = {}
    for key, (typ, default) in _RUN_KEYS.items():
        if key in run_raw:
            run[key] = _coerce("run", key, run_raw[key], typ)
        else:
            if default is None:
                raise ConfigError(f"[run] {key} is required")
            run[key] = default
            defaulted.append(("run", key, default))
    if run["precision"] not in ("float64", "float32"):
        raise ConfigError("[run] precision must be float64 or float32")

    schema = _SCHEMAS[model]
    out = {}
    for section in ("calibration", "hyper"):
        found = sections.get(section, {})
        for key in found:
            if key not in schema[section]:
                raise ConfigError(f"[{section}] unknown key {key!r} for model {model}")
        block = {}
        for key, (typ, default) in schema[section].items():
            if key in found:
                block[key] = _coerce(section, key, found[key], typ)
            else:
                block[key] = default
                defaulted.append((section, key, default))
        out[section] = block
    extra = set(sections) - {"run", "calibration", "hyper"}
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")

    return RunConfig(model=model, seed=run["seed"], outdir=run["outdir"],
                     precision=run["precision"], threads=run["threads"],
                     calibration=out["calibration"], hyper=out["hyper"],
                     defaulted=defaulted, text=text)
