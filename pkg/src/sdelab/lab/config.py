"""Experiment configuration: a versioned JSON key-tree that fully determines
every output byte (modulo wall-clock metadata, which is excluded from hashing)."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..fields import FIELD_KEYS
from ..moduli import MODULUS_KEYS

__all__ = ["ExperimentConfig", "default_config", "validate", "EXPERIMENTS"]

SCHEMA_VERSION = 1

EXPERIMENTS = ("osgood-certify", "mollify-ladder", "flow-cauchy",
               "density-bound", "fpe-duality")

_DEFAULTS = {
    "osgood-certify": {
        "modulus": "loglinear",
        "field": {"key": "vseries", "params": {"tabulated": False}},
        "certify": {"n_pairs": 100_000, "radius_R": 1.0, "box": [-2.0, 2.0]},
        "epsilons": [10.0 ** (-k) for k in range(1, 9)],
    },
    "mollify-ladder": {
        "field": {"key": "vseries", "params": {"sigma_scale": 0.5}},
        "ladder": [4, 8, 16, 32, 64],
        "mollify": {"quadrature_points": 48, "mode": "convolve"},
        "box_radius": 1.0,
        "lq": 2.0,
    },
    "flow-cauchy": {
        "field": {"key": "vseries", "params": {"sigma_scale": 0.5}},
        "modulus": "loglinear",
        "ladder": [4, 8, 16, 32, 64],
        "mollify": {"quadrature_points": 48, "mode": "convolve"},
        "horizon": 1.0,
        "n_steps": 512,
        "n_particles": 10_000,
        "n_paths": 100,
        "measure": {"kind": "weighted", "q": 2.0},
        "level_R": 10.0,
    },
    "density-bound": {
        "contracting": {
            "sigma_scale": 0.3, "horizon": 0.5, "n_steps": 256,
            "n_particles": 20_000, "n_paths": 128,
            "box": [-1.0, 1.0], "resolution": 64, "p_list": [1.0, 2.0],
        },
        "rotation": {
            "sigma_scale": 0.1, "horizon": 0.5, "n_steps": 256,
            "n_particles": 100_000, "n_paths": 16, "bandwidth": 0.08,
            "box": [-1.0, 1.0], "resolution": 48, "tolerance": 0.05,
        },
        "slack": 0.15,
    },
    "fpe-duality": {
        "ou": {
            "box": [-8.0, 8.0], "resolution": 512, "dt": 0.002,
            "horizon": 0.5, "start_variance": 0.25,
            "n_particles": 20_000, "n_paths": 64, "n_steps": 512,
        },
        "vseries": {
            "box": [-5.0, 6.0], "resolution": 512, "dt": 0.002,
            "horizon": 0.5, "start_variance": 0.25, "sigma_scale": 0.5,
            "level": 16, "n_particles": 20_000, "n_paths": 64, "n_steps": 512,
        },
        "scheme": "crank-nicolson",
        "boundary": "zeroflux",
        "grid_budget": 0.01,
    },
}


@dataclass
class ExperimentConfig:
    """A validated-on-demand key-tree; ``data`` is plain JSON-compatible."""

    data: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data.setdefault("schema_version", SCHEMA_VERSION)
        self.data.setdefault("seed", 20240901)
        self.data.setdefault("workers", 1)

    @property
    def experiment(self) -> str:
        return self.data.get("experiment", "")

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def workers(self) -> int:
        return int(self.data["workers"])

    def get(self, *keys, default=None):
        node = self.data
        for k in keys:
            if not isinstance(node, dict) or k not in node:
                return default
            node = node[k]
        return node

    def canonical_json(self) -> str:
        """Deterministic serialization; volatile keys are excluded."""
        scrubbed = copy.deepcopy(self.data)
        scrubbed.pop("output_dir", None)
        scrubbed.pop("timestamp", None)
        return json.dumps(scrubbed, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def to_file(self, path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls(json.loads(Path(path).read_text()))


def default_config(experiment: str, seed: int = 20240901,
                   workers: int = 1) -> ExperimentConfig:
    if experiment not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {experiment!r}; known: {EXPERIMENTS}")
    data = copy.deepcopy(_DEFAULTS[experiment])
    data.update({"experiment": experiment, "seed": seed, "workers": workers,
                 "schema_version": SCHEMA_VERSION})
    return ExperimentConfig(data)


def validate(config: ExperimentConfig) -> list[str]:
    """Static validation; returns one finding per offending key (empty = ok)."""
    findings = []
    exp = config.experiment
    if exp not in EXPERIMENTS:
        findings.append(f"experiment: {exp!r} is not one of {EXPERIMENTS}")
        return findings
    if config.get("schema_version") != SCHEMA_VERSION:
        findings.append(f"schema_version: expected {SCHEMA_VERSION}")
    seed = config.get("seed")
    if not isinstance(seed, int):
        findings.append("seed: must be an integer")
    workers = config.get("workers")
    if not isinstance(workers, int) or workers < 1:
        findings.append("workers: must be a positive integer")

    field_block = config.get("field")
    if field_block is not None:
        key = field_block.get("key") if isinstance(field_block, dict) else None
        if key not in FIELD_KEYS:
            findings.append(f"field.key: {key!r} is not one of {FIELD_KEYS}")
    modulus = config.get("modulus")
    if modulus is not None and modulus not in MODULUS_KEYS:
        findings.append(f"modulus: {modulus!r} is not one of {MODULUS_KEYS}")

    ladder = config.get("ladder")
    if exp in ("flow-cauchy", "mollify-ladder"):
        if not isinstance(ladder, list) or len(ladder) < 2:
            findings.append("ladder: requires >= 2 levels")
        elif any(int(n) <= 0 for n in ladder) or sorted(ladder) != ladder:
            findings.append("ladder: levels must be positive and sorted ascending")

    for key in ("n_steps", "n_particles", "n_paths"):
        val = config.get(key)
        if val is not None and (not isinstance(val, int) or val < 1):
            findings.append(f"{key}: must be a positive integer")
    horizon = config.get("horizon")
    if horizon is not None and not (isinstance(horizon, (int, float)) and horizon > 0):
        findings.append("horizon: must be a positive number")

    measure = config.get("measure")
    if measure is not None:
        kind = measure.get("kind")
        if kind not in ("weighted", "lebesgue"):
            findings.append("measure.kind: must be 'weighted' or 'lebesgue'")
        elif kind == "weighted" and not (float(measure.get("q", 0)) > 1):
            findings.append("measure.q: must be > 1")
        elif kind == "lebesgue" and "box" not in measure:
            findings.append("measure.box: required for the lebesgue kind")

    if exp == "fpe-duality":
        scheme = config.get("scheme")
        if scheme not in ("explicit", "implicit", "crank-nicolson"):
            findings.append("scheme: must be explicit|implicit|crank-nicolson")
        elif scheme == "explicit":
            findings.extend(_check_cfl(config))
        if config.get("boundary") not in ("zeroflux", "dirichlet0"):
            findings.append("boundary: must be 'zeroflux' or 'dirichlet0'")
    return findings


def _check_cfl(config: ExperimentConfig) -> list[str]:
    """Evaluate the explicit-scheme CFL formula for each configured solve."""
    from ..fields import get_field
    from ..fokker_planck import GeneratorGrid, cfl_max_dt
    findings = []
    for name, fkey, params in (("ou", "ou", {}),
                               ("vseries", "vseries",
                                {"sigma_scale": config.get("vseries", "sigma_scale",
                                                           default=0.5)})):
        block = config.get(name)
        if not block:
            continue
        g = GeneratorGrid.from_pair(get_field(fkey, **params),
                                    tuple(block["box"]), block["resolution"])
        admissible = cfl_max_dt(g)
        if block["dt"] > admissible:
            findings.append(f"{name}.dt: {block['dt']:g} violates the explicit "
                            f"CFL bound; required dt <= {admissible:g}")
    return findings
