"""Experiment configuration: YAML text in, validated :class:`ExperimentConfig` out."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import yaml

from .errors import ConfigParseError, ConfigValidationError
from .functionals import Euler, FunctionalSpec, format_functional, parse_functional

EXPERIMENTS = ("sample", "functional", "stabilize", "estimate", "lil", "clt", "sip")
PROCESSES = ("poisson", "binomial")
FORMATS = ("csv", "jsonl", "both")

# keys that do not influence data, so they stay out of the hash
_UNHASHED = ("threads", "output", "format")

_OPTION_KEYS = {
    "sample": {"replicate_id", "binary"},
    "functional": set(),
    "stabilize": {"method", "trials", "schedule", "tail"},
    "estimate": {"quantities", "R", "lags", "inner", "variance_grid", "variance_replicates"},
    "lil": {"n0", "quantile", "fixed_envelope", "estimator_replicates", "sigma"},
    "clt": {"n", "estimator_replicates", "pool_replicates"},
    "sip": {"base", "n_max", "block_len", "defect", "defect_grid", "defect_replicates"},
}

_TOP_KEYS = {
    "experiment", "functional", "d", "process", "geometry", "n_grid", "replicates", "paths",
    "pool_replicates", "seed", "threads", "output", "format", "options",
}


@dataclass
class ExperimentConfig:
    experiment: str
    functional: str = "count"
    d: int = 2
    process: str = "poisson"
    geometry: dict = field(default_factory=lambda: {"kind": "cubic", "n": 100.0})
    n_grid: list = field(default_factory=list)
    replicates: int = 1000
    paths: int = 50
    pool_replicates: int = 500
    seed: int = 0
    threads: int = 1
    output: str = "out"
    format: str = "both"
    options: dict = field(default_factory=dict)

    @property
    def spec(self) -> FunctionalSpec:
        return parse_functional(self.functional)

    def canonical(self) -> dict:
        data = asdict(self)
        for k in _UNHASHED:
            data.pop(k)
        return data

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _grid_from(value, violations: list[str]) -> list:
    if value is None:
        return []
    if isinstance(value, dict):
        unknown = set(value) - {"n0", "ratio", "n_max"}
        if unknown:
            violations.append(f"n_grid: unknown key(s) {sorted(unknown)}")
            return []
        from .experiments import geometric_grid

        return [float(n) for n in geometric_grid(value.get("n0", 20), value.get("n_max", 1e5), value.get("ratio", 1.3))]
    if isinstance(value, list) and all(isinstance(v, (int, float)) for v in value):
        return [float(v) for v in value]
    violations.append("n_grid must be a list of numbers or {n0, ratio, n_max}")
    return []


def _check_int(data, key, lo, violations, default):
    v = data.get(key, default)
    if not isinstance(v, int) or isinstance(v, bool) or v < lo:
        violations.append(f"{key} must be an integer ≥ {lo}")
        return default
    return v


def validate(data: dict) -> ExperimentConfig:
    """Check every field and report all violations at once."""
    violations: list[str] = []
    if not isinstance(data, dict):
        raise ConfigValidationError(["config must be a mapping of keys to values"])
    for key in sorted(set(data) - _TOP_KEYS):
        violations.append(f"unknown key '{key}'")

    experiment = data.get("experiment")
    if experiment not in EXPERIMENTS:
        violations.append(f"experiment must be one of {', '.join(EXPERIMENTS)}")

    functional = str(data.get("functional", "count"))
    spec = None
    try:
        spec = parse_functional(functional)
    except ValueError as exc:
        msg = str(exc)
        violations.append(msg if msg.split()[0].count(".") == 1 else f"functional: {msg}")

    d = _check_int(data, "d", 1, violations, 2)
    if isinstance(spec, Euler) and spec.cap < d + 3:
        violations.append(f"euler.cap must be ≥ d + 3 = {d + 3}")
    process = data.get("process", "poisson")
    if process not in PROCESSES:
        violations.append(f"process must be one of {', '.join(PROCESSES)}")

    geometry = data.get("geometry", {"kind": "cubic", "n": 100.0})
    if not isinstance(geometry, dict) or geometry.get("kind") not in ("cubic", "stretched"):
        violations.append("geometry.kind must be cubic or stretched")
        geometry = {"kind": "cubic", "n": 100.0}
    else:
        unknown = set(geometry) - {"kind", "n", "base"}
        if unknown:
            violations.append(f"geometry: unknown key(s) {sorted(unknown)}")
        n = geometry.get("n", 100.0)
        if not isinstance(n, (int, float)) or n <= 0:
            violations.append("geometry.n must be > 0")
        if geometry["kind"] == "stretched":
            base = geometry.get("base", [1.0] * (d - 1))
            if (not isinstance(base, list) or len(base) != d - 1
                    or not all(isinstance(b, (int, float)) and b > 0 for b in base)):
                violations.append("geometry.base must list d - 1 positive side lengths")
            geometry = {"kind": "stretched", "n": float(n) if isinstance(n, (int, float)) else 100.0,
                        "base": [float(b) for b in base] if isinstance(base, list) else [1.0]}
        else:
            geometry = {"kind": "cubic", "n": float(n) if isinstance(n, (int, float)) else 100.0}

    n_grid = _grid_from(data.get("n_grid"), violations)
    if n_grid and any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        violations.append("n_grid must be strictly increasing")
    if experiment == "lil":
        if not n_grid:
            violations.append("n_grid is required for lil")
        elif n_grid[0] < 3:
            violations.append("n_grid entries must be ≥ 3")
    replicates = _check_int(data, "replicates", 2, violations, 1000)
    paths = _check_int(data, "paths", 2, violations, 50)
    pool = _check_int(data, "pool_replicates", 2, violations, 500)
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        violations.append("seed must be an unsigned 64-bit integer")
        seed = 0
    threads = _check_int(data, "threads", 1, violations, 1)
    output = data.get("output", "out")
    if not isinstance(output, str):
        violations.append("output must be a path string")
    fmt = data.get("format", "both")
    if fmt not in FORMATS:
        violations.append("format must be csv, jsonl or both")
    options = data.get("options", {}) or {}
    if not isinstance(options, dict):
        violations.append("options must be a mapping")
        options = {}
    elif experiment in _OPTION_KEYS:
        for key in sorted(set(options) - _OPTION_KEYS[experiment]):
            violations.append(f"unknown key 'options.{key}' for experiment {experiment}")
    if experiment == "stabilize" and options.get("method", "certified") not in ("certified", "triangle", "empirical"):
        violations.append("options.method must be certified, triangle or empirical")
    if experiment == "sip":
        if d < 2:
            violations.append("sip needs d ≥ 2")
        n_max = options.get("n_max", 5000)
        block_len = options.get("block_len", 500)
        if not (isinstance(n_max, (int, float)) and isinstance(block_len, (int, float)) and n_max >= 10 * block_len > 0):
            violations.append("options.n_max must be ≥ 10 * options.block_len")
    if violations:
        raise ConfigValidationError(violations)
    return ExperimentConfig(
        experiment=experiment,
        functional=format_functional(spec),
        d=d,
        process=process,
        geometry=geometry,
        n_grid=n_grid,
        replicates=replicates,
        paths=paths,
        pool_replicates=pool,
        seed=seed,
        threads=threads,
        output=output,
        format=fmt,
        options=options,
    )


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        if mark is not None:
            raise ConfigParseError(problem, mark.line + 1, mark.column + 1) from None
        raise ConfigParseError(problem) from None
    if data is None:
        data = {}
    return validate(data)

