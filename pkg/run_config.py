import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

try:
    from .sfde.errors import ConfigError, ValidationError
    from .sfde.expr.algorithms import lag_offsets, parse, segment_from_profile
    from .sfde.measure.algorithms import (
        DelayMeasure,
        Segment,
        SystemSpec,
        default_step,
        discretize,
        grid_index,
        measure_from_dict,
    )
except ImportError:
    from sfde.errors import ConfigError, ValidationError
    from sfde.expr.algorithms import lag_offsets, parse, segment_from_profile
    from sfde.measure.algorithms import (
        DelayMeasure,
        Segment,
        SystemSpec,
        default_step,
        discretize,
        grid_index,
        measure_from_dict,
    )

# Horizon of the resolvent table, in time units.
MAX_HORIZON = 2000.0


@dataclass
class RunConfig:
    """One experiment: the system, its numerics and the random seeds."""

    # system
    n: int
    m: int
    tau: float
    atoms: list[dict]
    sigma: list[list[float]]
    density: dict | None = None
    nonlinearity: dict | None = None  # {"exprs": [...], "lipschitz": L}
    # numerics
    h: float | None = None
    T_trunc: float | None = None
    alpha_grid: list[float] | None = None
    safety: float = 1.01
    horizon: float | None = None
    abscissa_tol: float = 1e-4
    # rng
    master_seed: int = 0
    replicas: int = 1000
    # initial segments as expressions in t
    initial: dict[str, list[str]] = field(default_factory=dict)

    @property
    def step(self) -> float:
        return self.h if self.h is not None else default_step(self.tau)

    def to_json_dict(self) -> dict[str, Any]:
        system = {"n": self.n, "m": self.m, "tau": self.tau, "atoms": self.atoms, "sigma": self.sigma}
        if self.density is not None:
            system["density"] = self.density
        if self.nonlinearity is not None:
            system["nonlinearity"] = self.nonlinearity
        numerics = {"h": self.step, "safety": self.safety, "abscissa_tol": self.abscissa_tol}
        for key in ("T_trunc", "alpha_grid", "horizon"):
            if getattr(self, key) is not None:
                numerics[key] = getattr(self, key)
        return {
            "system": system,
            "numerics": numerics,
            "rng": {"master_seed": self.master_seed, "replicas": self.replicas},
            "initial": self.initial,
        }


# --- Validation ---


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_numeric_array(value: Any) -> bool:
    if isinstance(value, (str, bytes, dict)):
        return False
    try:
        np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        return False
    return True


def is_config_valid(raw: Any) -> tuple[bool, str]:
    """
    Checks the JSON document layout (not the numerics).
    Returns: (is_valid, reason)
    """
    if not isinstance(raw, dict):
        return (False, "config must be a JSON object")
    system = raw.get("system")
    if not isinstance(system, dict):
        return (False, "missing 'system' object")

    for key in ("n", "m"):
        if not isinstance(system.get(key), int) or system[key] < 1:
            return (False, f"system.{key} must be a positive integer")
    if not _is_number(system.get("tau")) or system["tau"] < 0:
        return (False, "system.tau must be a nonnegative number")
    if not isinstance(system.get("atoms", []), list):
        return (False, "system.atoms must be a list")
    for i, atom in enumerate(system.get("atoms", [])):
        if not isinstance(atom, dict) or not _is_number(atom.get("s")) or "A" not in atom:
            return (False, f"system.atoms[{i}] needs a numeric 's' and a matrix 'A'")
        if not _is_numeric_array(atom["A"]):
            return (False, f"system.atoms[{i}].A must be a numeric matrix")

    density = system.get("density")
    if density is not None:
        if not isinstance(density, dict) or not _is_number(density.get("step")) or density["step"] <= 0:
            return (False, "system.density needs a positive numeric 'step'")
        if not isinstance(density.get("values"), list) or not _is_numeric_array(density["values"]):
            return (False, "system.density.values must be a list of numeric matrices")

    sigma = system.get("sigma")
    if sigma is None:
        return (False, "missing system.sigma")
    if not _is_numeric_array(sigma):
        return (False, "system.sigma must be a numeric matrix")
    if np.asarray(sigma, dtype=object).size != system["n"] * system["m"]:
        return (False, f"system.sigma must hold n*m = {system['n'] * system['m']} entries")

    nonlinearity = system.get("nonlinearity")
    if nonlinearity is not None:
        if not isinstance(nonlinearity, dict) or "exprs" not in nonlinearity:
            return (False, "system.nonlinearity needs 'exprs'")
        exprs = nonlinearity["exprs"]
        if not (isinstance(exprs, str) or (isinstance(exprs, list) and all(isinstance(e, str) for e in exprs))):
            return (False, "system.nonlinearity.exprs must be a string or a list of strings")
        if not _is_number(nonlinearity.get("lipschitz", 0.0)) or nonlinearity.get("lipschitz", 0.0) < 0:
            return (False, "system.nonlinearity.lipschitz must be a nonnegative number")

    numerics = raw.get("numerics", {})
    if not isinstance(numerics, dict):
        return (False, "'numerics' must be an object")
    h = numerics.get("h", system.get("h"))
    if h is not None and (not _is_number(h) or h <= 0):
        return (False, "h must be a positive number")
    grid = numerics.get("alpha_grid")
    if grid is not None and (not isinstance(grid, list) or not all(_is_number(a) and a > 0 for a in grid)):
        return (False, "numerics.alpha_grid must be a list of positive numbers")
    if not _is_number(numerics.get("safety", 1.0)) or numerics.get("safety", 1.0) < 1.0:
        return (False, "numerics.safety must be at least 1")

    rng = raw.get("rng", {})
    if not isinstance(rng, dict):
        return (False, "'rng' must be an object")
    seed = rng.get("master_seed", 0)
    if not isinstance(seed, int) or seed < 0:
        return (False, "rng.master_seed must be a nonnegative integer")
    replicas = rng.get("replicas", 1000)
    if not isinstance(replicas, int) or replicas < 1:
        return (False, "rng.replicas must be a positive integer")
    return (True, "")


def config_from_dict(raw: Any) -> RunConfig:
    ok, reason = is_config_valid(raw)
    if not ok:
        raise ConfigError(reason)
    system = raw["system"]
    numerics = raw.get("numerics", {})
    rng = raw.get("rng", {})

    sigma = np.asarray(system["sigma"], dtype=float).reshape(system["n"], system["m"]).tolist()
    config = RunConfig(
        n=system["n"],
        m=system["m"],
        tau=float(system["tau"]),
        atoms=list(system.get("atoms", [])),
        sigma=sigma,
        density=system.get("density"),
        nonlinearity=system.get("nonlinearity"),
        h=numerics.get("h", system.get("h")),
        T_trunc=numerics.get("T_trunc"),
        alpha_grid=numerics.get("alpha_grid"),
        safety=float(numerics.get("safety", 1.01)),
        horizon=numerics.get("horizon"),
        abscissa_tol=float(numerics.get("abscissa_tol", 1e-4)),
        master_seed=int(rng.get("master_seed", 0)),
        replicas=int(rng.get("replicas", 1000)),
        initial=dict(raw.get("initial", {})),
    )
    try:
        build_system(config)
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"malformed system: {e}")
    return config


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e.strerror}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path!r} is not valid JSON: {e.msg} at line {e.lineno}")
    return config_from_dict(raw)


# --- Building the numerical objects ---


def build_measure(config: RunConfig) -> DelayMeasure:
    return measure_from_dict(config.tau, config.n, config.atoms, config.density)


def build_system(config: RunConfig) -> SystemSpec:
    """
    Builds the system and checks that h divides tau, every atom lag and
    every nonlinearity lag.
    """
    measure = build_measure(config)
    h = config.step
    grid_index(config.tau, h, "tau")
    discretize(measure, h)

    nonlinearity = None
    if config.nonlinearity is not None:
        nonlinearity = parse(
            config.nonlinearity["exprs"],
            config.n,
            config.tau,
            float(config.nonlinearity.get("lipschitz", 0.0)),
        )
        lag_offsets(nonlinearity, h)
    return SystemSpec(measure, np.asarray(config.sigma, dtype=float), nonlinearity)


def initial_segments(config: RunConfig) -> tuple[Segment, Segment]:
    """(xi, eta): config 'initial' profiles, defaulting to xi = 1 and eta = 0."""
    profiles = {"xi": ["1"] * config.n, "eta": ["0"] * config.n}
    profiles.update(config.initial)
    try:
        xi = segment_from_profile(profiles["xi"], config.tau, config.step, config.n)
        eta = segment_from_profile(profiles["eta"], config.tau, config.step, config.n)
    except ValidationError as e:
        raise ConfigError(f"bad initial segment: {e}")
    return (xi, eta)


def default_horizon(tau: float, alpha_grid: list[float]) -> float:
    """min(max(20 max(tau, 1), 10 / min alpha), 2000), rounded up to whole time units."""
    horizon = min(max(20.0 * max(tau, 1.0), 10.0 / min(alpha_grid)), MAX_HORIZON)
    return float(np.ceil(horizon))
