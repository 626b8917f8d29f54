from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable

import numpy as np
from scipy.integrate import trapezoid

try:
    from ..errors import AlignmentError, RangeError, ShapeError, ValidationError
except ImportError:
    from sfde.errors import AlignmentError, RangeError, ShapeError, ValidationError

if TYPE_CHECKING:
    from ..expr.algorithms import NonlinearitySpec

# Relative slack when deciding whether a location sits on the grid.
GRID_TOL = 1e-9


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def grid_index(x: float, h: float, what: str = "location") -> int:
    """
    Returns the integer k with x = k*h, or raises AlignmentError
    when x is not a multiple of h.
    """
    ratio = x / h
    k = int(round(ratio))
    if abs(ratio - k) > GRID_TOL * max(1.0, abs(ratio)):
        raise AlignmentError(f"{what} {x!r} is not an integer multiple of h={h!r}")
    return k


# --- Domain Types ---


@dataclass(frozen=True, eq=False)
class Atom:
    s: float
    matrix: np.ndarray


@dataclass(frozen=True, eq=False)
class Density:
    # Matrix values at -tau, -tau+step, ..., 0; piecewise linear in between.
    step: float
    values: np.ndarray

    def at(self, u: np.ndarray, tau: float) -> np.ndarray:
        """Interpolates the density at the locations `u` -> shape (len(u), n, n)."""
        grid = -tau + self.step * np.arange(self.values.shape[0])
        flat = self.values.reshape(self.values.shape[0], -1)
        out = np.empty((len(u), flat.shape[1]))
        for col in range(flat.shape[1]):
            out[:, col] = np.interp(u, grid, flat[:, col])
        n = self.values.shape[1]
        return out.reshape(len(u), n, n)


@dataclass(frozen=True, eq=False)
class DelayMeasure:
    tau: float
    dim: int
    atoms: tuple[Atom, ...] = ()
    density: Density | None = None

    def __post_init__(self):
        atoms = []
        for a in self.atoms:
            matrix = np.array(a.matrix, dtype=float)
            if matrix.size == self.dim * self.dim:
                matrix = matrix.reshape(self.dim, self.dim)
            atoms.append(Atom(float(a.s), _frozen(matrix)))
        object.__setattr__(self, "atoms", tuple(atoms))
        if self.density is not None:
            values = _frozen(np.array(self.density.values, dtype=float))
            object.__setattr__(self, "density", Density(float(self.density.step), values))
        check_measure(self)


@dataclass(frozen=True, eq=False)
class Segment:
    tau: float
    h: float
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        object.__setattr__(self, "values", _frozen(values))
        check_segment(self)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def nodes(self) -> np.ndarray:
        return -self.tau + self.h * np.arange(self.values.shape[0])

    def at(self, u: float) -> np.ndarray:
        """Value at a grid location u in [-tau, 0]."""
        return self.values[grid_index(u + self.tau, self.h, "segment location")]


@dataclass(frozen=True, eq=False)
class SystemSpec:
    measure: DelayMeasure
    sigma: np.ndarray
    nonlinearity: NonlinearitySpec | None = None

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim < 2:
            sigma = sigma.reshape(self.measure.dim, -1)
        object.__setattr__(self, "sigma", _frozen(sigma))
        if sigma.shape[0] != self.measure.dim:
            raise ShapeError(
                f"noise matrix has {sigma.shape[0]} rows but the state dimension is {self.measure.dim}"
            )
        if self.nonlinearity is not None and self.nonlinearity.dim != self.measure.dim:
            raise ShapeError("nonlinearity dimension does not match the state dimension")

    @property
    def noise_dim(self) -> int:
        return self.sigma.shape[1]

    @property
    def is_affine(self) -> bool:
        return self.nonlinearity is None


@dataclass(frozen=True, eq=False)
class MeasureStencil:
    """
    Grid form of L for a step h: L(x_t) ~ sum_k weights[k] @ x(t + offsets[k]*h).
    Atom weights are exact; density weights carry the trapezoid factors.
    """

    h: float
    offsets: np.ndarray
    weights: np.ndarray


# --- Core Validation Logic ---


def check_measure(m: DelayMeasure) -> None:
    if m.tau < 0:
        raise RangeError(f"tau must be nonnegative, got {m.tau!r}")
    if m.dim < 1:
        raise ShapeError(f"state dimension must be positive, got {m.dim!r}")

    seen: list[float] = []
    for atom in m.atoms:
        if atom.matrix.shape != (m.dim, m.dim):
            raise ShapeError(f"atom at s={atom.s!r} has shape {atom.matrix.shape}, expected {(m.dim, m.dim)}")
        if not (-m.tau - GRID_TOL * max(1.0, m.tau) <= atom.s <= 0.0):
            raise RangeError(f"atom location {atom.s!r} lies outside [-{m.tau}, 0]")
        if any(abs(atom.s - other) <= GRID_TOL * max(1.0, m.tau) for other in seen):
            raise ValidationError(f"atom location {atom.s!r} appears twice")
        seen.append(atom.s)

    if m.density is not None:
        if m.tau == 0:
            raise ValidationError("a measure with tau = 0 cannot carry a density")
        values = m.density.values
        if values.ndim != 3 or values.shape[1:] != (m.dim, m.dim):
            raise ShapeError(f"density values must have shape (K+1, {m.dim}, {m.dim})")
        intervals = grid_index(m.tau, m.density.step, "density horizon")
        if values.shape[0] != intervals + 1:
            raise ShapeError(
                f"density grid has {values.shape[0]} nodes, expected {intervals + 1} spanning [-tau, 0]"
            )


def check_segment(s: Segment) -> None:
    if s.h <= 0:
        raise RangeError(f"segment step must be positive, got {s.h!r}")
    if s.values.ndim != 2:
        raise ShapeError("segment values must be a (nodes, n) array")
    expected = grid_index(s.tau, s.h, "segment horizon") + 1
    if s.values.shape[0] != expected:
        raise ShapeError(f"segment has {s.values.shape[0]} nodes, expected {expected}")
    if not np.all(np.isfinite(s.values)):
        raise ValidationError("segment values must be finite")


def is_measure_valid(m: DelayMeasure) -> tuple[bool, str]:
    """Returns: (is_valid, reason)"""
    try:
        check_measure(m)
    except ValidationError as e:
        return (False, str(e))
    return (True, "")


# --- Construction helpers ---


def node_count(tau: float, h: float) -> int:
    return grid_index(tau, h, "delay horizon") + 1


def default_step(tau: float) -> float:
    return tau / 256 if tau > 0 else 1.0 / 256


def zero_segment(tau: float, h: float, dim: int) -> Segment:
    return Segment(tau, h, np.zeros((node_count(tau, h), dim)))


def segment_from_function(fn: Callable[[np.ndarray], Any], tau: float, h: float, dim: int = 1) -> Segment:
    """Samples fn on the grid -tau, ..., 0. fn is called once on the node array."""
    nodes = -tau + h * np.arange(node_count(tau, h))
    values = np.asarray(fn(nodes), dtype=float)
    if values.ndim == 0:
        values = np.full((len(nodes), dim), float(values))
    return Segment(tau, h, values.reshape(len(nodes), dim))


def _as_matrix(raw: Any, dim: int, what: str) -> np.ndarray:
    matrix = np.array(raw, dtype=float)
    if matrix.size != dim * dim:
        raise ShapeError(f"{what} must hold {dim}x{dim} entries, got {matrix.size}")
    return matrix.reshape(dim, dim)


def measure_from_dict(tau: float, dim: int, atoms: list[dict], density: dict | None = None) -> DelayMeasure:
    """
    Builds a measure from its JSON form:
    atoms = [{"s": number, "A": row-major matrix}, ...],
    density = {"step": h, "values": [matrices]}.
    """
    parsed = []
    for i, entry in enumerate(atoms):
        if "s" not in entry or "A" not in entry:
            raise ShapeError(f"atom {i} needs both 's' and 'A'")
        parsed.append(Atom(float(entry["s"]), _as_matrix(entry["A"], dim, f"atom {i} matrix")))

    dens = None
    if density is not None:
        values = [_as_matrix(v, dim, "density value") for v in density["values"]]
        dens = Density(float(density["step"]), np.array(values))
    return DelayMeasure(float(tau), int(dim), tuple(parsed), dens)


# --- Evaluation ---


def discretize(m: DelayMeasure, h: float) -> MeasureStencil:
    """
    Grid form of the measure for step h.
    Atom locations must be multiples of h; the density is sampled at the
    grid nodes and weighted with the trapezoid rule.
    """
    collected: dict[int, np.ndarray] = {}
    for atom in m.atoms:
        k = grid_index(atom.s, h, "atom location")
        collected[k] = collected.get(k, np.zeros((m.dim, m.dim))) + atom.matrix

    if m.density is not None:
        n_steps = grid_index(m.tau, h, "delay horizon")
        u = -m.tau + h * np.arange(n_steps + 1)
        dens = m.density.at(u, m.tau) * h
        dens[0] *= 0.5
        dens[-1] *= 0.5
        for i in range(n_steps + 1):
            k = i - n_steps
            collected[k] = collected.get(k, np.zeros((m.dim, m.dim))) + dens[i]

    offsets = np.array(sorted(collected), dtype=int)
    if len(offsets) == 0:
        weights = np.zeros((0, m.dim, m.dim))
    else:
        weights = np.array([collected[k] for k in offsets])
    return MeasureStencil(h, _frozen(offsets), _frozen(weights))


def apply_stencil(stencil: MeasureStencil, buffer: np.ndarray, index: int) -> np.ndarray:
    """
    Evaluates L on a buffer of shape (nodes, n, cols) at node `index`.
    Returns shape (n, cols).
    """
    if len(stencil.offsets) == 0:
        return np.zeros(buffer.shape[1:])
    return np.einsum("kij,kjc->ic", stencil.weights, buffer[index + stencil.offsets])


def apply(m: DelayMeasure, s: Segment) -> np.ndarray:
    """
    L(s) = sum_k A_k s(s_k) + int density(u) s(u) du.
    Returns: vector of length n
    """
    if abs(s.tau - m.tau) > GRID_TOL * max(1.0, m.tau):
        raise ShapeError(f"segment horizon {s.tau!r} does not match the measure's tau {m.tau!r}")
    if s.dim != m.dim:
        raise ShapeError(f"segment dimension {s.dim} does not match the measure's dimension {m.dim}")
    stencil = discretize(m, s.h)
    last = s.values.shape[0] - 1
    return apply_stencil(stencil, s.values[:, :, None], last)[:, 0]


def _density_norms(m: DelayMeasure, weight: Callable[[np.ndarray], np.ndarray]) -> float:
    if m.density is None:
        return 0.0
    grid = -m.tau + m.density.step * np.arange(m.density.values.shape[0])
    norms = np.linalg.norm(m.density.values, axis=(1, 2)) * weight(grid)
    return float(trapezoid(norms, dx=m.density.step))


def total_variation(m: DelayMeasure) -> float:
    """|mu|([-tau, 0]) with the Frobenius norm on matrices."""
    atoms = sum(float(np.linalg.norm(a.matrix)) for a in m.atoms)
    return atoms + _density_norms(m, np.ones_like)


def weighted_variation(m: DelayMeasure, alpha: float) -> float:
    """int_{-tau}^0 e^{-alpha*rho} |mu|(d rho)"""
    atoms = sum(np.exp(-alpha * a.s) * float(np.linalg.norm(a.matrix)) for a in m.atoms)
    return float(atoms) + _density_norms(m, lambda u: np.exp(-alpha * u))


def sup_norm(s: Segment) -> float:
    return float(np.max(np.linalg.norm(s.values, axis=1)))


def segment_distance(s1: Segment, s2: Segment) -> float:
    if s1.values.shape != s2.values.shape:
        raise ShapeError("segments live on different grids")
    return float(np.max(np.linalg.norm(s1.values - s2.values, axis=1)))
