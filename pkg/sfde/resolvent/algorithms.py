from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

try:
    from ..errors import IntegrationOverflowError, PreconditionError, RangeError, ShapeError
    from ..measure.algorithms import (
        GRID_TOL,
        DelayMeasure,
        MeasureStencil,
        Segment,
        apply_stencil,
        discretize,
        grid_index,
    )
except ImportError:
    from sfde.errors import IntegrationOverflowError, PreconditionError, RangeError, ShapeError
    from sfde.measure.algorithms import (
        GRID_TOL,
        DelayMeasure,
        MeasureStencil,
        Segment,
        apply_stencil,
        discretize,
        grid_index,
    )


# --- Domain Types ---


@dataclass(frozen=True, eq=False)
class ResolventTable:
    """
    Fundamental solution r(t) on the nodes -tau, ..., 0, h, ..., T.
    values[zero_index] is r(0) = I (the right limit; r(0-) = 0).
    """

    measure: DelayMeasure
    h: float
    horizon: float
    values: np.ndarray

    @property
    def zero_index(self) -> int:
        return grid_index(self.measure.tau, self.h, "delay horizon")

    @property
    def times(self) -> np.ndarray:
        return (np.arange(self.values.shape[0]) - self.zero_index) * self.h


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Samples x(t0), x(t0+h), ..., x(t0+T)."""

    t0: float
    h: float
    values: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.values.shape[0])

# --- Heun integrator (method of steps on the grid) ---


def heun_steps(
    stencil: MeasureStencil,
    buffer: np.ndarray,
    start: int,
    steps: int,
    jump_index: int | None = None,
    t_start: float = 0.0,
) -> None:
    """
    Advances x' = L(x_t) in place on a buffer of shape (nodes, n, cols),
    from node `start` for `steps` steps (explicit trapezoid predictor-corrector).

    Delayed lookups landing on `jump_index` in the corrector use the left
    limit 0 there; this is how the jump of r at t = 0 is integrated.
    """
    h = stencil.h
    offsets = stencil.offsets
    current = offsets == 0
    delayed = offsets < 0

    for j in range(start, start + steps):
        f0 = apply_stencil(stencil, buffer, j)
        predicted = buffer[j] + h * f0

        lookup = j + 1 + offsets
        values = buffer[lookup]
        values[current] = predicted
        if jump_index is not None:
            values[delayed & (lookup == jump_index)] = 0.0
        f1 = np.einsum("kij,kjc->ic", stencil.weights, values) if len(offsets) else np.zeros_like(f0)

        buffer[j + 1] = buffer[j] + 0.5 * h * (f0 + f1)
        if not np.all(np.isfinite(buffer[j + 1])):
            raise IntegrationOverflowError(
                "solution left the floating-point range", t_start + (j + 1 - start) * h
            )


def compute_resolvent(m: DelayMeasure, h: float, T: float) -> ResolventTable:
    """
    Integrates r'(t) = int mu(du) r(t+u) from r(0) = I with zero history.
    Returns: ResolventTable on [-tau, T]
    """
    if T < m.tau - GRID_TOL:
        raise PreconditionError(f"horizon T={T!r} must be at least tau={m.tau!r}")
    stencil = discretize(m, h)
    n_hist = grid_index(m.tau, h, "delay horizon")
    n_steps = grid_index(T, h, "horizon")

    buffer = np.zeros((n_hist + n_steps + 1, m.dim, m.dim))
    buffer[n_hist] = np.eye(m.dim)
    heun_steps(stencil, buffer, n_hist, n_steps, jump_index=n_hist)

    buffer.flags.writeable = False
    return ResolventTable(m, h, n_steps * h, buffer)


def lookup(table: ResolventTable, t: float) -> np.ndarray:
    """r(t) at a grid node t in [-tau, T]."""
    k = grid_index(t, table.h, "time")
    index = table.zero_index + k
    if index < 0 or index >= table.values.shape[0]:
        raise RangeError(f"t={t!r} lies outside the table range [-{table.measure.tau}, {table.horizon}]")
    return table.values[index]


def _check_history(m: DelayMeasure, xi: Segment) -> None:
    if abs(xi.tau - m.tau) > GRID_TOL * max(1.0, m.tau):
        raise ShapeError(f"history horizon {xi.tau!r} does not match tau={m.tau!r}")
    if xi.dim != m.dim:
        raise ShapeError(f"history dimension {xi.dim} does not match n={m.dim}")


def integrate_linear(m: DelayMeasure, xi: Segment, T: float) -> Trajectory:
    """
    Solves the homogeneous linear delay equation with history xi.
    Returns: Trajectory on [0, T]
    """
    _check_history(m, xi)
    h = xi.h
    stencil = discretize(m, h)
    n_hist = xi.values.shape[0] - 1
    n_steps = grid_index(T, h, "horizon")

    buffer = np.zeros((n_hist + n_steps + 1, m.dim, 1))
    buffer[: n_hist + 1, :, 0] = xi.values
    heun_steps(stencil, buffer, n_hist, n_steps)
    return Trajectory(0.0, h, buffer[n_hist:, :, 0])


def homogeneous_formula(table: ResolventTable, xi: Segment, t: float) -> np.ndarray:
    """
    y(t, xi) = r(t) xi(0) + int_{-tau}^0 int_{-tau}^u r(t+s-u) mu(ds) xi(u) du

    Atoms are summed exactly, the u-integral uses the trapezoid rule with
    one-sided limits of r where its argument crosses 0.
    """
    m = table.measure
    _check_history(m, xi)
    if abs(xi.h - table.h) > GRID_TOL * table.h:
        raise ShapeError("history and resolvent table use different steps")
    if t < 0 or t + m.tau > table.horizon + GRID_TOL * max(1.0, table.horizon):
        raise RangeError(f"t={t!r} needs t + tau <= table horizon {table.horizon!r}")

    h = table.h
    n_hist = table.zero_index
    k_t = grid_index(t, h, "time")
    r = table.values
    y = r[n_hist + k_t] @ xi.values[-1]

    for atom in m.atoms:
        k_s = grid_index(atom.s, h, "atom location")
        if k_s == 0:
            continue
        i = np.arange(n_hist + k_s, n_hist + 1)
        arg = k_t + k_s - (i - n_hist)
        g = np.einsum("kij,jl,kl->ki", r[n_hist + arg], atom.matrix, xi.values[i])
        total = trapezoid(g, dx=h, axis=0)
        jump = (arg == 0) & (i < n_hist)
        total -= 0.5 * h * g[jump].sum(axis=0)
        y = y + total

    if m.density is not None:
        nodes = xi.nodes
        dens = m.density.at(nodes, m.tau)
        inner = np.zeros((n_hist + 1, m.dim, m.dim))
        for i in range(1, n_hist + 1):
            j = np.arange(i + 1)
            mats = np.einsum("kab,kbc->kac", r[n_hist + k_t + j - i], dens[: i + 1])
            inner[i] = trapezoid(mats, dx=h, axis=0)
        y = y + trapezoid(np.einsum("kab,kb->ka", inner, xi.values), dx=h, axis=0)

    return np.asarray(y, dtype=float)


def decay_check(table: ResolventTable, alpha: float, c: float, rtol: float = 0.0) -> tuple[bool, float]:
    """
    Checks ||r(t)||_F <= c * e^{-alpha t} on every node of the table.
    Returns: (passed, time of the node with the largest ratio)
    """
    times = table.times
    norms = np.linalg.norm(table.values, axis=(1, 2))
    bound = c * np.exp(-alpha * times)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(norms == 0.0, 0.0, norms / bound)
    passed = bool(np.all(norms <= bound * (1.0 + rtol)))
    return (passed, float(times[int(np.argmax(ratio))]))


def resolvent_residual(table: ResolventTable) -> np.ndarray:
    """
    Residual of r(t) = I + int_0^t int mu(du) r(s+u) ds at every node t >= 0,
    with the time integral done by the trapezoid rule.
    Returns: max-abs residual per node on [0, T]
    """
    m = table.measure
    stencil = discretize(m, table.h)
    n_hist = table.zero_index
    buffer = np.asarray(table.values)
    delayed = stencil.offsets < 0

    n_nodes = buffer.shape[0] - n_hist
    right = np.array([apply_stencil(stencil, buffer, n_hist + j) for j in range(n_nodes)])
    # a delayed term with lag k*h reads r(0) at node j = k; from the left it is r(0-) = 0
    left = right.copy()
    for k in np.flatnonzero(delayed):
        j = -int(stencil.offsets[k])
        if j < n_nodes:
            left[j] = left[j] - stencil.weights[k] @ buffer[n_hist]

    increments = 0.5 * table.h * (right[:-1] + left[1:])
    integral = np.concatenate([np.zeros((1, m.dim, m.dim)), np.cumsum(increments, axis=0)])
    residual = buffer[n_hist:] - np.eye(m.dim) - integral
    return np.max(np.abs(residual), axis=(1, 2))
