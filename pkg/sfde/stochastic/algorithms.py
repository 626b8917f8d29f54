from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import gamma
from scipy.stats import linregress

try:
    from ..errors import (
        CertificationError,
        IntegrationOverflowError,
        LowConfidenceWarning,
        PreconditionError,
        RangeError,
        ShapeError,
    )
    from ..expr.algorithms import evaluate_lagged, lag_offsets
    from ..measure.algorithms import (
        GRID_TOL,
        DelayMeasure,
        Segment,
        SystemSpec,
        apply_stencil,
        discretize,
        grid_index,
        segment_distance,
        sup_norm,
        weighted_variation,
        zero_segment,
    )
    from ..resolvent.algorithms import ResolventTable, Trajectory
    from ..spectral.algorithms import Estimate, StabilityCertificate
    from .paths import WienerPath, shift
except ImportError:
    from sfde.errors import (
        CertificationError,
        IntegrationOverflowError,
        LowConfidenceWarning,
        PreconditionError,
        RangeError,
        ShapeError,
    )
    from sfde.expr.algorithms import evaluate_lagged, lag_offsets
    from sfde.measure.algorithms import (
        GRID_TOL,
        DelayMeasure,
        Segment,
        SystemSpec,
        apply_stencil,
        discretize,
        grid_index,
        segment_distance,
        sup_norm,
        weighted_variation,
        zero_segment,
    )
    from sfde.resolvent.algorithms import ResolventTable, Trajectory
    from sfde.spectral.algorithms import Estimate, StabilityCertificate
    from sfde.stochastic.paths import WienerPath, shift

# Truncation horizons never exceed this many time units.
MAX_TRUNCATION = 1.0e4


# --- Domain Types ---


@dataclass(frozen=True, eq=False)
class StationarySegment:
    segment: Segment
    truncation: float
    tail_bound: float
    certificate: StabilityCertificate


class MomentBounds(NamedTuple):
    ou4: float
    ou5: float
    ou6: float
    ou7: float


@dataclass
class ContractionFit:
    slope: float
    times: np.ndarray
    distances: np.ndarray
    early_convergence: bool
    fit_points: int


@dataclass
class SyncResult:
    first: Trajectory
    second: Trajectory
    distances: np.ndarray
    initial_distance: float


# --- Euler-Maruyama core ---


def em_batch(
    sys: SystemSpec,
    history: np.ndarray,
    increments: np.ndarray,
    h: float,
    t_start: float = 0.0,
) -> np.ndarray:
    """
    x_{j+1} = x_j + h [L(x_{t_j}) + f(x_{t_j})] + Sigma dB_j for a batch of
    replicas at once.

    history has shape (N+1, n, R), increments (steps, m, R).
    Returns the buffer (N+1+steps, n, R), history included.
    """
    stencil = discretize(sys.measure, h)
    n_hist = history.shape[0] - 1
    steps = increments.shape[0]
    offsets = lag_offsets(sys.nonlinearity, h) if sys.nonlinearity is not None else {}

    buffer = np.empty((n_hist + steps + 1,) + history.shape[1:])
    buffer[: n_hist + 1] = history
    replicas = history.shape[2]

    for j in range(n_hist, n_hist + steps):
        drift = apply_stencil(stencil, buffer, j)
        if sys.nonlinearity is not None:
            drift = drift + evaluate_lagged(
                sys.nonlinearity, lambda i, lag: buffer[j + offsets[lag], i], (replicas,)
            )
        noise = sys.sigma @ increments[j - n_hist]
        buffer[j + 1] = buffer[j] + h * drift + noise
        if not np.all(np.isfinite(buffer[j + 1])):
            raise IntegrationOverflowError(
                "Euler-Maruyama solution left the floating-point range", t_start + (j + 1 - n_hist) * h
            )
    return buffer


def _check_inputs(sys: SystemSpec, path: WienerPath, xi: Segment) -> None:
    m = sys.measure
    if abs(xi.tau - m.tau) > GRID_TOL * max(1.0, m.tau) or xi.dim != m.dim:
        raise ShapeError("initial segment does not match the system's tau and dimension")
    if abs(xi.h - path.h) > GRID_TOL * path.h:
        raise ShapeError(f"segment step {xi.h!r} differs from the path step {path.h!r}")
    if path.dim != sys.noise_dim:
        raise ShapeError(f"path dimension {path.dim} does not match the noise matrix ({sys.noise_dim} columns)")


def em_solve(
    sys: SystemSpec, path: WienerPath, xi: Segment, t0: float, T: float
) -> tuple[Trajectory, Segment]:
    """
    Solves the system from time t0 with history xi over [t0, t0+T].
    Returns: (trajectory on [t0, t0+T], terminal segment x_{t0+T})
    """
    _check_inputs(sys, path, xi)
    h = path.h
    steps = grid_index(T, h, "horizon")
    if steps <= 0:
        raise RangeError(f"horizon must be positive, got {T!r}")
    increments = path.increments_from(t0, steps)

    buffer = em_batch(sys, xi.values[:, :, None], increments[:, :, None], h, t0)[:, :, 0]
    n_hist = xi.values.shape[0] - 1
    trajectory = Trajectory(t0, h, buffer[n_hist:])
    terminal = Segment(xi.tau, h, buffer[buffer.shape[0] - n_hist - 1 :])
    return (trajectory, terminal)


def pullback(sys: SystemSpec, path: WienerPath, xi: Segment, t: float) -> Segment:
    """phi(t, theta_{-t} omega, xi): start at -t with history xi, observe at time 0."""
    if grid_index(t, path.h, "pullback time") == 0:
        return xi
    _, terminal = em_solve(sys, path, xi, -t, t)
    return terminal


# --- Stationary segment ---


def default_truncation(sys: SystemSpec, cert: StabilityCertificate, h: float) -> float:
    """40/alpha (affine) or 40/|rate| (nonlinear), capped, rounded up to the grid."""
    rate = cert.alpha_star if sys.is_affine else abs(cert.rate)
    t = min(40.0 / rate, MAX_TRUNCATION)
    return math.ceil(t / h - GRID_TOL) * h


def stationary_segment(
    sys: SystemSpec, path: WienerPath, T_trunc: float, cert: StabilityCertificate
) -> StationarySegment:
    """
    U(omega) (affine) or V(omega) (nonlinear) as the pullback of the zero
    segment over T_trunc. The limit does not depend on the starting segment.
    """
    if not sys.is_affine and not cert.certified:
        raise CertificationError(
            f"nonlinear system is not certified (rate {cert.rate:.6g} >= 0); no random equilibrium is guaranteed"
        )
    m = sys.measure
    segment = pullback(sys, path, zero_segment(m.tau, path.h, m.dim), T_trunc)
    rate = -cert.alpha_star if sys.is_affine else cert.rate
    tail = cert.k_const * math.exp(rate * T_trunc) * sup_norm(segment)
    return StationarySegment(segment, float(T_trunc), tail, cert)


def equilibrium_residual(sys: SystemSpec, path: WienerPath, u: StationarySegment, t: float) -> float:
    """
    || phi(t, omega, U(omega)) - U(theta_t omega) ||: how far the constructed
    segment is from being invariant along the flow.
    """
    _, forward = em_solve(sys, path, u.segment, 0.0, t)
    target = stationary_segment(sys, shift(path, t), u.truncation, u.certificate)
    return segment_distance(forward, target.segment)


def stationary_convolution(table: ResolventTable, sigma: np.ndarray, path: WienerPath, T_trunc: float) -> Segment:
    """
    U(omega)(s) = int_{s-T_trunc}^s r(s-u) Sigma dB(u) by the left-point sum,
    for every node s in [-tau, 0]. Affine systems only.
    """
    m = table.measure
    h = table.h
    if abs(path.h - h) > GRID_TOL * h:
        raise ShapeError("path and resolvent table use different steps")
    lags = grid_index(T_trunc, h, "truncation")
    if lags > table.values.shape[0] - 1 - table.zero_index:
        raise RangeError(f"resolvent horizon {table.horizon!r} is shorter than T_trunc={T_trunc!r}")
    n_hist = table.zero_index

    kernel = table.values[n_hist + 1 : n_hist + lags + 1]  # r(h), ..., r(lags*h)
    increments = path.increments_from(-m.tau - T_trunc, n_hist + lags)
    noise = increments @ np.asarray(sigma).T  # node i: Sigma dB over [u_i, u_i + h]

    values = np.empty((n_hist + 1, m.dim))
    for k in range(n_hist + 1):
        # node s_k = -tau + k h uses increments s_k - l h for l = 1..lags
        values[k] = np.einsum("lij,lj->i", kernel, noise[k : k + lags][::-1])
    return Segment(m.tau, h, values)


# --- Moments ---


def variance_quadrature(table: ResolventTable, sigma: np.ndarray, s: float = 0.0) -> Estimate:
    """
    E|U(s)|^2 = int_0^inf ||r(u) Sigma||_F^2 du, truncated at the table
    horizon. The value is the same for every s in [-tau, 0].
    """
    if not -table.measure.tau - GRID_TOL <= s <= 0.0:
        raise RangeError(f"s={s!r} must lie in [-tau, 0]")
    n_hist = table.zero_index
    products = np.einsum("kij,jl->kil", table.values[n_hist:], np.asarray(sigma))
    integrand = np.sum(products**2, axis=(1, 2))
    value = float(trapezoid(integrand, dx=table.h))

    low = value > 0 and integrand[-1] * table.horizon > 1e-8 * value
    if low:
        warnings.warn(
            f"variance quadrature truncated at T={table.horizon:g} while the integrand is still {integrand[-1]:.3g}",
            LowConfidenceWarning,
            stacklevel=2,
        )
    return Estimate(value, bool(low))


def moment_bounds(
    m: DelayMeasure, sigma: np.ndarray, alpha: float, c_alpha: float, path_dim: int | None = None
) -> MomentBounds:
    """Right-hand sides of the second-moment, first-moment and sup-norm moment bounds of U."""
    if alpha <= 0:
        raise PreconditionError(f"alpha must be positive, got {alpha!r}")
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim < 2:
        sigma = sigma.reshape(m.dim, -1)
    dim_m = sigma.shape[1] if path_dim is None else path_dim
    norm = float(np.linalg.norm(sigma))
    tau = m.tau
    weighted = weighted_variation(m, alpha)

    ou4 = c_alpha**2 * norm**2 / (2 * alpha)
    ou5 = c_alpha * norm / math.sqrt(2 * alpha)
    ou6 = 2 * dim_m * math.sqrt(tau) * norm + math.sqrt(2 / (math.pi * alpha**3)) * dim_m * math.exp(
        alpha * tau
    ) * c_alpha * norm * gamma(1.5) * weighted
    ou7 = 8 * dim_m * tau * norm**2 + (2 * dim_m / alpha**3) * math.exp(2 * alpha * tau) * c_alpha**2 * norm**2 * (
        weighted**2
    )
    return MomentBounds(float(ou4), float(ou5), float(ou6), float(ou7))


# --- Forward comparisons: contraction and synchronization ---


def _two_solutions(sys: SystemSpec, path: WienerPath, xi: Segment, eta: Segment, T: float):
    first, _ = em_solve(sys, path, xi, 0.0, T)
    second, _ = em_solve(sys, path, eta, 0.0, T)
    full_first = np.concatenate([xi.values[:-1], first.values])
    full_second = np.concatenate([eta.values[:-1], second.values])
    return first, second, full_first, full_second


def contraction_rate(
    sys: SystemSpec,
    path: WienerPath,
    xi: Segment,
    eta: Segment,
    T: float,
    fit_window: tuple[float, float] | None = None,
) -> ContractionFit:
    """
    Least-squares slope of log ||psi(t, xi) - psi(t, eta)||_C over fit_window,
    with the distance sampled at multiples of tau (every time unit when tau = 0).
    Distances below the rounding floor count as converged.
    """
    h = path.h
    tau = sys.measure.tau
    _, _, full_first, full_second = _two_solutions(sys, path, xi, eta, T)
    n_hist = xi.values.shape[0] - 1
    gap = np.linalg.norm(full_first - full_second, axis=1)

    stride = n_hist if n_hist > 0 else grid_index(1.0, h, "sampling interval")
    samples = np.arange(n_hist, full_first.shape[0], stride)
    times = (samples - n_hist) * h
    distances = np.array([np.max(gap[k - n_hist : k + 1]) for k in samples])

    scale = 1.0 + max(np.max(np.abs(full_first)), np.max(np.abs(full_second)))
    floor = 1e3 * np.finfo(float).eps * scale
    lo, hi = fit_window if fit_window is not None else (max(tau, h), T)

    in_window = (times >= lo - GRID_TOL) & (times <= hi + GRID_TOL)
    below = np.flatnonzero(distances <= floor)
    cutoff = times[below[0]] if len(below) else math.inf
    usable = in_window & (times < cutoff)
    early = cutoff <= hi

    if np.count_nonzero(usable) < 2:
        return ContractionFit(-math.inf, times, distances, True, int(np.count_nonzero(usable)))
    fit = linregress(times[usable], np.log(distances[usable]))
    return ContractionFit(float(fit.slope), times, distances, bool(early), int(np.count_nonzero(usable)))


def synchronize(sys: SystemSpec, path: WienerPath, xi: Segment, eta: Segment, T: float) -> SyncResult:
    """Two forward solutions on the same path and |x(t, xi) - x(t, eta)| per node."""
    first, second, _, _ = _two_solutions(sys, path, xi, eta, T)
    distances = np.linalg.norm(first.values - second.values, axis=1)
    return SyncResult(first, second, distances, segment_distance(xi, eta))


# --- Pullback diagnostics ---


def pullback_distances(
    sys: SystemSpec, path: WienerPath, xi: Segment, times: list[float], reference_time: float
) -> tuple[np.ndarray, float]:
    """
    Sup-distance between pullback(t) and pullback(reference_time) for each t.
    Returns: (distances, fitted log-slope; nan with fewer than two positive distances)
    """
    reference = pullback(sys, path, xi, reference_time)
    distances = np.array([segment_distance(pullback(sys, path, xi, t), reference) for t in times])
    positive = distances > 0
    if np.count_nonzero(positive) < 2:
        return (distances, math.nan)
    fit = linregress(np.asarray(times, dtype=float)[positive], np.log(distances[positive]))
    return (distances, float(fit.slope))


def tempered_profile(
    sys: SystemSpec,
    path: WienerPath,
    T_trunc: float,
    gamma_rate: float,
    times: list[float],
    cert: StabilityCertificate,
) -> np.ndarray:
    """e^{-gamma |t|} ||U(theta_t omega)||_C for each t: a temperedness diagnostic."""
    values = []
    for t in times:
        u = stationary_segment(sys, shift(path, t), T_trunc, cert)
        values.append(math.exp(-gamma_rate * abs(t)) * sup_norm(u.segment))
    return np.array(values)
