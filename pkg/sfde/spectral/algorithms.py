from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import lu_factor
from scipy.optimize import bisect

try:
    from ..errors import (
        ConvergenceError,
        EvaluationError,
        LowConfidenceWarning,
        PreconditionError,
        RootOnContourError,
        UnstableSystemError,
    )
    from ..measure.algorithms import DelayMeasure, total_variation
    from ..resolvent.algorithms import ResolventTable
except ImportError:
    from sfde.errors import (
        ConvergenceError,
        EvaluationError,
        LowConfidenceWarning,
        PreconditionError,
        RootOnContourError,
        UnstableSystemError,
    )
    from sfde.measure.algorithms import DelayMeasure, total_variation
    from sfde.resolvent.algorithms import ResolventTable


# --- Domain Types ---


class Estimate(NamedTuple):
    value: float
    low_confidence: bool


@dataclass
class StabilityCertificate:
    alpha0_est: float
    alpha_star: float
    c_alpha: float
    lipschitz: float
    k_const: float
    rate: float
    certified: bool
    diagnostics: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "alpha0": self.alpha0_est,
            "alpha": self.alpha_star,
            "c_alpha": self.c_alpha,
            "lipschitz": self.lipschitz,
            "k": self.k_const,
            "rate": self.rate,
            "certified": self.certified,
            "diagnostics": list(self.diagnostics),
        }


# --- Characteristic function ---


def _char_matrices(m: DelayMeasure, lams: np.ndarray, derivative: bool = False) -> np.ndarray:
    """
    Delta(lam) = lam*I - sum_k A_k e^{lam s_k} - int e^{lam u} density(u) du,
    or its lam-derivative, for an array of lam. Returns shape (len(lams), n, n).
    """
    lams = np.asarray(lams, dtype=complex)
    eye = np.eye(m.dim)
    with np.errstate(over="ignore", invalid="ignore"):
        if derivative:
            out = np.broadcast_to(eye, (len(lams), m.dim, m.dim)).astype(complex)
        else:
            out = lams[:, None, None] * eye
        for atom in m.atoms:
            factor = np.exp(lams * atom.s)
            if derivative:
                factor = atom.s * factor
            out = out - factor[:, None, None] * atom.matrix

        if m.density is not None:
            step = m.density.step
            u = -m.tau + step * np.arange(m.density.values.shape[0])
            w = np.full(len(u), step)
            w[0] = w[-1] = 0.5 * step
            kernel = np.exp(np.outer(lams, u)) * w
            if derivative:
                kernel = kernel * u
            out = out - np.einsum("lj,jab->lab", kernel, m.density.values)

    if not np.all(np.isfinite(out)):
        bad = lams[~np.all(np.isfinite(out), axis=(1, 2))][0]
        raise EvaluationError(
            f"characteristic matrix overflows at lambda={bad!r} (Re(lambda)*tau too large)"
        )
    return out


def char_det(m: DelayMeasure, lam: complex) -> complex:
    """det(lam*I - int e^{lam s} mu(ds)), by LU factorization with partial pivoting."""
    matrix = _char_matrices(m, np.array([lam]))[0]
    lu, piv = lu_factor(matrix, check_finite=False)
    swaps = np.count_nonzero(piv != np.arange(len(piv)))
    return complex((-1) ** swaps * np.prod(np.diag(lu)))


def log_derivative(m: DelayMeasure, lams: np.ndarray) -> np.ndarray:
    """char_det'/char_det = tr(Delta^{-1} Delta') for an array of lam."""
    delta = _char_matrices(m, lams)
    d_delta = _char_matrices(m, lams, derivative=True)
    try:
        solved = np.linalg.solve(delta, d_delta)
    except np.linalg.LinAlgError:
        raise RootOnContourError("the characteristic matrix is singular on the contour; perturb beta")
    return np.trace(solved, axis1=1, axis2=2)


# --- Root counting (argument principle) ---

# Cap on characteristic-matrix evaluations per contour.
MAX_CONTOUR_POINTS = 2_000_000


def _phases(m: DelayMeasure, lams: np.ndarray) -> np.ndarray:
    """Unit complex numbers det(Delta)/|det(Delta)| at each lam."""
    sign, _ = np.linalg.slogdet(_char_matrices(m, lams))
    if np.any(sign == 0):
        raise RootOnContourError("the characteristic matrix is singular on the contour; perturb beta")
    return sign


def _winding_number(m: DelayMeasure, corners: list[complex], h0: float, min_len: float) -> float:
    """
    Change of arg det(Delta) along the closed polyline through `corners`,
    divided by 2*pi.

    The phase is tracked directly. A segment is accepted when the Simpson
    estimate of Im int det'/det over it is small and agrees with both the
    trapezoid estimate and the measured phase steps; otherwise it is halved.
    Near a root at distance d this stops at segments of length ~d.
    """
    starts, ends = [], []
    for a, b in zip(corners, corners[1:] + corners[:1]):
        pieces = max(1, int(math.ceil(abs(b - a) / h0)))
        t = np.linspace(0.0, 1.0, pieces + 1)
        pts = a + t * (b - a)
        starts.append(pts[:-1])
        ends.append(pts[1:])
    a = np.concatenate(starts)
    b = np.concatenate(ends)
    pa, pb = _phases(m, a), _phases(m, b)
    ga, gb = log_derivative(m, a), log_derivative(m, b)

    total = 0.0
    evaluations = 2 * len(a)
    while len(a):
        mid = 0.5 * (a + b)
        pm, gm = _phases(m, mid), log_derivative(m, mid)
        evaluations += len(mid)

        step = b - a
        simpson = np.imag((ga + 4.0 * gm + gb) / 6.0 * step)
        trapezoid = np.imag(0.5 * (ga + gb) * step)
        measured = np.angle(pm * np.conj(pa)) + np.angle(pb * np.conj(pm))
        ok = (
            (np.abs(simpson) <= math.pi / 2)
            & (np.abs(measured - simpson) <= math.pi / 8)
            & (np.abs(trapezoid - simpson) <= math.pi / 8)
        )
        total += float(np.sum(measured[ok]))

        rest = ~ok
        if np.any(rest & (np.abs(step) < min_len)):
            raise RootOnContourError("a characteristic root lies on the contour; perturb beta")
        if evaluations > MAX_CONTOUR_POINTS:
            raise ConvergenceError("contour phase did not settle; perturb beta")

        a, b, mid = a[rest], b[rest], mid[rest]
        pa, pb, pm = pa[rest], pb[rest], pm[rest]
        ga, gb, gm = ga[rest], gb[rest], gm[rest]
        a, b = np.concatenate([a, mid]), np.concatenate([mid, b])
        pa, pb = np.concatenate([pa, pm]), np.concatenate([pm, pb])
        ga, gb = np.concatenate([ga, gm]), np.concatenate([gm, gb])
    return total / (2.0 * math.pi)


def root_count(m: DelayMeasure, beta: float, contour_tol: float = 1e-10, margin: float = 1.0) -> int:
    """
    Number of characteristic roots with Re(lam) > beta, counted with multiplicity.
    All such roots satisfy |lam| <= |mu| e^{-min(0, beta) tau}, so a finite
    rectangle [beta, beta_max] x [-Omega, Omega] encloses them.
    contour_tol is the relative segment length below which a root counts as
    lying on the contour.
    """
    tv = total_variation(m)
    beta_max = tv + margin
    if beta >= beta_max:
        return 0
    omega = tv * math.exp(max(0.0, -beta) * m.tau) + margin
    corners = [
        complex(beta, -omega),
        complex(beta_max, -omega),
        complex(beta_max, omega),
        complex(beta, omega),
    ]
    h0 = min(0.25, 0.25 / m.tau) if m.tau > 0 else 0.25
    min_len = contour_tol * max(1.0, omega, abs(beta))

    winding = _winding_number(m, corners, h0, min_len)
    count = int(round(winding))
    if abs(winding - count) > 1e-6:
        raise ConvergenceError(f"winding number {winding!r} at beta={beta!r} is not an integer")
    return max(count, 0)


def _count_near(m: DelayMeasure, beta: float, tol: float) -> int | None:
    """root_count at beta, nudged by tol/4 when a root sits on the line. None when every try hits a root."""
    for shift in (0.0, tol / 4, -tol / 4):
        try:
            return root_count(m, beta + shift)
        except RootOnContourError:
            continue
    return None


def spectral_abscissa(m: DelayMeasure, tol: float = 1e-4, max_iter: int = 200) -> float:
    """
    alpha_0 = sup Re(lam) over characteristic roots, within +-tol,
    by bisection on beta using root_count.

    The left end of the bracket walks down from beta = -1 (-1, -2, -4, ...)
    so the contour stays as short as the system allows.
    """
    if tol <= 0:
        raise PreconditionError(f"tol must be positive, got {tol!r}")
    tv = total_variation(m)
    hi = tv + 1.0
    lo = -1.0

    while True:
        count = _count_near(m, lo, tol)
        if count is None:
            # a root within tol/4 of the line
            lo -= tol / 4
            break
        if count >= 1:
            break
        hi = lo
        lo = 2.0 * lo
        if m.tau > 0 and -lo * m.tau > 30.0:
            raise ConvergenceError(f"no characteristic root found with Re(lambda) > {lo!r}")
        if m.tau == 0 and lo < -2.0 * (tv + 1.0):
            raise ConvergenceError(f"no characteristic root found with Re(lambda) > {lo!r}")

    for _ in range(max_iter):
        if hi - lo <= tol:
            return 0.5 * (lo + hi)
        mid = 0.5 * (lo + hi)
        count = _count_near(m, mid, tol)
        if count is None:
            lo = max(lo, mid - tol / 4)
        elif count >= 1:
            lo = mid
        else:
            hi = mid
    raise ConvergenceError(f"bisection did not reach tol={tol!r} in {max_iter} iterations")


def decay_rate_root(a: float, b: float) -> float:
    """
    The mu in (|b|, a) with mu e^{-a+mu} = |b|, so that |r(t)| <= e^{(-a+mu)t}
    for x'(t) = -a x(t) + b x(t-1). Returns 0 for b = 0.
    """
    if abs(b) >= a:
        raise PreconditionError(f"need |b| < a, got a={a!r}, b={b!r}")
    if b == 0:
        return 0.0

    def residual(mu: float) -> float:
        return mu * math.exp(mu - a) - abs(b)

    mu = bisect(residual, abs(b), a, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(residual(mu)) > 1e-10:
        raise ConvergenceError(f"decay-rate root residual {residual(mu)!r} exceeds 1e-10")
    return float(mu)


# --- Exponential bound and certificate ---


def estimate_c_alpha(table: ResolventTable, alpha: float, safety: float = 1.01) -> Estimate:
    """
    C_alpha = safety * max(1, max_{t in [0,T]} ||r(t)||_F e^{alpha t}).
    Flagged low-confidence when T*alpha < 5.
    """
    n_hist = table.zero_index
    times = table.times[n_hist:]
    norms = np.linalg.norm(table.values[n_hist:], axis=(1, 2))
    value = safety * max(1.0, float(np.max(norms * np.exp(alpha * times))))

    low = table.horizon * alpha < 5.0
    if low:
        warnings.warn(
            f"C_alpha for alpha={alpha:g} estimated on T={table.horizon:g} (T*alpha < 5)",
            LowConfidenceWarning,
            stacklevel=2,
        )
    return Estimate(value, low)


def default_alpha_grid(alpha0: float, points: int = 32) -> list[float]:
    return [float(a) for a in np.geomspace(0.05 * -alpha0, 0.95 * -alpha0, points)]


def certify(
    m: DelayMeasure,
    lipschitz: float,
    alpha_grid: list[float] | None,
    table: ResolventTable,
    safety: float = 1.01,
    tol: float = 1e-4,
    alpha0: float | None = None,
) -> StabilityCertificate:
    """
    Picks the alpha minimizing L e^{alpha tau} C_alpha - alpha and reports
    whether that rate is negative.
    """
    if lipschitz < 0:
        raise PreconditionError(f"Lipschitz constant must be nonnegative, got {lipschitz!r}")
    if alpha0 is None:
        alpha0 = spectral_abscissa(m, tol)
    if alpha0 >= 0:
        raise UnstableSystemError(f"linear part unstable: spectral abscissa {alpha0:.6g} >= 0")
    if alpha_grid is None:
        alpha_grid = default_alpha_grid(alpha0)
    for alpha in alpha_grid:
        if not 0 < alpha < -alpha0:
            raise PreconditionError(f"alpha={alpha!r} must lie in (0, {-alpha0!r})")

    tau = m.tau
    diagnostics = [
        f"C_alpha estimated over [0, {table.horizon:g}] with safety factor {safety:g}; no tail certificate",
        "Lipschitz constant is a declared input, not derived",
    ]
    best = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LowConfidenceWarning)
        for alpha in alpha_grid:
            c_alpha = estimate_c_alpha(table, alpha, safety)
            rate = lipschitz * math.exp(alpha * tau) * c_alpha.value - alpha
            if best is None or rate < best[2]:
                best = (alpha, c_alpha, rate)
    alpha, c_alpha, rate = best
    if c_alpha.low_confidence:
        diagnostics.append(f"low confidence: horizon*alpha = {table.horizon * alpha:.3g} < 5")
    elif caught:
        diagnostics.append(f"{len(caught)} grid values of alpha had low-confidence C_alpha")

    tv = total_variation(m)
    k_const = math.exp(alpha * tau) * c_alpha.value + tau * math.exp(2 * alpha * tau) * c_alpha.value * tv
    return StabilityCertificate(
        alpha0_est=float(alpha0),
        alpha_star=float(alpha),
        c_alpha=c_alpha.value,
        lipschitz=float(lipschitz),
        k_const=k_const,
        rate=rate,
        certified=rate < 0,
        diagnostics=diagnostics,
    )


def contraction_bound(cert: StabilityCertificate, initial_distance: float, t: float) -> float:
    """K ||xi - eta|| e^{rate t}, valid for t >= tau."""
    return cert.k_const * initial_distance * math.exp(cert.rate * t)
