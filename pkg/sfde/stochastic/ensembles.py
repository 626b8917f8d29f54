"""
Monte Carlo ensembles over independent noise paths.

Replicas are grouped in fixed batches of consecutive indices and the batches
are spread over worker threads. Every replica depends only on
(master_seed, replica index) and results are stored by batch index, so the
statistics do not depend on the number of workers or on scheduling.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import sem

try:
    from ..errors import CertificationError, PreconditionError, RangeError, StatisticsError
    from ..measure.algorithms import Segment, SystemSpec, default_step, grid_index
    from ..spectral.algorithms import StabilityCertificate
    from .algorithms import MomentBounds, default_truncation, em_batch, moment_bounds
    from .paths import WienerPath, derive_seed, sample_path
except ImportError:
    from sfde.errors import CertificationError, PreconditionError, RangeError, StatisticsError
    from sfde.measure.algorithms import Segment, SystemSpec, default_step, grid_index
    from sfde.spectral.algorithms import StabilityCertificate
    from sfde.stochastic.algorithms import MomentBounds, default_truncation, em_batch, moment_bounds
    from sfde.stochastic.paths import WienerPath, derive_seed, sample_path

DEFAULT_BATCH = 500


@dataclass
class MomentStatistics:
    mean: np.ndarray
    var: float
    sup_mean: float
    sup_sq_mean: float
    se: dict
    bounds: MomentBounds
    replicas: int
    master_seed: int
    truncation: float
    h: float

    def to_json_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "var": self.var,
            "sup_mean": self.sup_mean,
            "sup_sq_mean": self.sup_sq_mean,
            "se": self.se,
            "bounds": self.bounds._asdict(),
            "replicas": self.replicas,
            "master_seed": self.master_seed,
            "truncation": self.truncation,
            "h": self.h,
        }


@dataclass
class PullbackStatistics:
    times: list[float]
    mean_square: np.ndarray
    mean_square_se: np.ndarray
    mean_abs: np.ndarray
    mean_abs_se: np.ndarray
    replicas: int
    master_seed: int
    truncation: float
    diagnostics: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "mean_square": [float(v) for v in self.mean_square],
            "mean_square_se": [float(v) for v in self.mean_square_se],
            "mean_abs": [float(v) for v in self.mean_abs],
            "mean_abs_se": [float(v) for v in self.mean_abs_se],
            "replicas": self.replicas,
            "master_seed": self.master_seed,
            "truncation": self.truncation,
            "diagnostics": list(self.diagnostics),
        }


# --- Thread fan-out ---


def run_batches(
    replicas: int, batch_size: int, workers: int, work: Callable[[range], np.ndarray]
) -> np.ndarray:
    """
    Calls work(range of replica indices) for consecutive batches on `workers`
    background threads and concatenates the results in replica order.
    """
    batches = [range(start, min(start + batch_size, replicas)) for start in range(0, replicas, batch_size)]
    results: list[np.ndarray | None] = [None] * len(batches)
    failures: list[tuple[int, Exception]] = []
    lock = threading.Lock()

    def worker_thread(worker: int):
        """Runs every batch whose index is congruent to `worker`."""
        for index in range(worker, len(batches), workers):
            try:
                results[index] = work(batches[index])
            except Exception as e:  # re-raised on the calling thread
                with lock:
                    failures.append((index, e))
                return

    threads = [threading.Thread(target=worker_thread, args=(w,), daemon=True) for w in range(min(workers, len(batches)))]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    if failures:
        raise min(failures, key=lambda item: item[0])[1]
    return np.concatenate(results, axis=-1)


def _check_ensemble(replicas: int, workers: int, batch_size: int) -> None:
    if replicas < 2:
        raise StatisticsError(f"need at least 2 replicas for a standard error, got {replicas}")
    if workers < 1 or batch_size < 1:
        raise PreconditionError("workers and batch_size must be positive")


def _pullback_batch(sys: SystemSpec, history: np.ndarray, paths: list[WienerPath], h: float, t: float) -> np.ndarray:
    """
    Pullback over t from `history` (shape (N+1, n)) on every path.
    Returns the segments at time 0, shape (N+1, n, R).
    """
    steps = grid_index(t, h, "pullback time")
    n_hist = history.shape[0] - 1
    if steps == 0:
        return np.repeat(history[:, :, None], len(paths), axis=2)
    increments = np.stack([path.increments_from(-t, steps) for path in paths], axis=-1)
    start = np.repeat(history[:, :, None], len(paths), axis=2)
    buffer = em_batch(sys, start, increments, h, -t)
    return buffer[buffer.shape[0] - n_hist - 1 :]


def _batch_paths(sys: SystemSpec, batch: range, master_seed: int, h: float, span: float) -> list[WienerPath]:
    return [sample_path(derive_seed(master_seed, r), h, -span, 0.0, sys.noise_dim) for r in batch]


# --- Ensembles ---


def mc_moments(
    sys: SystemSpec,
    cert: StabilityCertificate,
    replicas: int,
    master_seed: int = 0,
    T_trunc: float | None = None,
    h: float | None = None,
    workers: int = 4,
    batch_size: int = DEFAULT_BATCH,
) -> MomentStatistics:
    """
    Estimates E[U(0)], E|U(0)|^2, E||U|| and E||U||^2 over `replicas`
    independent paths, with standard errors and the matching moment bounds.
    """
    _check_ensemble(replicas, workers, batch_size)
    m = sys.measure
    if not sys.is_affine and not cert.certified:
        raise CertificationError(f"nonlinear system is not certified (rate {cert.rate:.6g} >= 0)")
    h = default_step(m.tau) if h is None else h
    T_trunc = default_truncation(sys, cert, h) if T_trunc is None else T_trunc
    zero = np.zeros((grid_index(m.tau, h, "delay horizon") + 1, m.dim))

    def work(batch: range) -> np.ndarray:
        paths = _batch_paths(sys, batch, master_seed, h, T_trunc)
        return _pullback_batch(sys, zero, paths, h, T_trunc)

    segments = run_batches(replicas, batch_size, workers, work)  # (N+1, n, R)
    at_zero = segments[-1]  # (n, R)
    squares = np.sum(at_zero**2, axis=0)
    sups = np.max(np.linalg.norm(segments, axis=1), axis=0)

    se = {
        "mean": [float(v) for v in sem(at_zero, axis=1)],
        "var": float(sem(squares)),
        "sup_mean": float(sem(sups)),
        "sup_sq_mean": float(sem(sups**2)),
    }
    return MomentStatistics(
        mean=np.mean(at_zero, axis=1),
        var=float(np.mean(squares)),
        sup_mean=float(np.mean(sups)),
        sup_sq_mean=float(np.mean(sups**2)),
        se=se,
        bounds=moment_bounds(m, sys.sigma, cert.alpha_star, cert.c_alpha),
        replicas=int(replicas),
        master_seed=int(master_seed),
        truncation=float(T_trunc),
        h=float(h),
    )


def pullback_mean_square(
    sys: SystemSpec,
    cert: StabilityCertificate,
    xi: Segment,
    times: list[float],
    replicas: int,
    master_seed: int = 0,
    T_trunc: float | None = None,
    workers: int = 4,
    batch_size: int = DEFAULT_BATCH,
) -> PullbackStatistics:
    """
    Ensemble means of ||pullback(t, xi) - U||^2 (mean-square convergence) and
    ||pullback(t, xi) - U|| (mean convergence) for each t, where U is the
    pullback of the zero segment over T_trunc on the same path.
    """
    _check_ensemble(replicas, workers, batch_size)
    h = xi.h
    if not times:
        raise PreconditionError("need at least one pullback time")
    if any(t < 0 for t in times):
        raise RangeError("pullback times must be nonnegative")
    if T_trunc is None:
        T_trunc = max(default_truncation(sys, cert, h), max(times))
    if max(times) > T_trunc:
        raise RangeError(f"pullback time {max(times)!r} exceeds T_trunc={T_trunc!r}")
    zero = np.zeros_like(xi.values)
    diagnostics = []
    if not sys.is_affine and not cert.certified:
        diagnostics.append("nonlinear system is not certified; the limit segment may not exist")

    def work(batch: range) -> np.ndarray:
        paths = _batch_paths(sys, batch, master_seed, h, T_trunc)
        limit = _pullback_batch(sys, zero, paths, h, T_trunc)
        out = np.empty((2, len(times), len(paths)))
        for k, t in enumerate(times):
            segment = _pullback_batch(sys, xi.values, paths, h, t)
            distance = np.max(np.linalg.norm(segment - limit, axis=1), axis=0)
            out[0, k] = distance**2
            out[1, k] = distance
        return out

    samples = run_batches(replicas, batch_size, workers, work)  # (2, len(times), R)
    return PullbackStatistics(
        times=[float(t) for t in times],
        mean_square=np.mean(samples[0], axis=1),
        mean_square_se=sem(samples[0], axis=1),
        mean_abs=np.mean(samples[1], axis=1),
        mean_abs_se=sem(samples[1], axis=1),
        replicas=int(replicas),
        master_seed=int(master_seed),
        truncation=float(T_trunc),
        diagnostics=diagnostics,
    )

