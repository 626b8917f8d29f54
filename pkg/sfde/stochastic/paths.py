"""
Two-sided Wiener paths on a grid, generated from a counter-based generator.

The Gaussian increment over [t_j, t_j + h] depends only on (seed, j,
component): numpy's Philox is keyed on the seed, counter word 0 holds the
node index (or -j-1 with word 2 set for negative nodes) and word 1 the
block of four components. Any sub-range therefore regenerates identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:
    from ..errors import PreconditionError, RangeError
    from ..measure.algorithms import GRID_TOL, grid_index
except ImportError:
    from sfde.errors import PreconditionError, RangeError
    from sfde.measure.algorithms import GRID_TOL, grid_index

_MASK64 = (1 << 64) - 1


def _uniforms(raw: np.ndarray) -> np.ndarray:
    # top 53 bits, centred so that 0 and 1 never occur
    return ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


def _box_muller(raw: np.ndarray) -> np.ndarray:
    """Four raw words per row -> four standard normals per row."""
    u = _uniforms(raw)
    radius_a = np.sqrt(-2.0 * np.log(u[:, 0]))
    radius_b = np.sqrt(-2.0 * np.log(u[:, 2]))
    angle_a = 2.0 * math.pi * u[:, 1]
    angle_b = 2.0 * math.pi * u[:, 3]
    return np.column_stack(
        [radius_a * np.cos(angle_a), radius_a * np.sin(angle_a), radius_b * np.cos(angle_b), radius_b * np.sin(angle_b)]
    )


def _block_normals(seed: int, first: int, count: int, block: int, negative: bool) -> np.ndarray:
    counter = np.array([first, block, 1 if negative else 0, 0], dtype=np.uint64)
    bit_generator = np.random.Philox(key=seed & _MASK64, counter=counter)
    return _box_muller(bit_generator.random_raw(4 * count).reshape(count, 4))


def gaussian_increments(seed: int, first_node: int, count: int, dim: int) -> np.ndarray:
    """
    Standard normals for nodes first_node, ..., first_node+count-1.
    Returns shape (count, dim).
    """
    blocks = (dim + 3) // 4
    out = np.empty((count, 4 * blocks))
    last_node = first_node + count  # exclusive

    neg_hi = min(last_node, 0)
    pos_lo = max(first_node, 0)
    for b in range(blocks):
        cols = slice(4 * b, 4 * b + 4)
        if first_node < neg_hi:
            # node j < 0 lives at counter -j-1, generated in ascending counter order
            n_neg = neg_hi - first_node
            normals = _block_normals(seed, -neg_hi, n_neg, b, negative=True)
            out[:n_neg, cols] = normals[::-1]
        if pos_lo < last_node:
            n_pos = last_node - pos_lo
            out[pos_lo - first_node :, cols] = _block_normals(seed, pos_lo, n_pos, b, negative=False)
    return out[:, :dim]


def derive_seed(master_seed: int, replica: int) -> int:
    """
    64-bit seed of replica `replica`: numpy's SeedSequence hash of
    (master_seed, spawn key = replica).
    """
    if master_seed < 0 or replica < 0:
        raise PreconditionError("master seed and replica index must be nonnegative")
    sequence = np.random.SeedSequence(entropy=master_seed, spawn_key=(replica,))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


# --- Domain Types ---


@dataclass(frozen=True, eq=False)
class WienerPath:
    """
    B on the base grid nodes base_first, ..., base_last (B(0) = 0 on the base
    path), viewed through a shift of `offset_nodes` nodes:
    value(s) = B(offset + s) - B(offset).
    """

    seed: int
    h: float
    dim: int
    base_first: int
    increments: np.ndarray
    cumulative: np.ndarray
    offset_nodes: int = 0

    @property
    def first_node(self) -> int:
        return self.base_first - self.offset_nodes

    @property
    def last_node(self) -> int:
        return self.base_first + self.increments.shape[0] - self.offset_nodes

    @property
    def t_min(self) -> float:
        return self.first_node * self.h

    @property
    def t_max(self) -> float:
        return self.last_node * self.h

    def _node(self, t: float) -> int:
        k = grid_index(t, self.h, "path time")
        if k < self.first_node or k > self.last_node:
            raise RangeError(f"t={t!r} lies outside the path range [{self.t_min!r}, {self.t_max!r}]")
        return k

    def value(self, t: float) -> np.ndarray:
        k = self._node(t)
        origin = self.offset_nodes - self.base_first
        return self.cumulative[origin + k] - self.cumulative[origin]

    def values(self) -> np.ndarray:
        """value(t) at every node of the range, shape (nodes, m)."""
        origin = self.offset_nodes - self.base_first
        return self.cumulative - self.cumulative[origin]

    def increments_from(self, t_start: float, steps: int) -> np.ndarray:
        """The increments over [t_start + j h, t_start + (j+1) h], j < steps."""
        k = self._node(t_start)
        if k + steps > self.last_node:
            raise RangeError(
                f"path range ends at {self.t_max!r}, needed {t_start + steps * self.h!r}"
            )
        start = k + self.offset_nodes - self.base_first
        return self.increments[start : start + steps]


def sample_path(seed: int, h: float, t_min: float, t_max: float, m: int) -> WienerPath:
    """Samples B on the grid nodes in [t_min, t_max], anchored at B(0) = 0."""
    if h <= 0:
        raise RangeError(f"path step must be positive, got {h!r}")
    if not t_min <= 0 <= t_max:
        raise RangeError(f"path range [{t_min!r}, {t_max!r}] must contain 0")
    first = int(math.ceil(t_min / h - GRID_TOL * max(1.0, abs(t_min / h))))
    last = int(math.floor(t_max / h + GRID_TOL * max(1.0, abs(t_max / h))))
    if last <= first:
        raise RangeError(f"path range [{t_min!r}, {t_max!r}] holds no step of size h={h!r}")
    if m < 1:
        raise RangeError(f"path dimension must be positive, got {m!r}")

    increments = math.sqrt(h) * gaussian_increments(seed, first, last - first, m)
    cumulative = np.zeros((last - first + 1, m))
    np.cumsum(increments, axis=0, out=cumulative[1:])
    cumulative = cumulative - cumulative[-first]
    increments.flags.writeable = False
    cumulative.flags.writeable = False
    return WienerPath(int(seed), float(h), int(m), first, increments, cumulative)


def shift(path: WienerPath, t: float) -> WienerPath:
    """theta_t: the view s -> B(t + s) - B(t). No resampling."""
    k = grid_index(t, path.h, "shift")
    return WienerPath(
        path.seed, path.h, path.dim, path.base_first, path.increments, path.cumulative, path.offset_nodes + k
    )
