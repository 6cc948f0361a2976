"""Spatial grids, probability maps, coarse/fine neighborhoods and KL divergence.

All flat indexing is row-major and 0-based in code (cell ``i`` of an ``n x n``
grid sits at ``(i // n, i % n)``).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RejectedInput

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class SpatialGrid:
    side: int

    def __post_init__(self):
        if int(self.side) != self.side or self.side < 1:
            raise RejectedInput(f"grid side must be a positive integer, got {self.side!r}")

    @property
    def size(self) -> int:
        return self.side * self.side

    def flat(self, row: int, col: int) -> int:
        if not (0 <= row < self.side and 0 <= col < self.side):
            raise RejectedInput(f"cell ({row}, {col}) outside {self.side}x{self.side} grid")
        return row * self.side + col

    def rowcol(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.size:
            raise RejectedInput(f"cell {index} outside grid of {self.size} cells")
        return divmod(index, self.side)


class InfiniteDivergence(float):
    """``+inf`` returned when the first argument has mass outside the second's support.

    Being a float subclass it compares and prints like ``inf``, but it can be told
    apart from an overflowed sum with ``isinstance``.
    """

    def __new__(cls):
        return super().__new__(cls, math.inf)

    def __repr__(self):
        return "InfiniteDivergence()"


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Nonnegative weights over the cells of a grid, summing to one.

    ``values`` may be 1-D (a flat run of cells) or a square 2-D array. Sums that
    deviate from one by less than ``NORMALIZATION_TOL`` are renormalized.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 2 and v.shape[0] != v.shape[1]:
            raise RejectedInput(f"probability map must be square, got shape {v.shape}")
        if v.ndim not in (1, 2) or v.size == 0:
            raise RejectedInput(f"probability map must be a non-empty 1-D or 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise RejectedInput("probability map has non-finite entries")
        if np.any(v < 0):
            raise RejectedInput("probability map has negative entries")
        total = v.sum()
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise RejectedInput(f"probability map sums to {total!r}, not 1")
        v = v / total
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_weights(cls, weights) -> "ProbabilityMap":
        """Normalize arbitrary nonnegative weights into a map."""
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if not total > 0:
            raise RejectedInput("weights have no positive mass")
        return cls(w / total)

    @classmethod
    def uniform(cls, side: int) -> "ProbabilityMap":
        return cls(np.full((side, side), 1.0 / (side * side)))

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def grid(self) -> SpatialGrid | None:
        return SpatialGrid(self.values.shape[0]) if self.values.ndim == 2 else None

    def smoothed(self, floor: float = 1e-12) -> "ProbabilityMap":
        v = np.maximum(self.flat, floor)
        return ProbabilityMap((v / v.sum()).reshape(self.values.shape))

    def __eq__(self, other):
        if not isinstance(other, ProbabilityMap):
            return NotImplemented
        return self.values.shape == other.values.shape and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.values.shape, self.values.tobytes()))


@dataclass(frozen=True, eq=False)
class NeighborhoodMap:
    """Partition of fine cells into groups, one group per coarse cell.

    ``parent[j]`` is the coarse cell owning fine cell ``j``.
    """

    parent: np.ndarray
    n_coarse: int
    fine_side: int | None = None
    coarse_side: int | None = None
    _groups: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64).reshape(-1)
        if parent.size == 0 or parent.min() < 0 or parent.max() >= self.n_coarse:
            raise RejectedInput("parent indices must lie in [0, n_coarse)")
        counts = np.bincount(parent, minlength=self.n_coarse)
        if np.any(counts == 0):
            raise RejectedInput("every coarse cell needs at least one fine cell")
        parent.setflags(write=False)
        object.__setattr__(self, "parent", parent)
        groups = tuple(tuple(int(j) for j in np.flatnonzero(parent == i)) for i in range(self.n_coarse))
        object.__setattr__(self, "_groups", groups)

    @classmethod
    def from_groups(cls, groups) -> "NeighborhoodMap":
        """Build from explicit groups; they must partition ``range(n_fine)``."""
        flat = [j for g in groups for j in g]
        n_fine = len(flat)
        if sorted(flat) != list(range(n_fine)):
            raise RejectedInput("groups must be disjoint and cover every fine cell")
        parent = np.empty(n_fine, dtype=np.int64)
        for i, g in enumerate(groups):
            parent[list(g)] = i
        return cls(parent, len(groups))

    @property
    def n_fine(self) -> int:
        return self.parent.size

    @property
    def groups(self) -> tuple:
        return self._groups

    def assignment_matrix(self) -> np.ndarray:
        """``A[j, i] = 1`` iff fine cell ``j`` belongs to coarse cell ``i``."""
        a = np.zeros((self.n_fine, self.n_coarse))
        a[np.arange(self.n_fine), self.parent] = 1.0
        return a


def build_neighborhood(fine_side: int, coarse_side: int) -> NeighborhoodMap:
    """Block partition of a ``fine_side``-grid under a ``coarse_side``-grid."""
    fine, coarse = SpatialGrid(fine_side), SpatialGrid(coarse_side)
    if fine.side % coarse.side:
        raise RejectedInput(f"coarse side {coarse.side} does not divide fine side {fine.side}")
    r = fine.side // coarse.side
    rows, cols = np.divmod(np.arange(fine.size), fine.side)
    parent = (rows // r) * coarse.side + cols // r
    return NeighborhoodMap(parent, coarse.size, fine.side, coarse.side)


def build_neighborhood_1d(n_fine: int, n_coarse: int) -> NeighborhoodMap:
    """Contiguous equal-size groups over a flat run of cells."""
    if n_fine < 1 or n_coarse < 1 or n_fine % n_coarse:
        raise RejectedInput(f"{n_coarse} coarse cells do not evenly split {n_fine} fine cells")
    return NeighborhoodMap(np.arange(n_fine) // (n_fine // n_coarse), n_coarse)


def segment_sum(values: np.ndarray, nmap: NeighborhoodMap) -> np.ndarray:
    """Sum the trailing fine axis into coarse cells; works on batches and unnormalized input."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != nmap.n_fine:
        raise RejectedInput(f"expected {nmap.n_fine} fine cells, got {values.shape[-1]}")
    if values.ndim == 1:
        return np.bincount(nmap.parent, weights=values, minlength=nmap.n_coarse)
    return values @ nmap.assignment_matrix()


def _shape_for(n: int, side: int | None):
    return (side, side) if side is not None else (n,)


def marginalize(p: ProbabilityMap, nmap: NeighborhoodMap) -> ProbabilityMap:
    if p.size != nmap.n_fine or (nmap.fine_side is not None and p.values.shape != (nmap.fine_side,) * 2):
        raise RejectedInput("probability map does not live on the neighborhood's fine grid")
    out = segment_sum(p.flat, nmap)
    return ProbabilityMap(out.reshape(_shape_for(nmap.n_coarse, nmap.coarse_side)))


def kl_divergence(p: ProbabilityMap, q: ProbabilityMap) -> float:
    """``sum_i p_i log(p_i / q_i)`` with ``0 log 0 = 0``.

    Returns :class:`InfiniteDivergence` if ``q_i = 0`` for some ``p_i > 0``.
    """
    if p.values.shape != q.values.shape:
        raise RejectedInput(f"grid mismatch: {p.values.shape} vs {q.values.shape}")
    return kl_arrays(p.flat, q.flat)


def kl_arrays(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    support = p > 0
    if np.any(q[support] <= 0):
        return InfiniteDivergence()
    ps, qs = p[support], q[support]
    return max(float(np.sum(ps * (np.log(ps) - np.log(qs)))), 0.0)


def write_map_csv(values, path) -> None:
    """Write a 1-D or 2-D array as CSV, one grid row per line, 17 significant digits."""
    arr = np.asarray(values.values if isinstance(values, ProbabilityMap) else values, dtype=np.float64)
    rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow([f"{x:.17g}" for x in row])


def read_array_csv(path) -> np.ndarray:
    """Read a CSV of numbers. A single row comes back 1-D."""
    try:
        with open(path, newline="") as fh:
            rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    except ValueError as exc:
        raise RejectedInput(f"{Path(path)}: non-numeric entry ({exc})") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise RejectedInput(f"{Path(path)}: empty or ragged CSV")
    arr = np.array(rows)
    return arr[0] if arr.shape[0] == 1 else arr


def read_map_csv(path) -> ProbabilityMap:
    return ProbabilityMap(read_array_csv(path))
