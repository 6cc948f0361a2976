"""Attention gates: potentials, softmax, attended embeddings, cascaded units.

The ``*_t`` functions work on batched diffkit tensors and are what the network
uses; the plain functions wrap them for single feature maps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffkit import Tensor, ops
from .diffkit.tensor import as_tensor
from .errors import RejectedInput
from .grid import ProbabilityMap, SpatialGrid

NORM_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """``vectors[r, c]`` is the d-vector of cell ``(r, c)``."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != v.shape[1] or v.shape[2] < 1:
            raise RejectedInput(f"feature map must have shape (n, n, d), got {v.shape}")
        object.__setattr__(self, "vectors", v)

    @property
    def grid(self) -> SpatialGrid:
        return SpatialGrid(self.vectors.shape[0])

    @property
    def channels(self) -> int:
        return self.vectors.shape[2]

    @property
    def cells(self) -> np.ndarray:
        """(n*n, d) row-major view."""
        return self.vectors.reshape(-1, self.channels)


@dataclass(frozen=True, eq=False)
class AttentionGate:
    """``transform`` is the d x d map applied to each cell; ``keys`` holds one d-vector per cell."""

    transform: np.ndarray
    keys: np.ndarray
    epsilon: float = NORM_EPS

    def __post_init__(self):
        u = np.asarray(self.transform, dtype=np.float64)
        k = np.asarray(self.keys, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise RejectedInput(f"transform must be square, got {u.shape}")
        if k.ndim != 2 or k.shape[1] != u.shape[0]:
            raise RejectedInput(f"keys must be (cells, {u.shape[0]}), got {k.shape}")
        if not self.epsilon > 0:
            raise RejectedInput("epsilon must be positive")
        object.__setattr__(self, "transform", u)
        object.__setattr__(self, "keys", k)

    @property
    def channels(self) -> int:
        return self.transform.shape[0]

    @property
    def cells(self) -> int:
        return self.keys.shape[0]

    @classmethod
    def zero_keyed(cls, cells: int, channels: int) -> "AttentionGate":
        return cls(np.eye(channels), np.zeros((cells, channels)))

    def check(self, fm: FeatureMap):
        if fm.channels != self.channels or fm.grid.size != self.cells:
            raise RejectedInput(
                f"gate expects {self.cells} cells x {self.channels} channels, "
                f"feature map has {fm.grid.size} x {fm.channels}"
            )


# batched tensor versions -------------------------------------------------------

def potential_t(transform, keys, cells, epsilon: float = NORM_EPS) -> Tensor:
    """``<u_i, relu(U v_i / max(|U v_i|, eps))>`` for ``cells`` of shape (N, P, d) -> (N, P)."""
    cells = as_tensor(cells)
    n, p, d = cells.shape
    keys = as_tensor(keys)
    if keys.shape != (p, d) or as_tensor(transform).shape != (d, d):
        raise RejectedInput(f"gate parameters do not match cells of shape {cells.shape}")
    flat = ops.reshape(cells, (n * p, d))
    mapped = ops.matmul(flat, ops.transpose(transform, (1, 0)))
    unit = ops.relu(ops.l2_normalize(mapped, epsilon))
    unit = ops.reshape(unit, (n, p, d))
    return ops.sum(ops.pointwise_mul(unit, ops.broadcast_to(keys, (n, p, d))), axis=-1)


def attend_t(tau, cells) -> Tensor:
    """Scale each cell vector by its attention weight: (N, P) x (N, P, d) -> (N, P, d)."""
    tau, cells = as_tensor(tau), as_tensor(cells)
    n, p, d = cells.shape
    if tau.shape != (n, p):
        raise RejectedInput(f"attention {tau.shape} does not match cells {cells.shape}")
    # (N, P) -> (d, N, P) -> (N, P, d) keeps to explicit leading-axis broadcast
    spread = ops.transpose(ops.broadcast_to(tau, (d, n, p)), (1, 2, 0))
    return ops.pointwise_mul(cells, spread)


def cascade_t(gate_a, gate_b, cells, epsilon: float = NORM_EPS):
    """Two gates in sequence. ``gate_*`` are ``(transform, keys)`` pairs.

    Returns ``(tau_b, attended)`` where ``attended = tau_b * tau_a * v``.
    """
    tau_a = ops.softmax(potential_t(*gate_a, cells, epsilon), axis=-1)
    first = attend_t(tau_a, cells)
    tau_b = ops.softmax(potential_t(*gate_b, first, epsilon), axis=-1)
    return tau_b, attend_t(tau_b, first)


# single-map API -------------------------------------------------------------------

def potential(gate: AttentionGate, fm: FeatureMap) -> np.ndarray:
    gate.check(fm)
    phi = potential_t(gate.transform, gate.keys, fm.cells[None], gate.epsilon)
    return phi.data[0].reshape(fm.grid.side, fm.grid.side)


def attention_softmax(potentials) -> ProbabilityMap:
    phi = np.asarray(potentials, dtype=np.float64)
    if not np.all(np.isfinite(phi)):
        raise RejectedInput("potentials must be finite")
    tau = ops.softmax(phi.reshape(1, -1), axis=-1).data[0]
    return ProbabilityMap(tau.reshape(phi.shape))


def attend(tau: ProbabilityMap, fm: FeatureMap) -> FeatureMap:
    if tau.values.shape != (fm.grid.side, fm.grid.side):
        raise RejectedInput(f"attention map {tau.values.shape} does not match feature grid {fm.grid.side}")
    out = attend_t(tau.flat[None], fm.cells[None]).data[0]
    return FeatureMap(out.reshape(fm.vectors.shape))


def cascade(gate_a: AttentionGate, gate_b: AttentionGate, fm: FeatureMap) -> tuple[ProbabilityMap, FeatureMap]:
    gate_a.check(fm)
    gate_b.check(fm)
    tau_a = attention_softmax(potential(gate_a, fm))
    first = attend(tau_a, fm)
    tau_b = attention_softmax(potential(gate_b, first))
    return tau_b, attend(tau_b, first)
