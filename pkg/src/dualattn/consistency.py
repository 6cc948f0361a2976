"""Consistent attention through a KL projection and its dual reparameterization.

The primal problem: find distributions ``mu_fine, mu_coarse`` closest in KL to
``tau_fine, tau_coarse`` such that each coarse cell carries exactly the mass of
its fine block. A multiplier ``lam`` per coarse cell reparameterizes both sides::

    mu_coarse_i ~ tau_coarse_i * exp(lam_i)
    mu_fine_j   ~ tau_fine_j   * exp(-lam_parent(j))

and whenever the two agree on marginals they are the primal optimum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffkit import Tensor, ops
from .diffkit.tensor import as_tensor
from .errors import ConvergenceFailure, InfeasibleSupport, RejectedInput
from .grid import NeighborhoodMap, ProbabilityMap, kl_arrays, segment_sum

SMOOTHING_FLOOR = 1e-12
ORACLE_MAX_ITER = 100_000
WITNESS_ORIGINS = ("closed_form", "fixed_point", "learned_shallow")


@dataclass(frozen=True, eq=False)
class DualWitness:
    lam: np.ndarray
    origin: str = "closed_form"

    def __post_init__(self):
        lam = np.array(self.lam, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(lam)):
            raise RejectedInput("witness has non-finite entries")
        if self.origin not in WITNESS_ORIGINS:
            raise RejectedInput(f"unknown witness origin {self.origin!r}")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    def canonical(self) -> "DualWitness":
        """Same witness shifted to mean zero (the multiplier is defined up to a constant)."""
        return DualWitness(self.lam - self.lam.mean(), self.origin)


@dataclass(frozen=True)
class ConsistentPair:
    mu_fine: ProbabilityMap
    mu_coarse: ProbabilityMap
    objective: float
    residual: float
    iterations: int = 0


def _check_shapes(tau_fine: ProbabilityMap, tau_coarse: ProbabilityMap, nmap: NeighborhoodMap):
    if tau_fine.size != nmap.n_fine or tau_coarse.size != nmap.n_coarse:
        raise RejectedInput(
            f"maps with {tau_fine.size} fine / {tau_coarse.size} coarse cells do not match "
            f"a neighborhood of {nmap.n_fine} / {nmap.n_coarse}"
        )


def _check_witness(w: DualWitness, n_coarse: int):
    if w.lam.size != n_coarse:
        raise RejectedInput(f"witness has {w.lam.size} entries, expected {n_coarse}")


def _normalize_log(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _log_positive(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def primal_objective(mu_fine, mu_coarse, tau_fine, tau_coarse) -> float:
    """``KL(mu_fine || tau_fine) + KL(mu_coarse || tau_coarse)`` on flat arrays."""
    return kl_arrays(mu_fine, tau_fine) + kl_arrays(mu_coarse, tau_coarse)


def project_consistent_oracle(
    tau_fine: ProbabilityMap,
    tau_coarse: ProbabilityMap,
    nmap: NeighborhoodMap,
    tol: float = 1e-10,
    max_iter: int = ORACLE_MAX_ITER,
) -> ConsistentPair:
    """Solve the projection directly in the primal, without any multiplier.

    The coarse variable is eliminated through the constraint, leaving
    ``F(mu) = KL(mu || tau_fine) + KL(A mu || tau_coarse)`` over the fine simplex.
    ``F`` is 2-smooth and 1-strongly convex relative to negative entropy, so
    exponentiated-gradient steps converge linearly. Each step first tries a unit
    step and falls back to 1/2 (always a descent step) if the relative-smoothness
    bound fails. Stops once the Frank-Wolfe gap ``<grad, mu> - min grad`` (an upper
    bound on ``F - F*``) is at most ``tol``.
    """
    _check_shapes(tau_fine, tau_coarse, nmap)
    tk, tl = tau_fine.flat, tau_coarse.flat
    if np.any(tk <= 0) or np.any(tl <= 0):
        raise RejectedInput("oracle needs strictly positive inputs; smooth them first")
    log_tk, log_tl = np.log(tk), np.log(tl)
    parent = nmap.parent

    def objective(mu, m):
        return float(np.sum(mu * (np.log(mu) - log_tk)) + np.sum(m * (np.log(m) - log_tl)))

    def gradient(mu, m):
        return (np.log(mu) - log_tk) + (np.log(m) - log_tl)[parent]

    # uniform start: from tau_fine a half step lands on the closed-form witness
    # solution immediately, which would make this check circular
    mu = np.full(tk.size, 1.0 / tk.size)
    m = segment_sum(mu, nmap)
    f = objective(mu, m)
    gap = np.inf
    for it in range(max_iter + 1):
        g = gradient(mu, m)
        gap = float(mu @ g - g.min())
        if gap <= tol:
            break
        if it == max_iter:
            break
        log_mu = np.log(mu)
        for eta in (1.0, 0.5):
            cand = _normalize_log(log_mu - eta * g)
            cand = np.maximum(cand, np.finfo(float).tiny)
            cm = segment_sum(cand, nmap)
            fc = objective(cand, cm)
            bound = f + g @ (cand - mu) + kl_arrays(cand, mu) / eta
            # the long step must pass the smoothness bound and strictly descend; near
            # round-off level it can cycle, so 1/2 (provably descending) takes over
            if (fc <= bound and fc < f) or eta == 0.5:
                break
        mu, m, f = cand, cm, fc
    if gap > tol:
        raise ConvergenceFailure(f"oracle did not reach gap {tol:g} in {max_iter} iterations (gap {gap:.3e})", gap)
    mu_fine = ProbabilityMap(mu.reshape(tau_fine.values.shape))
    mu_coarse = ProbabilityMap(m.reshape(tau_coarse.values.shape))
    return ConsistentPair(mu_fine, mu_coarse, primal_objective(mu, m, tk, tl), 0.0, it)


def reparam_coarse(tau_coarse: ProbabilityMap, w: DualWitness) -> ProbabilityMap:
    _check_witness(w, tau_coarse.size)
    out = _normalize_log(_log_positive(tau_coarse.flat) + w.lam)
    return ProbabilityMap(out.reshape(tau_coarse.values.shape))


def reparam_fine(tau_fine: ProbabilityMap, w: DualWitness, nmap: NeighborhoodMap) -> ProbabilityMap:
    if tau_fine.size != nmap.n_fine:
        raise RejectedInput(f"fine map has {tau_fine.size} cells, neighborhood expects {nmap.n_fine}")
    _check_witness(w, nmap.n_coarse)
    out = _normalize_log(_log_positive(tau_fine.flat) - w.lam[nmap.parent])
    return ProbabilityMap(out.reshape(tau_fine.values.shape))


def marginal_residual(tau_fine, tau_coarse, w: DualWitness, nmap: NeighborhoodMap) -> np.ndarray:
    """Marginal of the reparameterized fine map minus the reparameterized coarse map."""
    _check_shapes(tau_fine, tau_coarse, nmap)
    fine = reparam_fine(tau_fine, w, nmap)
    coarse = reparam_coarse(tau_coarse, w)
    return segment_sum(fine.flat, nmap) - coarse.flat


def solve_witness(tau_fine: ProbabilityMap, tau_coarse: ProbabilityMap, nmap: NeighborhoodMap) -> DualWitness:
    """Closed-form multiplier ``lam_i = 1/2 log(T_i / tau_coarse_i)`` with ``T = marginal(tau_fine)``.

    Both reparameterized sides then equal the normalized geometric mean
    ``sqrt(tau_coarse_i * T_i)``, so the marginal condition holds exactly. A coarse
    cell with no mass on either side gets ``lam_i = 0`` (it drops out of both sides).
    """
    _check_shapes(tau_fine, tau_coarse, nmap)
    t = segment_sum(tau_fine.flat, nmap)
    tl = tau_coarse.flat
    if np.any((tl == 0) & (t > 0)):
        raise InfeasibleSupport("coarse attention is zero on a cell whose fine block carries mass")
    lam = np.zeros_like(tl)
    both = (tl > 0) & (t > 0)
    lam[both] = 0.5 * (np.log(t[both]) - np.log(tl[both]))
    return DualWitness(lam, "closed_form")


def _smooth(p: np.ndarray, floor: float = SMOOTHING_FLOOR) -> np.ndarray:
    p = np.maximum(p, floor)
    return p / p.sum()


def consistency_penalty(tau_fine, tau_coarse, w: DualWitness, nmap: NeighborhoodMap) -> float:
    """``KL(reparam_coarse || marginal(reparam_fine))`` on floored, renormalized maps."""
    _check_shapes(tau_fine, tau_coarse, nmap)
    coarse = reparam_coarse(tau_coarse.smoothed(SMOOTHING_FLOOR), w).flat
    fine = reparam_fine(tau_fine.smoothed(SMOOTHING_FLOOR), w, nmap).flat
    return kl_arrays(_smooth(coarse), _smooth(segment_sum(fine, nmap)))


# batched, differentiable forms used in training -------------------------------------

def smooth_t(p, floor: float = SMOOTHING_FLOOR) -> Tensor:
    return ops.normalize(ops.clip_min(p, floor), axis=-1)


def reparam_coarse_t(tau_coarse, lam) -> Tensor:
    """(N, Pc) attention and (N, Pc) multipliers -> reparameterized coarse maps."""
    return ops.softmax(ops.add(ops.log(ops.clip_min(tau_coarse, SMOOTHING_FLOOR)), lam), axis=-1)


def reparam_fine_t(tau_fine, lam, assignment: np.ndarray) -> Tensor:
    """``assignment`` is the (Pf, Pc) 0/1 matrix from :meth:`NeighborhoodMap.assignment_matrix`."""
    spread = ops.matmul(as_tensor(lam), Tensor(assignment.T))
    return ops.softmax(ops.sub(ops.log(ops.clip_min(tau_fine, SMOOTHING_FLOOR)), spread), axis=-1)


def penalty_t(tau_fine, tau_coarse, lam, assignment: np.ndarray) -> Tensor:
    """Per-sample penalty, shape (N,)."""
    coarse = reparam_coarse_t(tau_coarse, lam)
    marg = ops.matmul(reparam_fine_t(tau_fine, lam, assignment), Tensor(assignment))
    return ops.kl_of_distributions(smooth_t(coarse), smooth_t(marg))


def direct_kl_t(first, second) -> Tensor:
    """Per-sample ``KL(first || second)`` after smoothing; the multiplier-free penalty."""
    return ops.kl_of_distributions(smooth_t(first), smooth_t(second))
