"""Naive and hierarchical mean-field estimates of averages and correlations.

Naive mean-field iterates ``m <- tanh(beta * (W m + h))`` with damping until the
relative change ``sum|m_new - m_old| / sum|m_new + m_old|`` drops below the
tolerance. The hierarchical variant clamps each free node to -1 and +1 in turn,
re-solves, and combines the conditional means through
``<m_i m_k> = sum_v v * p(m_k = v) * E[m_i | m_k = v]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .sampler import ContractError, MomentEstimates, SparseIsingModel
from .topology import Topology


@dataclass(frozen=True)
class MftConfig:
    damping: float = 0.5
    tolerance: float = 1e-2
    max_iterations: int = 1000
    init_scale: float = 0.01

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ContractError(f"damping must be in (0, 1], got {self.damping}")
        if not self.tolerance > 0:
            raise ContractError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ContractError("max_iterations must be >= 1")
        if not self.init_scale > 0:
            raise ContractError("init_scale must be > 0")


@dataclass
class MftSolution:
    """Converged (or last) naive mean-field iterate.

    ``marginal_means`` equals ``tanh(beta * fields)`` on free coordinates and the
    clamp value on clamped ones. ``residual`` is the last iteration's change,
    the smaller of its relative and absolute forms; ``converged`` holds exactly
    when it is within the tolerance.
    """

    marginal_means: np.ndarray
    fields: np.ndarray
    converged: bool
    iterations: int
    residual: float


def clamp_vector(n: int, clamps) -> np.ndarray:
    """Normalize clamps to a length-``n`` float array: 0 free, ±1 clamped.

    Accepts ``None``, a ``{node: value}`` mapping, or an array of 0/±1.
    """
    out = np.zeros(n)
    if clamps is None:
        return out
    if isinstance(clamps, dict):
        for i, v in clamps.items():
            out[int(i)] = v
    else:
        out[:] = np.asarray(clamps, dtype=np.float64)
    if not np.all(np.isin(out, (-1.0, 0.0, 1.0))):
        raise ContractError("clamp values must be -1 or +1")
    return out


def _initial_means(n: int, clamp: np.ndarray, config: MftConfig, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m = config.init_scale * rng.uniform(-1.0, 1.0, n)
    fixed = clamp != 0
    m[fixed] = clamp[fixed]
    return m


def nmft_solve(model: SparseIsingModel, clamps=None, config: MftConfig = MftConfig(),
               seed=0, initial: np.ndarray | None = None) -> MftSolution:
    """Damped naive mean-field fixed point with optional clamped nodes."""
    t = model.topology
    n = t.node_count
    clamp = clamp_vector(n, clamps)
    m_old = _initial_means(n, clamp, config, seed) if initial is None else np.array(initial, dtype=float)
    m_old[clamp != 0] = clamp[clamp != 0]
    free = np.flatnonzero(clamp == 0).astype(np.int64)
    indptr, nbr, eid = t.csr
    m_new = m_old.copy()
    fields = np.zeros(n)
    converged, iters, res = _kernels.nmft_iterate(
        indptr, nbr, eid, model.weights, model.biases, model.beta, free, -1, m_old,
        config.damping, config.tolerance, config.max_iterations, m_new, fields,
    )
    fixed = clamp != 0
    if fixed.any():
        fields[fixed] = model.fields(m_new)[fixed]
    return MftSolution(m_new, fields, bool(converged), int(iters), float(res))


def nmft_correlations(solution: MftSolution, topology: Topology) -> MomentEstimates:
    """Independence approximation ``<m_i m_j> = <m_i><m_j>`` on every edge."""
    m = solution.marginal_means
    e = topology.edges
    return MomentEstimates(
        m.copy(), m[e[:, 0]] * m[e[:, 1]], 0,
        {"converged": solution.converged, "iterations": solution.iterations},
    )


def nmft_moments(model: SparseIsingModel, clamps=None, config: MftConfig = MftConfig(),
                 seed=0) -> MomentEstimates:
    return nmft_correlations(nmft_solve(model, clamps, config, seed), model.topology)


def fixed_point_bound(model: SparseIsingModel, clamps, config: MftConfig) -> float:
    """Upper bound on ``max_i |m_i - tanh(beta (W m + h)_i)|`` for a converged solution.

    Convergence bounds the last change by ``tol * max(sum|m_new + m_old|, 1) <=
    tol * max(2F, 1)`` for ``F`` free nodes, and ``tanh`` is 1-Lipschitz, giving
    ``beta * max_i sum_j |W_ij| * tol * max(2F, 1)``.
    """
    free = int(np.sum(clamp_vector(model.node_count, clamps) == 0))
    e = model.topology.edges
    n = model.node_count
    row = np.bincount(e[:, 0], np.abs(model.weights), n) + np.bincount(e[:, 1], np.abs(model.weights), n)
    return model.beta * float(row.max(initial=0.0)) * config.tolerance * max(2 * free, 1)


def hmft_solve(model: SparseIsingModel, clamps=None, config: MftConfig = MftConfig(),
               seed=0) -> MomentEstimates:
    """Hierarchical mean-field averages and edge correlations.

    Averages come from the unclamped base solve. Each free node ``k`` is then
    clamped to -1 and +1 (warm-started from the base solution) and its edge
    correlations are formed from the conditional means, weighted by the base
    probability ``p(m_k = v) = (1 + v <m_k>) / 2``. When both ends of an edge
    are free, the two conditioning directions are averaged.

    ``info`` reports ``nmft_calls`` (``1 + 2 * free``), ``nonconverged`` calls and
    whether the base solve converged.
    """
    t = model.topology
    n = t.node_count
    clamp = clamp_vector(n, clamps)
    m_start = _initial_means(n, clamp, config, seed)
    free = np.flatnonzero(clamp == 0).astype(np.int64)
    indptr, nbr, eid = t.csr
    m_base, _, corr, n_calls, n_failed, base_ok = _kernels.hmft_kernel(
        indptr, nbr, eid, t.edges[:, 0].copy(), t.edges[:, 1].copy(), model.weights,
        model.biases, model.beta, free, m_start, config.damping, config.tolerance,
        config.max_iterations,
    )
    return MomentEstimates(
        m_base, corr, 0,
        {"nmft_calls": int(n_calls), "nonconverged": int(n_failed), "base_converged": bool(base_ok)},
    )


def estimate_moments(model: SparseIsingModel, clamps, method: str, config: MftConfig = MftConfig(),
                     seed=0) -> MomentEstimates:
    if method == "nmft":
        return nmft_moments(model, clamps, config, seed)
    if method == "hmft":
        return hmft_solve(model, clamps, config, seed)
    raise ContractError(f"unknown mean-field method {method!r}")
