"""Gibbs sampling of sparse Ising models with p-bit updates.

Each node update draws ``r`` uniform in ``[-1, 1]`` and sets
``m_i = +1 if tanh(beta * I_i) > r else -1`` with ``I_i = sum_j W_ij m_j + h_i``.
A sweep visits color classes in ascending order, nodes within a class in
index order; nodes of one class share no edge, so they may update in parallel.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from . import _kernels
from .topology import Topology

_NO_LUT = np.zeros(1)


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


@dataclass
class SparseIsingModel:
    """Symmetric couplings on the edges of ``topology``, per-node biases and ``beta``."""

    topology: Topology
    weights: np.ndarray
    biases: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.biases = np.ascontiguousarray(self.biases, dtype=np.float64)
        if self.weights.shape != (self.topology.edge_count,):
            raise ContractError(
                f"weights shape {self.weights.shape} != ({self.topology.edge_count},)"
            )
        if self.biases.shape != (self.topology.node_count,):
            raise ContractError(f"biases shape {self.biases.shape} != ({self.topology.node_count},)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ContractError("weights and biases must be finite")
        if not self.beta >= 0:
            raise ContractError(f"beta must be nonnegative, got {self.beta}")
        self.beta = float(self.beta)

    @classmethod
    def zeros(cls, topology: Topology, beta: float = 1.0) -> "SparseIsingModel":
        return cls(topology, np.zeros(topology.edge_count), np.zeros(topology.node_count), beta)

    @classmethod
    def from_dense(cls, topology: Topology, W: np.ndarray, h, beta: float = 1.0) -> "SparseIsingModel":
        e = topology.edges
        return cls(topology, np.asarray(W)[e[:, 0], e[:, 1]], h, beta)

    @property
    def node_count(self) -> int:
        return self.topology.node_count

    def dense_weights(self) -> np.ndarray:
        n = self.node_count
        W = np.zeros((n, n))
        e = self.topology.edges
        W[e[:, 0], e[:, 1]] = self.weights
        W[e[:, 1], e[:, 0]] = self.weights
        return W

    def fields(self, spins: np.ndarray) -> np.ndarray:
        """Local fields ``W m + h`` for a spin (or mean) vector."""
        e = self.topology.edges
        m = np.asarray(spins, dtype=np.float64)
        n = self.node_count
        return (
            self.biases
            + np.bincount(e[:, 0], self.weights * m[e[:, 1]], minlength=n)
            + np.bincount(e[:, 1], self.weights * m[e[:, 0]], minlength=n)
        )

    def copy(self) -> "SparseIsingModel":
        return replace(self, weights=self.weights.copy(), biases=self.biases.copy())


@dataclass
class SpinState:
    """Spins in {-1, +1}, a clamp mask and a counter-based random stream.

    ``key`` selects the stream; ``step`` is the next unused stream position.
    A sweep consumes ``N`` positions, a single :func:`pbit_update` one.
    """

    spins: np.ndarray
    clamp_mask: np.ndarray
    key: int
    step: int = 0

    def __post_init__(self):
        self.spins = np.ascontiguousarray(self.spins, dtype=np.int8)
        self.clamp_mask = np.ascontiguousarray(self.clamp_mask, dtype=np.bool_)
        if self.spins.shape != self.clamp_mask.shape:
            raise ContractError("spins and clamp_mask differ in shape")
        if not np.all(np.abs(self.spins) == 1):
            raise ContractError("spins must be -1 or +1")

    @classmethod
    def random(cls, n: int, seed, clamps=None, chain: int = 0) -> "SpinState":
        """Uniform random spins; ``clamps`` is an array with 0 for free nodes, else ±1."""
        key = stream_key(seed, chain)
        spins = np.random.default_rng([key, 1]).choice(np.array([-1, 1], dtype=np.int8), size=n)
        mask = np.zeros(n, dtype=bool)
        if clamps is not None:
            clamps = np.asarray(clamps)
            mask = clamps != 0
            spins[mask] = clamps[mask]
        return cls(spins, mask, key)

    def copy(self) -> "SpinState":
        return SpinState(self.spins.copy(), self.clamp_mask.copy(), self.key, self.step)


def stream_key(seed, *path) -> int:
    """64-bit stream key derived from a master seed and a path of integers."""
    entropy = [int(s) for s in np.atleast_1d(seed)] + [int(p) for p in path]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


@dataclass
class MomentEstimates:
    """Per-node averages and per-edge correlations.

    ``sample_count`` is the number of sweeps averaged (0 for deterministic
    estimates); ``info`` carries solver metadata.
    """

    averages: np.ndarray
    correlations: np.ndarray
    sample_count: int = 0
    info: dict = field(default_factory=dict)

    @classmethod
    def mean_of(cls, items: list["MomentEstimates"]) -> "MomentEstimates":
        return cls(
            np.mean([m.averages for m in items], axis=0),
            np.mean([m.correlations for m in items], axis=0),
            sum(m.sample_count for m in items),
        )


def _check_node(model: SparseIsingModel, i: int) -> None:
    if not 0 <= i < model.node_count:
        raise ContractError(f"node {i} out of range [0, {model.node_count})")


def compute_field(model: SparseIsingModel, state: SpinState, i: int) -> float:
    _check_node(model, i)
    indptr, nbr, eid = model.topology.csr
    sl = slice(indptr[i], indptr[i + 1])
    return float(model.biases[i] + np.dot(model.weights[eid[sl]], state.spins[nbr[sl]]))


def pbit_update(model: SparseIsingModel, state: SpinState, i: int, lut: np.ndarray | None = None) -> int:
    """Resample node ``i`` in place and return its new spin."""
    _check_node(model, i)
    if state.clamp_mask[i]:
        raise ContractError(f"node {i} is clamped")
    x = model.beta * compute_field(model, state, i)
    th = np.tanh(x) if lut is None else float(lut[int(np.clip(np.rint(x * LUT_SCALE), -32768, 32767)) + 32768])
    r = _kernels.draw_uniform(np.uint64(state.key), np.uint64(state.step))
    state.step += 1
    state.spins[i] = 1 if th > r else -1
    return int(state.spins[i])


LUT_FRACTION_BITS = 12
LUT_SCALE = float(2 ** LUT_FRACTION_BITS)


def tanh_lut(fraction_bits: int = LUT_FRACTION_BITS) -> np.ndarray:
    """Fixed-point tanh table over a signed 16-bit input grid.

    Entry ``q + 32768`` holds ``tanh(q / 2**fraction_bits)`` rounded to 16 bits.
    """
    q = np.arange(-32768, 32768, dtype=np.float64)
    return np.rint(np.tanh(q / 2.0 ** fraction_bits) * 32767.0) / 32767.0


def _sweep_order(topology: Topology, order: str) -> np.ndarray:
    if order == "chromatic":
        return topology.color_order[0]
    if order == "sequential":
        return np.arange(topology.node_count, dtype=np.int64)
    raise ContractError(f"unknown sweep order {order!r}")


def gibbs_sweep(model: SparseIsingModel, state: SpinState, order: str = "chromatic",
                lut: np.ndarray | None = None) -> SpinState:
    """One update of every unclamped node, in place."""
    t = model.topology
    indptr, nbr, eid = t.csr
    _kernels.sweep_ordered(
        state.spins, ~state.clamp_mask, _sweep_order(t, order), indptr, nbr, eid,
        model.weights, model.biases, model.beta, np.uint64(state.key), np.uint64(state.step),
        _NO_LUT if lut is None else lut, LUT_SCALE,
    )
    state.step += t.node_count
    return state


def default_burn_in(states: list[SpinState], sweeps: int) -> int:
    """0 for chains that have already run, 10% of ``sweeps`` for fresh ones."""
    return 0 if all(s.step > 0 for s in states) else sweeps // 10


def run_chains(model: SparseIsingModel, states: list[SpinState], sweeps: int,
               burn_in: int | None = None, order: str = "chromatic",
               lut: np.ndarray | None = None) -> list[MomentEstimates]:
    """Advance several chains in place (in parallel) and return per-chain moments."""
    if sweeps < 1:
        raise ContractError("sweeps must be >= 1")
    if burn_in is None:
        burn_in = default_burn_in(states, sweeps)
    if burn_in < 0:
        raise ContractError("burn_in must be >= 0")
    t = model.topology
    indptr, nbr, eid = t.csr
    spins = np.stack([s.spins for s in states])
    free = ~np.stack([s.clamp_mask for s in states])
    keys = np.array([s.key for s in states], dtype=np.uint64)
    steps = np.array([s.step for s in states], dtype=np.uint64)
    sum_m = np.zeros(spins.shape, dtype=np.int64)
    sum_c = np.zeros((len(states), t.edge_count), dtype=np.int64)
    _kernels.run_chains(
        spins, free, _sweep_order(t, order), indptr, nbr, eid, t.edges[:, 0].copy(),
        t.edges[:, 1].copy(), model.weights, model.biases, model.beta, keys, steps,
        burn_in, sweeps, _NO_LUT if lut is None else lut, LUT_SCALE, sum_m, sum_c,
    )
    out = []
    for c, s in enumerate(states):
        s.spins[:] = spins[c]
        s.step = int(steps[c])
        out.append(MomentEstimates(sum_m[c] / sweeps, sum_c[c] / sweeps, sweeps))
    return out


def run_chain(model: SparseIsingModel, state: SpinState, sweeps: int,
              burn_in: int | None = None, order: str = "chromatic",
              lut: np.ndarray | None = None) -> tuple[MomentEstimates, SpinState]:
    """Run ``burn_in + sweeps`` sweeps; moments average the last ``sweeps`` configurations.

    The state is advanced in place and returned so persistent chains can continue.
    """
    return run_chains(model, [state], sweeps, burn_in, order, lut)[0], state


def run_chain_colored(model: SparseIsingModel, state: SpinState, sweeps: int,
                      burn_in: int | None = None,
                      lut: np.ndarray | None = None) -> tuple[MomentEstimates, SpinState]:
    """Like :func:`run_chain` with chromatic order, parallelized inside each color class."""
    if sweeps < 1:
        raise ContractError("sweeps must be >= 1")
    if burn_in is None:
        burn_in = default_burn_in([state], sweeps)
    t = model.topology
    indptr, nbr, eid = t.csr
    nodes, ptr = t.color_order
    sum_m = np.zeros(t.node_count, dtype=np.int64)
    sum_c = np.zeros(t.edge_count, dtype=np.int64)
    step = _kernels.run_chain_colored(
        state.spins, ~state.clamp_mask, nodes, ptr, indptr, nbr, eid, t.edges[:, 0].copy(),
        t.edges[:, 1].copy(), model.weights, model.biases, model.beta, np.uint64(state.key),
        np.uint64(state.step), burn_in, sweeps, _NO_LUT if lut is None else lut, LUT_SCALE,
        sum_m, sum_c,
    )
    state.step = int(step)
    return MomentEstimates(sum_m / sweeps, sum_c / sweeps, sweeps), state


def compute_energy(model: SparseIsingModel, spins: np.ndarray) -> float:
    s = np.asarray(spins, dtype=np.float64)
    e = model.topology.edges
    return float(-np.dot(model.weights, s[e[:, 0]] * s[e[:, 1]]) - np.dot(model.biases, s))


@dataclass
class BenchmarkRow:
    threads: int
    chains: int
    sweeps: int
    unclamped: int
    flips: int
    seconds: float

    @property
    def fps(self) -> float:
        return self.flips / self.seconds if self.seconds > 0 else float("inf")


@dataclass
class BenchmarkReport:
    nodes: int
    edges: int
    rows: list[BenchmarkRow]
    threads_available: int

    def to_text(self) -> str:
        lines = [f"nodes={self.nodes} edges={self.edges} threads_available={self.threads_available}"]
        for r in self.rows:
            lines.append(
                f"threads={r.threads} chains={r.chains} sweeps={r.sweeps} unclamped={r.unclamped} "
                f"flips={r.flips} seconds={r.seconds:.6f} flips_per_second={r.fps:.6g}"
            )
        return "\n".join(lines) + "\n"


def benchmark_fps(model: SparseIsingModel, duration: float | None = 1.0, threads=(1,),
                  sweeps: int | None = None, block: int = 16, seed: int = 0,
                  mode: str = "chains") -> BenchmarkReport:
    """Measure attempted p-bit updates per second for each thread count.

    ``mode="chains"`` runs one independent chain per thread; ``mode="colors"``
    runs a single chain whose color classes are split across the threads. With
    ``sweeps`` set, every chain runs exactly that many sweeps (deterministic
    flip count); otherwise blocks of ``block`` sweeps repeat until ``duration``
    seconds have elapsed.
    """
    if sweeps is None and not (duration and duration > 0):
        raise ContractError("duration must be > 0")
    if mode not in ("chains", "colors"):
        raise ContractError(f"mode must be 'chains' or 'colors', got {mode!r}")
    available = numba.config.NUMBA_NUM_THREADS
    previous = numba.get_num_threads()
    n = model.node_count

    def advance(states, count):
        if mode == "chains":
            run_chains(model, states, count, 0)
        else:
            run_chain_colored(model, states[0], count, 0)

    rows = []
    try:
        for t in threads:
            numba.set_num_threads(max(1, min(int(t), available)))
            n_chains = int(t) if mode == "chains" else 1
            states = [SpinState.random(n, seed, chain=c) for c in range(n_chains)]
            advance([s.copy() for s in states], 1)  # compile / warm caches
            done = 0
            start = time.perf_counter()
            if sweeps is not None:
                advance(states, sweeps)
                done = sweeps
            else:
                while True:
                    advance(states, block)
                    done += block
                    if time.perf_counter() - start >= duration:
                        break
            elapsed = time.perf_counter() - start
            unclamped = int(sum((~s.clamp_mask).sum() for s in states))
            rows.append(BenchmarkRow(int(t), len(states), done, unclamped, done * unclamped, elapsed))
    finally:
        numba.set_num_threads(previous)
    return BenchmarkReport(n, model.topology.edge_count, rows, available)
