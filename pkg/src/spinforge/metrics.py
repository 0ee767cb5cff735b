"""Classification, likelihood, correlation error measures and the exact oracle."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .meanfield import MftConfig, clamp_vector, nmft_solve
from .sampler import ContractError, MomentEstimates, SparseIsingModel, SpinState, run_chains, stream_key

MAX_EXACT_NODES = 20
PROBABILITY_FLOOR = 1e-12


def _all_states(n: int) -> np.ndarray:
    idx = np.arange(2 ** n, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(n)) & 1
    return (2 * bits - 1).astype(np.float64)


def exact_moments(model: SparseIsingModel, clamps=None) -> MomentEstimates:
    """Boltzmann averages and edge correlations by enumerating every state.

    Clamped nodes are held fixed; only free nodes are enumerated. ``info``
    holds ``log_z`` (log partition function over the free configurations).
    """
    n = model.node_count
    clamp = clamp_vector(n, clamps)
    free = np.flatnonzero(clamp == 0)
    if len(free) > MAX_EXACT_NODES:
        raise ContractError(f"exact enumeration refused for {len(free)} > {MAX_EXACT_NODES} free nodes")
    states = np.tile(clamp, (2 ** len(free), 1))
    states[:, free] = _all_states(len(free))
    e = model.topology.edges
    pair = states[:, e[:, 0]] * states[:, e[:, 1]]
    energy = -pair @ model.weights - states @ model.biases
    logw = -model.beta * energy
    log_z = float(np.logaddexp.reduce(logw))
    p = np.exp(logw - log_z)
    return MomentEstimates(p @ states, p @ pair, 0, {"log_z": log_z})


def partition_function(model: SparseIsingModel) -> float:
    return float(np.exp(exact_moments(model).info["log_z"]))


def softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


@dataclass
class ClassificationResult:
    per_digit_probability: np.ndarray
    predicted_digit: int


def scores_from_label_probs(label_p_up: np.ndarray, replicas: int) -> np.ndarray:
    """Average ``P(label bit = +1)`` over replicas; position ``d + 10 r`` holds digit ``d``."""
    p = np.asarray(label_p_up, dtype=np.float64)
    return p.reshape(*p.shape[:-1], replicas, 10).mean(axis=-2)


def result_from_label_probs(label_p_up: np.ndarray, replicas: int) -> ClassificationResult:
    probs = softmax(scores_from_label_probs(label_p_up, replicas))
    return ClassificationResult(probs, int(np.argmax(probs)))


@dataclass(frozen=True)
class InferenceConfig:
    """How label marginals are inferred with pixels clamped."""

    method: str = "gibbs"  # "gibbs", "nmft" or "hmft"
    sweeps: int = 1000
    burn_in: int | None = None
    mft: MftConfig = MftConfig()
    seed: int = 0


def label_probabilities(model: SparseIsingModel, pixel_spins: np.ndarray,
                        config: InferenceConfig = InferenceConfig()) -> np.ndarray:
    """``P(label bit = +1)`` for each image (rows of ``pixel_spins``), shape ``(n, 10 R)``."""
    t = model.topology
    if t.label_replicas == 0:
        raise ContractError("model has no label nodes")
    pixels = np.atleast_2d(np.asarray(pixel_spins))
    if pixels.shape[1] != len(t.pixel_nodes):
        raise ContractError(f"expected {len(t.pixel_nodes)} pixels, got {pixels.shape[1]}")
    labels = t.label_nodes
    clamps = np.zeros((len(pixels), t.node_count))
    clamps[:, t.pixel_nodes] = pixels
    if config.method == "gibbs":
        states = [SpinState.random(t.node_count, stream_key(config.seed, k), clamps[k])
                  for k in range(len(pixels))]
        moments = run_chains(model, states, config.sweeps, config.burn_in)
        avg = np.array([m.averages[labels] for m in moments])
    elif config.method in ("nmft", "hmft"):
        # hierarchical averages are the naive ones
        seeds = [[*np.atleast_1d(config.seed), k] for k in range(len(pixels))]
        avg = np.array([nmft_solve(model, clamps[k], config.mft, seed=seeds[k]).marginal_means[labels]
                        for k in range(len(pixels))])
    else:
        raise ContractError(f"unknown inference method {config.method!r}")
    return 0.5 * (1.0 + avg)


def classify_batch(model: SparseIsingModel, pixel_spins: np.ndarray,
                   config: InferenceConfig = InferenceConfig()) -> np.ndarray:
    """Per-digit probabilities ``(n, 10)`` after replica averaging and softmax."""
    p = label_probabilities(model, pixel_spins, config)
    return softmax(scores_from_label_probs(p, model.topology.label_replicas))


def classify(model: SparseIsingModel, pixel_spins: np.ndarray,
             config: InferenceConfig = InferenceConfig()) -> ClassificationResult:
    probs = classify_batch(model, np.asarray(pixel_spins)[None, :], config)[0]
    return ClassificationResult(probs, int(np.argmax(probs)))


def accuracy_from_probs(probs: np.ndarray, digits: np.ndarray) -> float:
    digits = np.asarray(digits)
    if len(digits) == 0:
        raise ContractError("accuracy of an empty set")
    return float(np.mean(np.argmax(probs, axis=1) == digits))


def accuracy(model: SparseIsingModel, pixel_spins: np.ndarray, digits: np.ndarray,
             config: InferenceConfig = InferenceConfig()) -> float:
    if len(digits) == 0:
        raise ContractError("accuracy of an empty set")
    return accuracy_from_probs(classify_batch(model, pixel_spins, config), digits)


def log_likelihood(probabilities: np.ndarray, digits: np.ndarray) -> float:
    """Sum over examples of the log probability given to the true class."""
    p = np.asarray(probabilities, dtype=np.float64)
    d = np.asarray(digits, dtype=np.int64)
    return float(np.sum(np.log(np.maximum(p[np.arange(len(d)), d], PROBABILITY_FLOOR))))


class RelativeError(NamedTuple):
    averages: float
    correlations: float


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.sqrt(np.sum(b ** 2))
    if denom == 0:
        raise ValueError("relative error undefined: reference is identically zero")
    return float(np.sqrt(np.sum((a - b) ** 2)) / denom)


def relative_error(estimate: MomentEstimates, reference: MomentEstimates) -> RelativeError:
    """``||A - B|| / ||B||`` over edge correlations, and separately over averages."""
    if estimate.correlations.shape != reference.correlations.shape:
        raise ContractError("moment estimates cover different topologies")
    return RelativeError(
        _rel(estimate.averages, reference.averages),
        _rel(estimate.correlations, reference.correlations),
    )


@dataclass
class CorrelationHistogram:
    """Per-edge estimate pairs plus a histogram of signed errors ``A - B``."""

    edges: np.ndarray
    estimate: np.ndarray
    reference: np.ndarray
    counts: np.ndarray
    bin_edges: np.ndarray

    def pairs_csv(self) -> str:
        buf = io.StringIO()
        buf.write("i,j,estimate,reference\n")
        for (i, j), a, b in zip(self.edges, self.estimate, self.reference):
            buf.write(f"{i},{j},{a:.10g},{b:.10g}\n")
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_low,bin_high,count\n")
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            buf.write(f"{lo:.10g},{hi:.10g},{c}\n")
        return buf.getvalue()


def correlation_histogram(estimate: MomentEstimates, reference: MomentEstimates, edges: np.ndarray,
                          bins: int = 20, limit: float | None = None) -> CorrelationHistogram:
    """Histogram of edge-correlation errors over ``[-limit, limit]``.

    ``limit`` defaults to the largest absolute error (1 if all errors vanish).
    """
    a, b = estimate.correlations, reference.correlations
    err = a - b
    if limit is None:
        limit = float(np.max(np.abs(err), initial=0.0)) or 1.0
    counts, bin_edges = np.histogram(err, bins=bins, range=(-limit, limit))
    return CorrelationHistogram(np.asarray(edges), a, b, counts, bin_edges)
