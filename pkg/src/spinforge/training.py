"""Hybrid contrastive-divergence training of sparse Boltzmann machines.

Positive phase: visible nodes clamped to each image, moments from Gibbs
chains or a mean-field solver. Negative phase: persistent free-running Gibbs
chains. Parameters follow classical momentum on the moment differences.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .dataset import EncodedDataset, make_batches, visible_on_probability
from .meanfield import MftConfig, estimate_moments
from .metrics import InferenceConfig, accuracy_from_probs, classify_batch, log_likelihood, relative_error
from .sampler import ContractError, MomentEstimates, SparseIsingModel, SpinState, run_chains, stream_key
from .topology import Topology

log = logging.getLogger(__name__)

POSITIVE_METHODS = ("gibbs", "nmft", "hmft")
CHECKPOINT_VERSION = 1

# stream tags for derived seeds
_POS, _NEG, _EVAL, _MFT, _INIT = 1, 2, 3, 4, 5


@dataclass
class TrainConfig:
    positive_method: str = "gibbs"
    negative_sweeps: int = 100_000
    positive_sweeps: int = 10_000
    batch_size: int = 50
    batches_per_epoch: int | None = None
    epochs: int = 1
    learning_rate: float = 0.003
    learning_rate_end: float | None = None
    momentum: float = 0.6
    mft: MftConfig = field(default_factory=MftConfig)
    seed: int = 0
    n_chains: int = 1
    eval_every: int = 1
    eval_sweeps: int = 1000
    eval_method: str = "gibbs"
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.mft, dict):
            self.mft = MftConfig(**self.mft)
        if self.positive_method not in POSITIVE_METHODS:
            raise ContractError(
                f"positive_method must be one of {', '.join(POSITIVE_METHODS)}; got {self.positive_method!r}"
            )
        if not self.learning_rate > 0 or (self.learning_rate_end is not None and not self.learning_rate_end > 0):
            raise ContractError("learning rate must be > 0")
        if self.batch_size < 1 or self.negative_sweeps < 1 or self.positive_sweeps < 1:
            raise ContractError("batch size and sweep counts must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must be in [0, 1)")
        if self.n_chains < 1:
            raise ContractError("n_chains must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Log-linear interpolation from ``learning_rate`` (epoch 0) to ``learning_rate_end`` (last epoch)."""
    if config.learning_rate_end is None or config.epochs <= 1:
        return config.learning_rate
    frac = epoch / (config.epochs - 1)
    return float(config.learning_rate * (config.learning_rate_end / config.learning_rate) ** frac)


@dataclass
class TrainerState:
    model: SparseIsingModel
    velocity_w: np.ndarray
    velocity_h: np.ndarray
    negative_chains: list[SpinState]
    epoch: int = 0
    batch: int = 0
    rng: np.random.Generator = None


def init_model(topology: Topology, visible_p_on: np.ndarray, seed: int = 0, beta: float = 1.0) -> SparseIsingModel:
    """Weights ~ N(0, 0.01^2); hidden biases 0; visible biases ``log(p / (1 - p))``.

    ``visible_p_on`` is aligned with ``topology.visible_nodes`` and must already
    be clipped into (0, 1).
    """
    p = np.asarray(visible_p_on, dtype=np.float64)
    if p.shape != (len(topology.visible_nodes),):
        raise ContractError(f"need {len(topology.visible_nodes)} visible probabilities, got {p.shape}")
    if np.any(p <= 0) or np.any(p >= 1):
        raise ContractError("visible probabilities must lie in (0, 1); clip first")
    rng = np.random.default_rng([seed, _INIT])
    weights = rng.normal(0.0, 0.01, topology.edge_count)
    biases = np.zeros(topology.node_count)
    biases[topology.visible_nodes] = np.log(p / (1.0 - p))
    return SparseIsingModel(topology, weights, biases, beta)


def new_state(model: SparseIsingModel, config: TrainConfig) -> TrainerState:
    n = model.node_count
    chains = [SpinState.random(n, stream_key(config.seed, _NEG, c)) for c in range(config.n_chains)]
    return TrainerState(
        model, np.zeros(model.topology.edge_count), np.zeros(n), chains,
        rng=np.random.default_rng(config.seed),
    )


def _visible_clamps(topology: Topology, visible: np.ndarray) -> np.ndarray:
    visible = np.atleast_2d(visible)
    vn = topology.visible_nodes
    if visible.shape[1] != len(vn):
        raise ContractError(f"each image must give {len(vn)} visible values, got {visible.shape[1]}")
    if not np.all(np.abs(visible) == 1):
        raise ContractError("visible values must be -1 or +1")
    clamps = np.zeros((len(visible), topology.node_count))
    clamps[:, vn] = visible
    return clamps


def positive_phase(state: TrainerState, visible: np.ndarray, config: TrainConfig,
                   method: str | None = None, tag: tuple = ()) -> MomentEstimates:
    """Batch-mean moments with visible nodes clamped to each row of ``visible``."""
    model = state.model
    method = method or config.positive_method
    clamps = _visible_clamps(model.topology, visible)
    tag = tag or (state.epoch, state.batch)
    if method == "gibbs":
        chains = [SpinState.random(model.node_count, stream_key(config.seed, _POS, *tag, k), clamps[k])
                  for k in range(len(clamps))]
        items = run_chains(model, chains, config.positive_sweeps)
    elif method in ("nmft", "hmft"):
        items = [estimate_moments(model, clamps[k], method, config.mft, seed=[config.seed, _MFT, *tag, k])
                 for k in range(len(clamps))]
    else:
        raise ContractError(f"unknown positive method {method!r}")
    out = MomentEstimates.mean_of(items)
    if method != "gibbs":
        out.info["nonconverged"] = sum(
            m.info.get("nonconverged", 0 if m.info.get("converged", True) else 1) for m in items
        )
    return out


def negative_phase(state: TrainerState, config: TrainConfig) -> MomentEstimates:
    """Advance the persistent chains ``negative_sweeps`` sweeps; chain-averaged moments."""
    return MomentEstimates.mean_of(run_chains(state.model, state.negative_chains, config.negative_sweeps))


def cd_update(state: TrainerState, data: MomentEstimates, model_moments: MomentEstimates,
              learning_rate: float, momentum: float) -> TrainerState:
    """``v <- momentum * v + (data - model)``; ``params += learning_rate * v``."""
    m = state.model
    if (data.correlations.shape != m.weights.shape or model_moments.correlations.shape != m.weights.shape
            or data.averages.shape != m.biases.shape or model_moments.averages.shape != m.biases.shape):
        raise ContractError("moment shapes do not match the model")
    state.velocity_w = momentum * state.velocity_w + (data.correlations - model_moments.correlations)
    state.velocity_h = momentum * state.velocity_h + (data.averages - model_moments.averages)
    m.weights += learning_rate * state.velocity_w
    m.biases += learning_rate * state.velocity_h
    return state


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    train_log_likelihood: float | None = None
    test_log_likelihood: float | None = None
    mft_nonconverged: int = 0


@dataclass
class TrainResult:
    model: SparseIsingModel
    log: list[EpochRecord]
    state: TrainerState
    snapshots: dict[int, SparseIsingModel] = field(default_factory=dict)
    checkpoints: list[str] = field(default_factory=list)


def evaluate(model: SparseIsingModel, data: EncodedDataset, method: str = "gibbs", sweeps: int = 1000,
             mft: MftConfig = MftConfig(), seed=0) -> tuple[float, float]:
    """``(accuracy, log_likelihood)`` with pixels clamped and labels inferred."""
    probs = classify_batch(model, data.pixel_spins, InferenceConfig(method, sweeps, None, mft, seed))
    return accuracy_from_probs(probs, data.digits), log_likelihood(probs, data.digits)


def train(topology: Topology, data: EncodedDataset, config: TrainConfig,
          test: EncodedDataset | None = None, checkpoint_dir: str | None = None,
          snapshot_epochs=(), on_epoch: Callable[[EpochRecord, TrainerState], None] | None = None,
          model: SparseIsingModel | None = None) -> TrainResult:
    """Run ``config.epochs`` epochs of positive phase, negative phase and update per batch.

    Epochs in the log are 1-based; epoch 0 in ``snapshot_epochs`` refers to the
    initial model.
    """
    if model is None:
        model = init_model(topology, visible_on_probability(data), config.seed)
    state = new_state(model, config)
    result = TrainResult(model, [], state)
    snapshot_epochs = set(snapshot_epochs)
    if 0 in snapshot_epochs:
        result.snapshots[0] = model.copy()

    for epoch in range(config.epochs):
        state.epoch = epoch
        lr = learning_rate_at(config, epoch)
        schedule = make_batches(len(data), config.batch_size, config.batches_per_epoch, config.seed, epoch)
        nonconv = 0
        for b, idx in enumerate(schedule):
            state.batch = b
            pos = positive_phase(state, data.visible[idx], config)
            nonconv += pos.info.get("nonconverged", 0)
            neg = negative_phase(state, config)
            cd_update(state, pos, neg, lr, config.momentum)

        record = EpochRecord(epoch + 1, lr, mft_nonconverged=nonconv)
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
            seed = [config.seed, _EVAL, epoch]
            record.train_accuracy, record.train_log_likelihood = evaluate(
                model, data, config.eval_method, config.eval_sweeps, config.mft, seed)
            if test is not None:
                record.test_accuracy, record.test_log_likelihood = evaluate(
                    model, test, config.eval_method, config.eval_sweeps, config.mft, seed)
        result.log.append(record)
        log.info("epoch %d lr=%.4g train_acc=%s test_acc=%s", epoch + 1, lr,
                 record.train_accuracy, record.test_accuracy)
        if epoch + 1 in snapshot_epochs:
            result.snapshots[epoch + 1] = model.copy()
        if checkpoint_dir and config.checkpoint_every and (
            (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs
        ):
            path = os.path.join(checkpoint_dir, f"checkpoint_epoch{epoch + 1:04d}.json")
            save_checkpoint(path, model, epoch + 1, config.seed)
            result.checkpoints.append(path)
        if on_epoch is not None:
            on_epoch(record, state)
    state.epoch = config.epochs
    return result


@dataclass
class PhaseComparison:
    """xMFT estimates against Gibbs references in both phases."""

    positive: dict[str, MomentEstimates]
    negative: dict[str, MomentEstimates]

    def errors(self) -> dict[tuple[str, str], tuple[float, float]]:
        out = {}
        for phase, group in (("positive", self.positive), ("negative", self.negative)):
            for method in ("nmft", "hmft"):
                if method in group:
                    out[(phase, method)] = tuple(relative_error(group[method], group["gibbs"]))
        return out


def compare_phases(model: SparseIsingModel, visible: np.ndarray, sweeps: int = 10_000,
                   mft: MftConfig = MftConfig(), seed: int = 0, methods=("nmft", "hmft")) -> PhaseComparison:
    """Positive phase on one batch and negative phase from scratch, each by Gibbs and xMFT."""
    config = TrainConfig(positive_sweeps=sweeps, negative_sweeps=sweeps, mft=mft, seed=seed)
    state = new_state(model, config)
    positive = {"gibbs": positive_phase(state, visible, config, "gibbs", tag=(0, 0))}
    for method in methods:
        positive[method] = positive_phase(state, visible, config, method, tag=(0, 0))
    chain = SpinState.random(model.node_count, stream_key(seed, _NEG, 0))
    negative = {"gibbs": run_chains(model, [chain], sweeps, burn_in=sweeps // 10)[0]}
    for method in methods:
        negative[method] = estimate_moments(model, None, method, mft, seed=[seed, _MFT])
    return PhaseComparison(positive, negative)


class CheckpointError(ValueError):
    pass


def _checkpoint_payload(model: SparseIsingModel, epoch: int, seed: int) -> dict:
    e = model.topology.edges
    return {
        "format_version": CHECKPOINT_VERSION,
        "topology_hash": model.topology.digest,
        "beta": model.beta,
        "weights": [[int(i), int(j), float(w)] for (i, j), w in zip(e, model.weights)],
        "biases": [[i, float(h)] for i, h in enumerate(model.biases)],
        "epoch": int(epoch),
        "rng_seed": int(seed),
    }


def _checksum(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def save_checkpoint(path: str, model: SparseIsingModel, epoch: int, seed: int) -> str:
    """Write a JSON checkpoint atomically (temp file + rename); returns the path."""
    payload = _checkpoint_payload(model, epoch, seed)
    payload["checksum"] = _checksum(payload)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str, topology: Topology) -> tuple[SparseIsingModel, dict]:
    """Load and verify a checkpoint against ``topology``; returns ``(model, metadata)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "checksum" not in payload:
        raise CheckpointError("checkpoint integrity error: no checksum")
    checksum = payload.pop("checksum")
    if _checksum(payload) != checksum:
        raise CheckpointError("checkpoint integrity error: checksum mismatch")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')}")
    if payload["topology_hash"] != topology.digest:
        raise CheckpointError("checkpoint was written for a different topology")
    w = np.array([row[2] for row in payload["weights"]], dtype=np.float64)
    pairs = np.array([row[:2] for row in payload["weights"]], dtype=np.int64).reshape(-1, 2)
    if not np.array_equal(pairs, topology.edges):
        raise CheckpointError("checkpoint edges do not match topology")
    h = np.zeros(topology.node_count)
    for i, b in payload["biases"]:
        h[int(i)] = b
    meta = {k: payload[k] for k in ("epoch", "rng_seed", "format_version", "topology_hash")}
    return SparseIsingModel(topology, w, h, payload["beta"]), meta


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
