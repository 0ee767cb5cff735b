import json
import os

import numpy as np
import pytest

from spinforge.dataset import EncodedDataset, encode_labels
from spinforge.meanfield import MftConfig
from spinforge.metrics import exact_moments
from spinforge.sampler import ContractError, MomentEstimates, SparseIsingModel
from spinforge.topology import NodeRole, Topology, generate_sparse_dbm
from spinforge.training import (
    CheckpointError,
    TrainConfig,
    cd_update,
    file_digest,
    init_model,
    learning_rate_at,
    load_checkpoint,
    negative_phase,
    new_state,
    positive_phase,
    save_checkpoint,
    train,
)


def pixel_topology(n, edges):
    return Topology(n, np.array(edges, dtype=np.int64).reshape(-1, 2), tuple(NodeRole("pixel", i) for i in range(n)))


def pair_model(w=0.8):
    t = Topology(2, np.array([[0, 1]]), (NodeRole("pixel", 0), NodeRole("hidden", 1)))
    return SparseIsingModel(t, np.array([w]), np.zeros(2), 1.0)


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(positive_method="bp")
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    assert TrainConfig(mft={"tolerance": 1e-3}).mft.tolerance == 1e-3


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=0.06, learning_rate_end=0.006, epochs=1000)
    assert learning_rate_at(cfg, 0) == pytest.approx(0.06)
    assert learning_rate_at(cfg, 999) == pytest.approx(0.006)
    assert learning_rate_at(cfg, 500) == pytest.approx(0.019, abs=5e-4)
    assert learning_rate_at(TrainConfig(learning_rate=0.1), 7) == 0.1


def test_init_model():
    t = pixel_topology(3, [(0, 1), (1, 2)])
    m = init_model(t, np.array([0.5, 0.88, 0.1]), seed=3)
    assert m.biases[0] == 0.0
    assert m.biases[1] == pytest.approx(1.9924, abs=1e-4)
    assert m.beta == 1.0
    with pytest.raises(ContractError):
        init_model(t, np.array([0.0, 0.5, 0.5]))


def test_init_weight_statistics_and_hidden_biases():
    t = generate_sparse_dbm(834, [863, 863], 15, seed=1, label_replicas=5)
    for seed in (0, 1):
        m = init_model(t, np.full(834, 0.3), seed=seed)
        assert np.all(m.biases[t.hidden_nodes] == 0)
        assert m.weights.mean() == pytest.approx(0, abs=5e-4)
        assert m.weights.std() == pytest.approx(0.01, rel=0.05)


@pytest.mark.parametrize("method", ["gibbs", "nmft", "hmft"])
def test_positive_phase_single_free_spin(method):
    m = pair_model(0.8)
    cfg = TrainConfig(positive_method=method, positive_sweeps=200_000, mft=MftConfig(tolerance=1e-6))
    est = positive_phase(new_state(m, cfg), np.array([[1]]), cfg)
    tol = 0.01 if method == "gibbs" else 1e-4
    assert est.averages[1] == pytest.approx(np.tanh(0.8), abs=tol)
    assert est.correlations[0] == pytest.approx(np.tanh(0.8), abs=tol)
    assert est.averages[0] == 1.0


@pytest.mark.parametrize("method", ["gibbs", "nmft", "hmft"])
def test_positive_phase_fully_visible_is_data(method):
    t = pixel_topology(4, [(0, 1), (1, 2), (2, 3), (0, 3)])
    m = init_model(t, np.full(4, 0.5))
    batch = np.array([[1, -1, 1, 1], [1, 1, -1, 1], [-1, 1, 1, 1]])
    cfg = TrainConfig(positive_method=method, positive_sweeps=5)
    est = positive_phase(new_state(m, cfg), batch, cfg)
    assert np.array_equal(est.averages, batch.mean(axis=0))
    assert np.allclose(est.correlations, (batch[:, t.edges[:, 0]] * batch[:, t.edges[:, 1]]).mean(axis=0))
    assert est.averages[3] == 1 and est.averages[2] == pytest.approx(1 / 3)


def test_positive_phase_opposite_images_cancel():
    m = pair_model()
    cfg = TrainConfig(positive_method="nmft")
    assert positive_phase(new_state(m, cfg), np.array([[1], [-1]]), cfg).averages[0] == 0


def test_positive_phase_rejects_bad_rows():
    m = pair_model()
    cfg = TrainConfig()
    with pytest.raises(ContractError):
        positive_phase(new_state(m, cfg), np.array([[1, 1]]), cfg)
    with pytest.raises(ContractError):
        positive_phase(new_state(m, cfg), np.array([[0]]), cfg)


def test_negative_phase_fresh_model_is_symmetric():
    t = generate_sparse_dbm(60, [40], 8, seed=0)
    m = init_model(t, np.full(60, 0.5))
    cfg = TrainConfig(negative_sweeps=10_000, n_chains=1)
    s = new_state(m, cfg)
    est = negative_phase(s, cfg)
    assert np.all(np.abs(est.averages) < 0.05)
    assert s.negative_chains[0].step > 0
    again = negative_phase(new_state(m, cfg), cfg)
    assert np.array_equal(est.correlations, again.correlations)


def test_negative_phase_persists():
    m = pair_model()
    cfg = TrainConfig(negative_sweeps=50)
    s = new_state(m, cfg)
    negative_phase(s, cfg)
    step = s.negative_chains[0].step
    negative_phase(s, cfg)
    assert s.negative_chains[0].step == 2 * step - 5 * 2  # burn-in only on the first call


def moments(avg, corr):
    return MomentEstimates(np.asarray(avg, float), np.asarray(corr, float), 0)


def test_cd_update_arithmetic():
    m = pair_model(0.0)
    s = new_state(m, TrainConfig())
    same = moments([0.2, 0.1], [0.3])
    cd_update(s, same, same, 0.1, 0.6)
    assert m.weights[0] == 0 and np.all(m.biases == 0)
    cd_update(s, moments([0, 0], [0.5]), moments([0, 0], [0.0]), 0.1, 0.0)
    assert m.weights[0] == pytest.approx(0.05)


def test_cd_update_momentum():
    m = pair_model(0.0)
    s = new_state(m, TrainConfig())
    g = moments([0, 0], [0.4])
    zero = moments([0, 0], [0.0])
    cd_update(s, g, zero, 0.1, 0.6)
    w1 = m.weights[0]
    cd_update(s, g, zero, 0.1, 0.6)
    assert m.weights[0] - w1 == pytest.approx(0.1 * (0.6 * 0.4 + 0.4))
    with pytest.raises(ContractError):
        cd_update(s, moments([0], [0.0]), zero, 0.1, 0.6)


def _visible_log_likelihood(model, data):
    e = model.topology.edges
    energy = -(data[:, e[:, 0]] * data[:, e[:, 1]]) @ model.weights - data @ model.biases
    return float(np.sum(-model.beta * energy) - len(data) * exact_moments(model).info["log_z"])


def test_cd_gradient_increases_likelihood():
    rng = np.random.default_rng(0)
    n = 10
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.3]
    t = pixel_topology(n, edges)
    proto = rng.choice([-1, 1], n)
    data = np.where(rng.random((40, n)) < 0.8, proto, -proto)
    m = init_model(t, np.clip((data > 0).mean(axis=0), 0.05, 0.95))
    cfg = TrainConfig()
    s = new_state(m, cfg)
    for _ in range(5):
        before = _visible_log_likelihood(m, data)
        pos = positive_phase(s, data, cfg)
        cd_update(s, pos, exact_moments(m), 0.05, 0.0)
        assert _visible_log_likelihood(m, data) > before


@pytest.fixture
def tiny():
    t = generate_sparse_dbm(794, [90], 10, seed=0, label_replicas=1)
    rng = np.random.default_rng(0)
    digits = np.arange(20) % 10
    pix = np.where(rng.random((20, 784)) < 0.2, 1, -1).astype(np.int8)
    return t, EncodedDataset(pix, encode_labels(digits, 1), digits)


def test_train_zero_epochs(tiny):
    t, data = tiny
    res = train(t, data, TrainConfig(epochs=0, batch_size=5))
    fresh = init_model(t, np.clip((data.visible > 0).mean(0), 1 / 40, 1 - 1 / 40))
    assert np.array_equal(res.model.weights, fresh.weights) and res.log == []


@pytest.mark.parametrize("method", ["gibbs", "nmft"])
def test_train_deterministic(tiny, tmp_path, method):
    t, data = tiny
    cfg = TrainConfig(positive_method=method, positive_sweeps=5, negative_sweeps=20, batch_size=5, epochs=2,
                      eval_every=1, eval_sweeps=5, checkpoint_every=1)
    a = train(t, data, cfg, checkpoint_dir=str(tmp_path / "a"))
    b = train(t, data, cfg, checkpoint_dir=str(tmp_path / "b"))
    assert np.array_equal(a.model.weights, b.model.weights)
    assert [file_digest(p) for p in a.checkpoints] == [file_digest(p) for p in b.checkpoints]
    assert [os.path.basename(p) for p in a.checkpoints] == ["checkpoint_epoch0001.json", "checkpoint_epoch0002.json"]
    assert [r.epoch for r in a.log] == [1, 2] and a.log[0].train_accuracy is not None


def test_checkpoint_roundtrip_and_integrity(tiny, tmp_path):
    t, data = tiny
    m = init_model(t, np.full(794, 0.3), seed=2)
    path = str(tmp_path / "ck.json")
    save_checkpoint(path, m, epoch=7, seed=2)
    back, meta = load_checkpoint(path, t)
    assert np.array_equal(back.weights, m.weights) and np.array_equal(back.biases, m.biases)
    assert meta["epoch"] == 7 and meta["rng_seed"] == 2
    doc = json.load(open(path))
    assert set(doc) >= {"format_version", "topology_hash", "beta", "weights", "biases", "epoch", "rng_seed"}

    doc["weights"][0][2] += 1.0
    json.dump(doc, open(path, "w"))
    with pytest.raises(CheckpointError, match="integrity"):
        load_checkpoint(path, t)

    other = generate_sparse_dbm(794, [90], 10, seed=1, label_replicas=1)
    save_checkpoint(path, m, 1, 0)
    with pytest.raises(CheckpointError, match="topology"):
        load_checkpoint(path, other)


def test_checkpoint_write_is_atomic(tiny, tmp_path, monkeypatch):
    t, _ = tiny
    m = init_model(t, np.full(794, 0.3))
    path = str(tmp_path / "ck.json")
    save_checkpoint(path, m, 1, 0)
    original = open(path).read()

    def boom(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr(json, "dump", boom)
    with pytest.raises(OSError):
        save_checkpoint(path, m, 2, 0)
    assert open(path).read() == original
    assert os.listdir(tmp_path) == ["ck.json"]
