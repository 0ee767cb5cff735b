"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 6, 7, 8 share one set of MNIST/100 training runs (Gibbs, NMFT and
HMFT positive phases). Those runs are deterministic, so their checkpoints are
cached under ``.acceptance_cache/`` keyed by the configuration and a hash of
the package sources; delete the directory to force retraining.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import spinforge
from spinforge.cli import main as cli_main
from spinforge.dataset import binarize, load_idx, subsample
from spinforge.meanfield import MftConfig, fixed_point_bound, hmft_solve, nmft_moments, nmft_solve
from spinforge.metrics import exact_moments, relative_error
from spinforge.sampler import SparseIsingModel, SpinState, benchmark_fps, run_chain
from spinforge.topology import NodeRole, Topology, generate_sparse_dbm
from spinforge.training import (
    TrainConfig,
    compare_phases,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

from .helpers import random_graph, toy_model

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "data" / "mnist"
CACHE = ROOT / ".acceptance_cache"


def random_ising(rng, n, max_degree, w_scale, beta):
    edges = random_graph(n, max_degree, rng)
    t = Topology(n, edges, (NodeRole("hidden", 1),) * n)
    return SparseIsingModel(t, rng.uniform(-w_scale, w_scale, len(edges)), rng.uniform(-w_scale, w_scale, n), beta)


def oracle_models(count=50, seed=2024):
    rng = np.random.default_rng(seed)
    return [random_ising(rng, int(rng.integers(4, 17)), 4, 2.0, float(rng.choice([0.5, 1.0, 2.0])))
            for _ in range(count)]


def linf(est, ref):
    return max(np.max(np.abs(est.averages - ref.averages)), np.max(np.abs(est.correlations - ref.correlations)))


# 1 ---------------------------------------------------------------------------

def test_c01_toy_two_spin(acceptance_report):
    start = time.perf_counter()
    m = toy_model()
    exact = exact_moments(m).correlations[0]
    hmft = hmft_solve(m).correlations[0]
    nmft = nmft_moments(m).correlations[0]
    gibbs = run_chain(m, SpinState.random(2, 0), 1_000_000)[0].correlations[0]
    elapsed = time.perf_counter() - start
    checks = {
        "exact": abs(exact - (-0.7616)) <= 1e-4,
        "hmft": abs(hmft - exact) <= 1e-3,
        "nmft": abs(nmft) < 1e-6,
        "gibbs": abs(gibbs - exact) <= 0.005,
        "runtime": elapsed < 10,
    }
    ok = all(checks.values())
    acceptance_report(1, "toy 2-spin", ok,
                      f"exact={exact:.6f} hmft={hmft:.6f} nmft={nmft:.3g} gibbs={gibbs:.5f} "
                      f"time={elapsed:.1f}s failed={[k for k, v in checks.items() if not v]}")
    assert ok, checks


# 2 ---------------------------------------------------------------------------

def test_c02_sampler_matches_oracle(acceptance_report):
    start = time.perf_counter()
    errors = []
    for k, m in enumerate(oracle_models()):
        est, _ = run_chain(m, SpinState.random(m.node_count, [7, k]), 1_000_000)
        errors.append(linf(est, exact_moments(m)))
    elapsed = time.perf_counter() - start
    good = int(np.sum(np.array(errors) <= 0.015))
    ok = good >= 48 and elapsed < 600
    acceptance_report(2, "sampler vs exact oracle", ok,
                      f"{good}/50 within 0.015 (worst {max(errors):.4f}) time={elapsed:.0f}s")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_c03_chromatic_equals_sequential(acceptance_report):
    start = time.perf_counter()
    diffs = []
    for k, m in enumerate(oracle_models()[:20]):
        a, _ = run_chain(m, SpinState.random(m.node_count, [8, k]), 1_000_000, order="chromatic")
        b, _ = run_chain(m, SpinState.random(m.node_count, [9, k]), 1_000_000, order="sequential")
        diffs.append(linf(a, b))
    elapsed = time.perf_counter() - start
    good = int(np.sum(np.array(diffs) <= 0.015))
    ok = good == 20 and elapsed < 300
    acceptance_report(3, "chromatic = sequential", ok,
                      f"{good}/20 within 0.015 (worst {max(diffs):.4f}) time={elapsed:.0f}s")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_c04_nmft_contract(acceptance_report):
    rng = np.random.default_rng(4)
    cfg = MftConfig()
    checked = violations = 0
    worst_ratio = 0.0
    for k in range(200):
        n = int(rng.integers(2, 40))
        m = random_ising(rng, n, 6, float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.2, 2.0)))
        clamps = np.where(rng.random(n) < 0.3, rng.choice([-1, 1], n), 0)
        sol = nmft_solve(m, clamps, cfg, seed=k)
        if not sol.converged:
            continue
        checked += 1
        free = clamps == 0
        gap = np.abs(sol.marginal_means - np.tanh(m.beta * m.fields(sol.marginal_means)))[free].max(initial=0.0)
        bound = fixed_point_bound(m, clamps, cfg)
        worst_ratio = max(worst_ratio, gap / bound if bound > 0 else 0.0)
        violations += gap > bound or sol.residual > cfg.tolerance
    singles = []
    for h, beta in [(0.5, 1.0), (-1.2, 0.5), (2.0, 2.0), (0.01, 1.0)]:
        t = Topology(1, np.zeros((0, 2)), (NodeRole("hidden", 1),))
        singles.append(abs(nmft_solve(SparseIsingModel(t, np.zeros(0), np.array([h]), beta)).marginal_means[0]
                           - np.tanh(beta * h)))
    ok = violations == 0 and checked > 100 and max(singles) < 1e-6
    acceptance_report(4, "NMFT contract", ok,
                      f"{checked} converged solutions, {violations} bound violations "
                      f"(max gap/bound {worst_ratio:.3g}); single-spin error {max(singles):.2e}")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_c05_hmft_dominance(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    wins = 0
    for _ in range(50):
        m = random_ising(rng, 8, 4, 0.3, 1.0)
        exact = exact_moments(m).correlations
        wins += np.linalg.norm(hmft_solve(m).correlations - exact) <= np.linalg.norm(
            nmft_moments(m).correlations - exact)
    elapsed = time.perf_counter() - start
    ok = wins >= 45 and elapsed < 120
    acceptance_report(5, "HMFT dominance at weak coupling", ok, f"HMFT <= NMFT in {wins}/50 time={elapsed:.1f}s")
    assert ok


# 6, 7, 8 -------------------------------------------------------------------------

MNIST100 = dict(
    visible=834, hidden=166, max_degree=15, label_replicas=5, label_degree=15, topology_seed=1,
    subsample=100, subsample_seed=0, test_subsample=100,
)
TRAIN = dict(
    negative_sweeps=1000, positive_sweeps=100, batch_size=10, epochs=500, learning_rate=0.06,
    learning_rate_end=0.006, momentum=0.6, seed=0, n_chains=1, eval_every=50, eval_sweeps=1000,
)
METHODS = ("gibbs", "nmft", "hmft")
REFERENCE_SWEEPS = 100_000


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(spinforge.__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _mnist100():
    raw = load_idx(str(DATA / "train-images-idx3-ubyte"), str(DATA / "train-labels-idx1-ubyte"))
    train_set = binarize(raw)[subsample(len(raw), MNIST100["subsample"], MNIST100["subsample_seed"])]
    raw_t = load_idx(str(DATA / "t10k-images-idx3-ubyte"), str(DATA / "t10k-labels-idx1-ubyte"))
    test_set = binarize(raw_t)[subsample(len(raw_t), MNIST100["test_subsample"], MNIST100["subsample_seed"])]
    return train_set, test_set


@pytest.fixture(scope="session")
def mnist_runs():
    """Train (or load cached) Gibbs, NMFT and HMFT runs; returns per-method logs and checkpoints."""
    if not (DATA / "train-images-idx3-ubyte").exists():
        pytest.skip("MNIST IDX files missing; run scripts/make_mnist_idx.py")
    topo = generate_sparse_dbm(MNIST100["visible"], [MNIST100["hidden"]], MNIST100["max_degree"],
                               MNIST100["topology_seed"], label_replicas=MNIST100["label_replicas"],
                               label_degree=MNIST100["label_degree"])
    train_set, test_set = _mnist100()
    runs = {}
    for method in METHODS:
        config = TrainConfig(positive_method=method, **TRAIN)
        key = hashlib.sha256(json.dumps([MNIST100, config.to_dict(), _source_digest()],
                                        sort_keys=True, default=str).encode()).hexdigest()[:16]
        run_dir = CACHE / f"{method}-{key}"
        log_path = run_dir / "log.json"
        if not log_path.exists():
            start = time.perf_counter()
            result = train(topo, train_set, config, test=test_set, snapshot_epochs=(1,))
            run_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(str(run_dir / "epoch0001.json"), result.snapshots[1], 1, config.seed)
            save_checkpoint(str(run_dir / "final.json"), result.model, config.epochs, config.seed)
            log = [vars(r) for r in result.log if r.train_accuracy is not None]
            log_path.write_text(json.dumps({"log": log, "seconds": time.perf_counter() - start}, indent=1))
        doc = json.loads(log_path.read_text())
        runs[method] = {
            "log": doc["log"],
            "seconds": doc["seconds"],
            "epoch1": load_checkpoint(str(run_dir / "epoch0001.json"), topo)[0],
            "final": load_checkpoint(str(run_dir / "final.json"), topo)[0],
        }
    return topo, train_set, test_set, runs


def test_c06_mnist100_training(mnist_runs, acceptance_report):
    _, _, _, runs = mnist_runs
    by_epoch = {m: {r["epoch"]: r["train_accuracy"] for r in runs[m]["log"]} for m in METHODS}
    gibbs_best = max(by_epoch["gibbs"].values())
    final = TRAIN["epochs"]
    gaps = {m: abs(by_epoch[m][final] - by_epoch["gibbs"][final]) for m in ("nmft", "hmft")}
    ok = gibbs_best >= 0.95 and all(g <= 0.05 for g in gaps.values())
    trace = " ".join(f"{m}:" + ",".join(f"{by_epoch[m][e]:.2f}" for e in sorted(by_epoch[m])) for m in METHODS)
    acceptance_report(6, "MNIST/100 training", ok,
                      f"best Gibbs accuracy {gibbs_best:.2f}; epoch-{final} gaps nmft={gaps['nmft']:.2f} "
                      f"hmft={gaps['hmft']:.2f}; trace {trace}")
    assert ok


def test_c07_phase_asymmetry(mnist_runs, acceptance_report):
    _, train_set, _, runs = mnist_runs
    batch = train_set[np.arange(10)].visible
    # near-zero epoch-1 correlations make a 10^4-sweep Gibbs reference noise-dominated
    late = compare_phases(runs["gibbs"]["final"], batch, sweeps=REFERENCE_SWEEPS).errors()
    early = compare_phases(runs["gibbs"]["epoch1"], batch, sweeps=REFERENCE_SWEEPS).errors()
    pos_late, neg_late = late[("positive", "nmft")][1], late[("negative", "nmft")][1]
    pos_early, neg_early = early[("positive", "nmft")][1], early[("negative", "nmft")][1]
    ok = neg_late >= 5 * pos_late and pos_early < 0.1 and neg_early < 0.1
    acceptance_report(7, "phase asymmetry", ok,
                      f"late nmft corr error pos={pos_late:.4f} neg={neg_late:.4f} (ratio {neg_late / pos_late:.1f}); "
                      f"epoch-1 pos={pos_early:.4f} neg={neg_early:.4f}")
    assert ok


def test_c08_log_likelihood_ordering(mnist_runs, acceptance_report):
    _, train_set, test_set, runs = mnist_runs
    L = {}
    for m in METHODS:
        model = runs[m]["final"]
        L[m] = (evaluate(model, train_set, "gibbs", 1000, seed=[8, 0])[1],
                evaluate(model, test_set, "gibbs", 1000, seed=[8, 1])[1])
    train_order = L["gibbs"][0] >= L["hmft"][0] >= L["nmft"][0]
    tests = [L[m][1] for m in METHODS]
    spread = (max(tests) - min(tests)) / max(abs(t) for t in tests)
    ok = train_order and spread <= 0.15
    acceptance_report(8, "log-likelihood ordering", ok,
                      "train " + " ".join(f"{m}={L[m][0]:.2f}" for m in METHODS)
                      + "; test " + " ".join(f"{m}={L[m][1]:.2f}" for m in METHODS) + f"; test spread {spread:.3f}")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_c09_thread_scaling(acceptance_report):
    import numba

    topo = generate_sparse_dbm(834, [863, 863], 15, seed=1, label_replicas=5)
    rng = np.random.default_rng(9)
    m = SparseIsingModel(topo, rng.normal(0, 0.1, topo.edge_count), np.zeros(topo.node_count))
    report = benchmark_fps(m, duration=2.0, threads=(1, 2, 4), mode="colors")
    base = report.rows[0].fps
    eff = {r.threads: r.fps / (r.threads * base) for r in report.rows}
    ok = all(e >= 0.8 for e in eff.values())
    acceptance_report(9, "thread scaling", ok,
                      f"cores available to numba={numba.config.NUMBA_NUM_THREADS}; "
                      + " ".join(f"{r.threads}t={r.fps:.3g}fps(eff {eff[r.threads]:.2f})" for r in report.rows))
    assert ok


# 10 --------------------------------------------------------------------------

def test_c10_determinism(tmp_path, acceptance_report):
    if not (DATA / "train-images-idx3-ubyte").exists():
        pytest.skip("MNIST IDX files missing; run scripts/make_mnist_idx.py")
    topo = str(tmp_path / "g.topo")
    assert cli_main(["gen", "--visible", "834", "--hidden", "166", "--label-degree", "15", "--seed", "1",
                     "-o", topo]) == 0
    args = ["train", "--topology", topo, "--data-dir", str(DATA), "--subsample", "40", "--test-subsample", "0",
            "--batch-size", "10", "--epochs", "3", "--neg-sweeps", "200", "--pos-sweeps", "20",
            "--eval-every", "0", "--checkpoint-every", "1", "--positive"]
    digests = []
    for method in METHODS:
        a, b = str(tmp_path / f"{method}-a"), str(tmp_path / f"{method}-b")
        assert cli_main(args + [method, "--out-dir", a]) == 0
        assert cli_main(["train", "--from-manifest", os.path.join(a, "manifest.json"), "--out-dir", b]) == 0
        digests.append([json.load(open(os.path.join(d, "manifest.json")))["artifacts"]["checkpoints"] for d in (a, b)])
    ok = all(x == y and len(x) == 3 for x, y in digests)
    acceptance_report(10, "determinism", ok,
                      f"{sum(x == y for x, y in digests)}/3 methods reproduce all 3 checkpoint hashes from the manifest")
    assert ok
