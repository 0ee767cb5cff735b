"""Command-line entry point: ``spinforge <command> [flags]``.

Every flag can also be set through an environment variable named
``SPINFORGE_<FLAG>`` (dashes become underscores), e.g. ``SPINFORGE_SEED=3``.
Explicit flags win over the environment. Exit codes: 0 success, 2 usage,
3 data/format, 4 numerical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict

import numba
import numpy as np

from . import __version__
from .dataset import DatasetError, EncodedDataset, binarize, load_idx, subsample
from .meanfield import MftConfig, estimate_moments, nmft_moments
from .metrics import correlation_histogram, exact_moments
from .sampler import ContractError, SpinState, benchmark_fps, run_chain
from .topology import ConstructionError, TopologyError, generate_sparse_dbm, load_topology, save_topology
from .training import (
    CheckpointError,
    TrainConfig,
    compare_phases,
    evaluate,
    file_digest,
    load_checkpoint,
    train,
)

log = logging.getLogger("spinforge")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4
ENV_PREFIX = "SPINFORGE_"
MANIFEST_NAME = "manifest.json"


class NumericalError(RuntimeError):
    pass


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", default="data/mnist", help="directory holding the four MNIST IDX files")
    p.add_argument("--threshold", type=int, default=127, help="pixel is +1 above this intensity")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"spinforge {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a sparse layered topology file")
    g.add_argument("--visible", type=int, required=True)
    g.add_argument("--hidden", type=_int_list, required=True, help="comma-separated hidden layer sizes")
    g.add_argument("--max-degree", type=int, default=15)
    g.add_argument("--label-replicas", type=int, default=5)
    g.add_argument("--label-degree", type=int, default=None)
    g.add_argument("--edges", type=int, default=None, help="stop the random fill at this edge count")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoints, metrics and a manifest")
    t.add_argument("--from-manifest", default=None, help="rerun the configuration stored in a manifest")
    t.add_argument("--topology", default=None)
    _add_data_flags(t)
    t.add_argument("--positive", choices=("gibbs", "nmft", "hmft"), default="gibbs")
    t.add_argument("--neg-sweeps", type=int, default=100_000)
    t.add_argument("--pos-sweeps", type=int, default=10_000)
    t.add_argument("--batch-size", type=int, default=50)
    t.add_argument("--batches-per-epoch", type=int, default=None)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--lr", type=float, default=0.003)
    t.add_argument("--lr-end", type=float, default=None)
    t.add_argument("--momentum", type=float, default=0.6)
    t.add_argument("--mft-tol", type=float, default=1e-2)
    t.add_argument("--mft-lambda", type=float, default=0.5)
    t.add_argument("--mft-max-iter", type=int, default=1000)
    t.add_argument("--subsample", type=int, default=None, help="train on N examples drawn with --subsample-seed")
    t.add_argument("--subsample-seed", type=int, default=0)
    t.add_argument("--test-subsample", type=int, default=None, help="evaluate on N test examples (0 disables)")
    t.add_argument("--replicas", type=int, default=None, help="label replicas (default: from topology)")
    t.add_argument("--chains", type=int, default=1, help="persistent negative chains")
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--eval-sweeps", type=int, default=1000)
    t.add_argument("--eval-method", choices=("gibbs", "nmft", "hmft"), default="gibbs")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--threads", type=int, default=None)
    t.add_argument("--checkpoint-every", type=int, default=0, help="0 writes only the final checkpoint")
    t.add_argument("--max-nonconverged", type=float, default=None,
                   help="fail with exit code 4 when an epoch's share of unconverged MFT solves exceeds this")
    t.add_argument("--out-dir", default=None)

    e = sub.add_parser("eval", help="accuracy and log-likelihood of a checkpoint")
    e.add_argument("--topology", required=True)
    e.add_argument("--checkpoint", required=True)
    _add_data_flags(e)
    e.add_argument("--split", choices=("train", "test", "both"), default="both")
    e.add_argument("--subsample", type=int, default=None)
    e.add_argument("--subsample-seed", type=int, default=0)
    e.add_argument("--method", choices=("gibbs", "nmft", "hmft"), default="gibbs")
    e.add_argument("--sweeps", type=int, default=1000)
    e.add_argument("--mft-tol", type=float, default=1e-2)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threads", type=int, default=None)

    c = sub.add_parser("compare-phases", help="xMFT vs Gibbs moment errors in both phases")
    c.add_argument("--topology", required=True)
    c.add_argument("--checkpoint", required=True)
    _add_data_flags(c)
    c.add_argument("--batch-size", type=int, default=10)
    c.add_argument("--subsample", type=int, default=None)
    c.add_argument("--subsample-seed", type=int, default=0)
    c.add_argument("--sweeps", type=int, default=10_000)
    c.add_argument("--mft-tol", type=float, default=1e-2)
    c.add_argument("--bins", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-dir", default=None, help="write histogram and pair CSV files here")

    b = sub.add_parser("bench", help="flips-per-second report across thread counts")
    b.add_argument("--topology", required=True)
    b.add_argument("--threads", type=_int_list, default=[1])
    b.add_argument("--mode", choices=("chains", "colors"), default="chains")
    b.add_argument("--duration", type=float, default=1.0)
    b.add_argument("--sweeps", type=int, default=None, help="fixed sweep count instead of a duration")
    b.add_argument("--seed", type=int, default=0)

    y = sub.add_parser("toy", help="two-spin antiferromagnet: exact, NMFT, HMFT and Gibbs correlations")
    y.add_argument("--beta", type=float, default=1.0)
    y.add_argument("--weight", type=float, default=-1.0)
    y.add_argument("--sweeps", type=int, default=1_000_000)
    y.add_argument("--seed", type=int, default=0)
    return parser


def _apply_env(parser: argparse.ArgumentParser, root: argparse.ArgumentParser | None = None) -> None:
    """Turn ``SPINFORGE_<DEST>`` variables into parser defaults, recursively."""
    root = root or parser
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for child in action.choices.values():
                _apply_env(child, root)
            continue
        if not action.option_strings or action.dest in ("help", "version"):
            continue
        raw = os.environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                root.error(f"{ENV_PREFIX}{action.dest.upper()}: {exc}")
            if action.choices is not None and value not in action.choices:
                root.error(f"{ENV_PREFIX}{action.dest.upper()}={raw!r} is not one of {sorted(action.choices)}")
        action.default = value
        action.required = False


def _set_threads(n: int | None) -> None:
    if n is not None:
        if n < 1:
            raise UsageError("--threads must be >= 1")
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _load_split(data_dir: str, split: str, threshold: int, replicas: int, count: int | None,
                seed: int) -> EncodedDataset:
    prefix = "train" if split == "train" else "t10k"
    raw = load_idx(os.path.join(data_dir, f"{prefix}-images-idx3-ubyte"),
                   os.path.join(data_dir, f"{prefix}-labels-idx1-ubyte"))
    data = binarize(raw, threshold, replicas)
    if count is not None:
        data = data[subsample(len(data), count, seed)]
    return data


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        positive_method=args.positive, negative_sweeps=args.neg_sweeps, positive_sweeps=args.pos_sweeps,
        batch_size=args.batch_size, batches_per_epoch=args.batches_per_epoch, epochs=args.epochs,
        learning_rate=args.lr, learning_rate_end=args.lr_end, momentum=args.momentum,
        mft=MftConfig(damping=args.mft_lambda, tolerance=args.mft_tol, max_iterations=args.mft_max_iter),
        seed=args.seed, n_chains=args.chains, eval_every=args.eval_every, eval_sweeps=args.eval_sweeps,
        eval_method=args.eval_method, checkpoint_every=args.checkpoint_every,
    )


# flags that describe where outputs go rather than what is computed
_NON_CONFIG = {"command", "verbose", "from_manifest", "out_dir", "func"}


def cmd_gen(args) -> int:
    topo = generate_sparse_dbm(args.visible, args.hidden, args.max_degree, args.seed,
                               label_replicas=args.label_replicas, target_edges=args.edges,
                               label_degree=args.label_degree)
    save_topology(topo, args.output)
    print(f"nodes={topo.node_count} edges={topo.edge_count} density={topo.density:.6f} "
          f"max_degree={topo.max_degree} colors={topo.n_colors} sha256={topo.digest}")
    return 0


def cmd_train(args) -> int:
    if args.from_manifest:
        with open(args.from_manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
        out_dir = args.out_dir
        for key, value in manifest["flags"].items():
            setattr(args, key, value)
        args.out_dir = out_dir or manifest["out_dir"]
    if args.topology is None:
        raise UsageError("train needs --topology (or --from-manifest)")
    if args.out_dir is None:
        raise UsageError("train needs --out-dir")
    _set_threads(args.threads)
    config = _train_config(args)
    topo = load_topology(args.topology)
    replicas = args.replicas if args.replicas is not None else topo.label_replicas
    data = _load_split(args.data_dir, "train", args.threshold, replicas, args.subsample, args.subsample_seed)
    test = None
    if args.test_subsample != 0:
        test = _load_split(args.data_dir, "test", args.threshold, replicas, args.test_subsample,
                           args.subsample_seed)

    os.makedirs(args.out_dir, exist_ok=True)
    flags = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    manifest = {
        "tool": "spinforge",
        "version": __version__,
        "command": "train",
        "flags": flags,
        "config": config.to_dict(),
        "seed": config.seed,
        "topology_hash": topo.digest,
        "out_dir": args.out_dir,
        "artifacts": {},
    }
    manifest_path = os.path.join(args.out_dir, MANIFEST_NAME)
    _write_json(manifest_path, manifest)

    metrics_path = os.path.join(args.out_dir, "metrics.csv")
    calls_per_epoch = (config.batches_per_epoch or len(data) // config.batch_size) * config.batch_size
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "learning_rate", "train_accuracy", "test_accuracy",
                         "train_log_likelihood", "test_log_likelihood", "mft_nonconverged"])

        def on_epoch(record, state):
            writer.writerow([record.epoch, f"{record.learning_rate:.10g}", _fmt(record.train_accuracy),
                             _fmt(record.test_accuracy), _fmt(record.train_log_likelihood),
                             _fmt(record.test_log_likelihood), record.mft_nonconverged])
            fh.flush()
            print(f"epoch={record.epoch} lr={record.learning_rate:.4g} train_acc={_fmt(record.train_accuracy)} "
                  f"test_acc={_fmt(record.test_accuracy)} mft_nonconverged={record.mft_nonconverged}", flush=True)
            if not (np.all(np.isfinite(state.model.weights)) and np.all(np.isfinite(state.model.biases))):
                raise NumericalError(f"non-finite parameters after epoch {record.epoch}")
            if (args.max_nonconverged is not None and config.positive_method != "gibbs"
                    and record.mft_nonconverged > args.max_nonconverged * calls_per_epoch):
                raise NumericalError(
                    f"epoch {record.epoch}: {record.mft_nonconverged} unconverged mean-field solves "
                    f"exceed the allowed share {args.max_nonconverged}"
                )

        if config.checkpoint_every == 0:
            config.checkpoint_every = max(config.epochs, 1)
        result = train(topo, data, config, test=test, checkpoint_dir=args.out_dir, on_epoch=on_epoch)

    manifest["artifacts"] = {
        "metrics": os.path.basename(metrics_path),
        "checkpoints": {os.path.basename(p): file_digest(p) for p in result.checkpoints},
    }
    _write_json(manifest_path, manifest)
    for p in result.checkpoints:
        print(f"checkpoint={p} sha256={file_digest(p)}")
    return 0


def cmd_eval(args) -> int:
    _set_threads(args.threads)
    topo = load_topology(args.topology)
    model, meta = load_checkpoint(args.checkpoint, topo)
    splits = ("train", "test") if args.split == "both" else (args.split,)
    mft = MftConfig(tolerance=args.mft_tol)
    print(f"checkpoint={args.checkpoint} epoch={meta['epoch']} method={args.method}")
    for split in splits:
        data = _load_split(args.data_dir, split, args.threshold, topo.label_replicas, args.subsample,
                           args.subsample_seed)
        acc, ll = evaluate(model, data, args.method, args.sweeps, mft, args.seed)
        print(f"split={split} examples={len(data)} accuracy={acc:.6f} log_likelihood={ll:.6f}")
    return 0


def cmd_compare_phases(args) -> int:
    topo = load_topology(args.topology)
    model, meta = load_checkpoint(args.checkpoint, topo)
    data = _load_split(args.data_dir, "train", args.threshold, topo.label_replicas, args.subsample,
                       args.subsample_seed)
    if len(data) < args.batch_size:
        raise UsageError(f"--batch-size {args.batch_size} exceeds the {len(data)} available examples")
    batch = data[np.arange(args.batch_size)].visible
    cmp = compare_phases(model, batch, args.sweeps, MftConfig(tolerance=args.mft_tol), args.seed)
    print(f"epoch={meta['epoch']} sweeps={args.sweeps} mft_tolerance={args.mft_tol}")
    print("phase,method,relative_error_averages,relative_error_correlations")
    for (phase, method), (avg, corr) in cmp.errors().items():
        print(f"{phase},{method},{avg:.6g},{corr:.6g}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        for phase, group in (("positive", cmp.positive), ("negative", cmp.negative)):
            for method in ("nmft", "hmft"):
                hist = correlation_histogram(group[method], group["gibbs"], topo.edges, bins=args.bins)
                stem = os.path.join(args.out_dir, f"{phase}_{method}_epoch{meta['epoch']:04d}")
                with open(stem + "_histogram.csv", "w", encoding="utf-8") as fh:
                    fh.write(hist.histogram_csv())
                with open(stem + "_pairs.csv", "w", encoding="utf-8") as fh:
                    fh.write(hist.pairs_csv())
        print(f"histograms={args.out_dir} bins={args.bins}")
    return 0


def cmd_bench(args) -> int:
    from .sampler import SparseIsingModel

    topo = load_topology(args.topology)
    rng = np.random.default_rng(args.seed)
    model = SparseIsingModel(topo, rng.normal(0, 0.1, topo.edge_count), np.zeros(topo.node_count))
    report = benchmark_fps(model, args.duration, args.threads, args.sweeps, seed=args.seed, mode=args.mode)
    sys.stdout.write(f"mode={args.mode}\n" + report.to_text())
    return 0


def cmd_toy(args) -> int:
    from .sampler import SparseIsingModel
    from .topology import NodeRole, Topology

    topo = Topology(2, np.array([[0, 1]]), (NodeRole("hidden", 1),) * 2)
    model = SparseIsingModel(topo, np.array([args.weight]), np.zeros(2), args.beta)
    exact = exact_moments(model).correlations[0]
    nmft = nmft_moments(model, seed=args.seed).correlations[0]
    hmft = estimate_moments(model, None, "hmft", seed=args.seed).correlations[0]
    gibbs = run_chain(model, SpinState.random(2, args.seed), args.sweeps)[0].correlations[0]
    print(f"beta={args.beta} weight={args.weight}")
    for name, value in (("exact", exact), ("nmft", nmft), ("hmft", hmft), ("gibbs", gibbs)):
        print(f"{name}={value:.6f}")
    return 0


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6g}"


def _write_json(path: str, obj) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare-phases": cmd_compare_phases,
    "bench": cmd_bench,
    "toy": cmd_toy,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    _apply_env(parser)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConstructionError) as exc:
        print(f"spinforge {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, TopologyError, CheckpointError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"spinforge {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"spinforge {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ContractError as exc:
        print(f"spinforge {args.command}: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
