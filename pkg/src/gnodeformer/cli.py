"""Command-line entry point.

Subcommands: gen-data, train, fed-train, partition-report, comm-report.
Every run writes a key=value manifest; rerunning with --from-manifest
reproduces the metrics (timing columns excepted) in single-thread mode.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerics.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, GnodeformerError, NumericsError
from .fedsim import (
    FedConfig,
    comm_accounting,
    dirichlet_partition,
    partition_stats,
    read_manifest,
    run_rounds,
    write_manifest,
    write_metrics_csv,
)
from .graphs import (
    GraphDataset,
    SbmConfig,
    build_normalized_laplacian,
    generate_sbm,
    homophily_ratio,
    load_dataset,
    save_dataset,
    split_masks,
)
from .model import ModelConfig, count_parameters, forward, write_filter_table
from .optim import AdamConfig, save_checkpoint
from .seeding import MASKS, derive_seed
from .spectral import load_or_compute
from .training import evaluate, train_centralized

logger = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)

# Manifest field parsers, by canonical key. Booleans are "true"/"false",
# empty string decodes to None.
_FIELDS = {
    "dataset": str,
    "sbm": str,
    "symmetrize": bool,
    "rk": int,
    "width": int,
    "heads": int,
    "layers": int,
    "hidden": int,
    "epsilon": float,
    "dropout": float,
    "activation": str,
    "freeze_rk_weights": bool,
    "lr": float,
    "weight_decay": float,
    "epochs": int,
    "patience": int,
    "seed": int,
    "clients": int,
    "alpha": float,
    "rounds": int,
    "local_epochs": int,
    "fraction_fit": float,
    "threads": int,
    "checkpoint_every": int,
}


def parse_sbm_spec(spec: str) -> SbmConfig:
    """Parse 'blocks=100,100,100;p_in=0.1;p_out=0.01[;key=value...]'.

    Optional keys: feature_dim, signal, seed.
    """
    entries = {}
    for chunk in spec.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise ConfigError(f"sbm spec chunk {chunk!r} is not key=value")
        key, _, value = chunk.partition("=")
        entries[key.strip()] = value.strip()
    missing = {"blocks", "p_in", "p_out"} - set(entries)
    if missing:
        raise ConfigError(f"sbm spec missing {sorted(missing)}")
    unknown = set(entries) - {"blocks", "p_in", "p_out", "feature_dim", "signal", "seed"}
    if unknown:
        raise ConfigError(f"sbm spec has unknown keys {sorted(unknown)}")
    try:
        blocks = tuple(int(b) for b in entries["blocks"].split(","))
        kwargs = dict(
            block_sizes=blocks,
            p_in=float(entries["p_in"]),
            p_out=float(entries["p_out"]),
        )
        if "feature_dim" in entries:
            kwargs["feature_dim"] = int(entries["feature_dim"])
        if "signal" in entries:
            kwargs["signal"] = float(entries["signal"])
        if "seed" in entries:
            kwargs["seed"] = int(entries["seed"])
    except ValueError as exc:
        raise ConfigError(f"bad sbm spec value: {exc}") from None
    return SbmConfig(**kwargs)


def load_source(args) -> GraphDataset:
    """Dataset from --sbm (generator masks) or --dataset (masks from run
    seed, matching client 0 of a single-client federation)."""
    if getattr(args, "sbm", None):
        return generate_sbm(parse_sbm_spec(args.sbm))
    if not getattr(args, "dataset", None):
        raise ConfigError("one of --dataset or --sbm is required")
    dataset = load_dataset(args.dataset, symmetrize=args.symmetrize)
    train, val, test = split_masks(
        dataset.labels, SPLIT_FRACTIONS, derive_seed(args.seed, MASKS, 0)
    )
    return replace(dataset, train_mask=train, val_mask=val, test_mask=test)


def model_config_from_args(args, dataset: GraphDataset) -> ModelConfig:
    return ModelConfig(
        feature_dim=dataset.feature_dim,
        classes=dataset.num_classes,
        d=args.width,
        heads=args.heads,
        layers=args.layers,
        rk_order=args.rk,
        epsilon=args.epsilon,
        hidden=args.hidden,
        dropout=args.dropout,
        activation=args.activation,
        learn_rk_weights=not args.freeze_rk_weights,
    )


def manifest_entries(args, command: str) -> dict:
    entries = {"command": command}
    for key in _FIELDS:
        if not hasattr(args, key):
            continue
        value = getattr(args, key)
        if value is None:
            value = ""
        elif isinstance(value, bool):
            value = "true" if value else "false"
        entries[key] = value
    return entries


def apply_manifest(args, path: str):
    """Overwrite config fields of ``args`` from a manifest file."""
    entries = read_manifest(path)
    command = entries.pop("command", None)
    if command != args.command:
        raise ConfigError(
            f"manifest was written by {command!r}, not {args.command!r}"
        )
    for key, raw in entries.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown manifest key {key!r}")
        if not hasattr(args, key):
            continue
        if raw == "":
            value = None
        elif _FIELDS[key] is bool:
            if raw not in ("true", "false"):
                raise ConfigError(f"manifest boolean {key}={raw!r}")
            value = raw == "true"
        else:
            try:
                value = _FIELDS[key](raw)
            except ValueError:
                raise ConfigError(f"manifest value {key}={raw!r}") from None
        setattr(args, key, value)
    return args


def _basis_for(dataset: GraphDataset, out: Path):
    lap = build_normalized_laplacian(dataset)
    return load_or_compute(lap, cache_dir=out / "eig_cache", unit_band=True)


def _write_central_csv(path: Path, history) -> None:
    rows = ["epoch,train_loss,train_accuracy,val_loss,val_accuracy,seconds"]
    for h in history:
        rows.append(
            f"{h.epoch},{h.train_loss!r},{h.train_accuracy!r},"
            f"{h.val_loss!r},{h.val_accuracy!r},{h.seconds!r}"
        )
    path.write_text("\n".join(rows) + "\n")


def cmd_gen_data(args) -> int:
    dataset = generate_sbm(parse_sbm_spec(args.sbm))
    out = Path(args.out)
    save_dataset(dataset, out)
    print(
        f"wrote {out}: n={dataset.n} edges={dataset.num_edges} "
        f"classes={dataset.num_classes} homophily={homophily_ratio(dataset):.4f}"
    )
    return 0


def cmd_train(args) -> int:
    if args.from_manifest:
        apply_manifest(args, args.from_manifest)
    dataset = load_source(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    basis = _basis_for(dataset, out)
    config = model_config_from_args(args, dataset)
    optimizer = AdamConfig(lr=args.lr, weight_decay=args.weight_decay)

    params, history = train_centralized(
        dataset, basis, config, optimizer,
        epochs=args.epochs, seed=args.seed, patience=args.patience,
    )

    _write_central_csv(out / "metrics.csv", history)
    save_checkpoint(params, out / "checkpoint.bin")
    _, gamma = forward(dataset, basis, config, params, training=False)
    write_filter_table(out / "filters.txt", basis.eigenvalues, gamma.data)
    write_manifest(out / "manifest.txt", manifest_entries(args, "train"))

    if dataset.test_mask.any():
        test_loss, test_accuracy = evaluate(
            dataset, basis, config, params, dataset.test_mask
        )
        print(f"test accuracy {test_accuracy:.4f} (loss {test_loss:.4f})")
    print(f"trained {len(history)} epochs; artifacts in {out}")
    return 0


def cmd_fed_train(args) -> int:
    if args.from_manifest:
        apply_manifest(args, args.from_manifest)
    dataset = load_source(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = FedConfig(
        model=model_config_from_args(args, dataset),
        optimizer=AdamConfig(lr=args.lr, weight_decay=args.weight_decay),
        clients=args.clients,
        alpha=args.alpha,
        rounds=args.rounds,
        local_epochs=args.local_epochs,
        fraction_fit=args.fraction_fit,
        seed=args.seed,
        threads=args.threads,
    )

    def on_round(record, global_params):
        logger.info(
            "round %d: accuracy=%.4f bytes_cum=%d",
            record.round_index, record.global_accuracy, record.bytes_cum,
        )
        every = args.checkpoint_every
        if every and (record.round_index + 1) % every == 0:
            save_checkpoint(
                global_params, out / f"checkpoint_round{record.round_index}.bin"
            )

    params, records, _ = run_rounds(dataset, config, on_round=on_round)
    write_metrics_csv(out / "metrics.csv", records)
    save_checkpoint(params, out / "checkpoint.bin")
    write_manifest(out / "manifest.txt", manifest_entries(args, "fed-train"))

    if records:
        last = records[-1]
        print(
            f"round {last.round_index}: global accuracy {last.global_accuracy:.4f}, "
            f"{last.bytes_cum} bytes transferred"
        )
    print(f"ran {len(records)} rounds; artifacts in {out}")
    return 0


def cmd_partition_report(args) -> int:
    dataset = load_source(args)
    classes = dataset.num_classes
    header = ["seed", "client_id", "nodes"]
    header += [f"class{c}" for c in range(classes)]
    header.append("max_share")
    rows = [",".join(header)]
    tvs, max_shares = [], []
    for seed in range(args.seed, args.seed + args.seeds):
        parts = dirichlet_partition(dataset.labels, args.clients, args.alpha, seed)
        stats = partition_stats(dataset.labels, parts, classes)
        tvs.append(stats["mean_tv"])
        max_shares.append(stats["max_share"].mean())
        for cid in range(args.clients):
            counts = stats["counts"][cid].astype(int)
            row = [str(seed), str(cid), str(int(counts.sum()))]
            row += [str(c) for c in counts]
            row.append(repr(float(stats["max_share"][cid])))
            rows.append(",".join(row))
    table = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(table)
    else:
        print(table, end="")
    print(f"mean_max_share={float(np.mean(max_shares))!r}")
    print(f"mean_tv={float(np.mean(tvs))!r}")
    return 0


def cmd_comm_report(args) -> int:
    rows = []
    for spec in args.spec:
        if "=" not in spec or "," not in spec.partition("=")[2]:
            raise ConfigError(f"--spec {spec!r}; expected name=feature_dim,classes")
        name, _, rest = spec.partition("=")
        f_text, _, c_text = rest.partition(",")
        try:
            feature_dim, classes = int(f_text), int(c_text)
        except ValueError:
            raise ConfigError(f"--spec {spec!r} has non-integer sizes") from None
        config = ModelConfig(
            feature_dim=feature_dim,
            classes=classes,
            d=args.width,
            heads=args.heads,
            layers=args.layers,
            rk_order=args.rk,
            epsilon=args.epsilon,
            hidden=args.hidden,
            activation=args.activation,
        )
        count, nbytes = comm_accounting(config)
        rows.append((name, count, nbytes))
    print("name,params,bytes")
    for name, count, nbytes in sorted(rows):
        print(f"{name},{count},{nbytes}")
    return 0


def _add_source_flags(parser, require=True):
    group = parser.add_mutually_exclusive_group(required=require)
    group.add_argument("--dataset", help="dataset directory (graph text format)")
    group.add_argument("--sbm", help="synthetic graph spec, e.g. "
                       "'blocks=100,100,100;p_in=0.1;p_out=0.01'")
    parser.add_argument("--symmetrize", action="store_true",
                        help="repair asymmetric adjacency on load")


def _add_model_flags(parser):
    parser.add_argument("--rk", type=int, default=2, choices=(1, 2, 4),
                        help="integration order per block")
    parser.add_argument("--width", type=int, default=16, help="model width d")
    parser.add_argument("--heads", type=int, default=2)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--hidden", type=int, default=64,
                        help="convolution head hidden width")
    parser.add_argument("--epsilon", type=float, default=100.0,
                        help="eigenvalue encoding scale")
    parser.add_argument("--dropout", type=float, default=0.0)
    parser.add_argument("--activation", default="relu",
                        choices=("relu", "gelu", "tanh"))
    parser.add_argument("--freeze-rk-weights", action="store_true",
                        help="keep classical stage weights fixed")


def _add_optim_flags(parser):
    parser.add_argument("--lr", type=float, default=0.01)
    parser.add_argument("--weight-decay", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gnodeformer",
        description="Spectral graph transformer with a federated simulator.",
    )
    parser.add_argument("--verbose", action="store_true",
                        help="log per-round/per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save a synthetic graph")
    p.add_argument("--sbm", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="centralized training")
    _add_source_flags(p, require=False)
    _add_model_flags(p)
    _add_optim_flags(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=None,
                   help="early-stop after this many non-improving epochs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--from-manifest", help="replay settings from a manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fed-train", help="federated simulation")
    _add_source_flags(p, require=False)
    _add_model_flags(p)
    _add_optim_flags(p)
    p.add_argument("--clients", type=int, default=5)
    p.add_argument("--alpha", type=float, default=100.0)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--local-epochs", type=int, default=5)
    p.add_argument("--fraction-fit", type=float, default=1.0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="save the global model every k rounds (0: only final)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--from-manifest", help="replay settings from a manifest")
    p.set_defaults(func=cmd_fed_train)

    p = sub.add_parser("partition-report",
                       help="class histograms and skew across partition seeds")
    _add_source_flags(p)
    p.add_argument("--clients", type=int, default=5)
    p.add_argument("--alpha", type=float, default=100.0)
    p.add_argument("--seeds", type=int, default=10,
                   help="number of partition seeds to sample")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--out", help="write the CSV here instead of stdout")
    p.set_defaults(func=cmd_partition_report)

    p = sub.add_parser("comm-report", help="parameter and byte counts per config")
    p.add_argument("--spec", action="append", required=True,
                   help="name=feature_dim,classes (repeatable)")
    _add_model_flags(p)
    p.set_defaults(func=cmd_comm_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return 4
    except GnodeformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
