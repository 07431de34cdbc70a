"""Single-process federated training simulator.

Clients hold disjoint induced subgraphs of one global graph. Each round
samples a client subset, runs local full-batch epochs from a copy of the
global parameters, and aggregates with a node-count-weighted average.
No network transport: byte counts follow a 4-bytes-per-parameter wire
model for accounting only.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import ceil
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericsError
from .graphs import GraphDataset, _largest_remainder, build_normalized_laplacian, split_masks
from .model import ModelConfig, count_parameters, init_params
from .optim import AdamConfig, OptimizerState, ParamSet, init_optimizer
from .seeding import MASKS, PARTITION, SAMPLING, derive_seed, rng_for
from .spectral import SpectralBasis, sym_eig
from .training import EpochRecord, evaluate, run_epochs

logger = logging.getLogger(__name__)

BYTES_PER_PARAM = 4  # 32-bit wire model; training itself stays in 64-bit
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class FedConfig:
    model: ModelConfig
    optimizer: AdamConfig
    clients: int = 5
    alpha: float = 100.0
    rounds: int = 10
    local_epochs: int = 5
    fraction_fit: float = 1.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.clients < 1:
            raise ConfigError(f"clients={self.clients} must be >= 1")
        if not self.alpha > 0:
            raise ConfigError(f"alpha={self.alpha} must be positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.local_epochs < 0:
            raise ConfigError("local epochs must be >= 0")
        if not 0.0 < self.fraction_fit <= 1.0:
            raise ConfigError(f"fraction_fit={self.fraction_fit} outside (0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def participants_per_round(self) -> int:
        return max(1, ceil(self.fraction_fit * self.clients))


@dataclass
class ClientState:
    client_id: int
    dataset: GraphDataset
    basis: SpectralBasis
    node_count: int
    opt_state: OptimizerState | None = None


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    participants: tuple[int, ...]
    client_loss: dict[int, float]
    client_accuracy: dict[int, float]
    client_epoch_seconds: dict[int, float]
    global_loss: float
    global_accuracy: float
    round_bytes: int
    bytes_cum: int

    @property
    def mean_epoch_seconds(self) -> float:
        values = [s for s in self.client_epoch_seconds.values() if np.isfinite(s)]
        return float(np.mean(values)) if values else float("nan")


def dirichlet_partition(
    labels: np.ndarray, clients: int, alpha: float, seed: int
) -> list[np.ndarray]:
    """Assign node ids to clients by per-class Dirichlet proportions.

    Every node lands on exactly one client. A client left empty at
    extreme concentration receives one node from the largest client.
    """
    if clients < 1:
        raise ConfigError("clients must be >= 1")
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    labels = np.asarray(labels)
    rng = rng_for(seed, PARTITION)

    assigned: list[list[np.ndarray]] = [[] for _ in range(clients)]
    for cls in np.unique(labels):
        nodes = rng.permutation(np.flatnonzero(labels == cls))
        proportions = rng.dirichlet(np.full(clients, alpha))
        counts = _largest_remainder(len(nodes), proportions)
        start = 0
        for i, count in enumerate(counts):
            assigned[i].append(nodes[start : start + count])
            start += count

    parts = [np.concatenate(chunks) if chunks else np.array([], dtype=int)
             for chunks in assigned]
    sizes = np.array([len(p) for p in parts])
    while (sizes == 0).any():
        empty = int(np.argmin(sizes))
        donor = int(np.argmax(sizes))
        parts[empty] = parts[donor][-1:]
        parts[donor] = parts[donor][:-1]
        sizes = np.array([len(p) for p in parts])
        logger.warning(
            "client %d received no nodes; moved one node from client %d",
            empty,
            donor,
        )
    return parts


def induce_subgraph(
    dataset: GraphDataset, nodes: np.ndarray, mask_seed: int, name: str | None = None
) -> GraphDataset:
    """Subgraph on ``nodes`` with edges between them; masks re-split locally."""
    nodes = np.asarray(nodes)
    if nodes.size == 0:
        raise ConfigError("cannot induce a subgraph on an empty node list")
    if np.unique(nodes).size != nodes.size:
        raise ConfigError("duplicate node ids in subgraph selection")
    if nodes.min() < 0 or nodes.max() >= dataset.n:
        raise ConfigError("node id outside the graph")

    nodes = np.sort(nodes)
    labels = dataset.labels[nodes]
    train, val, test = split_masks(labels, SPLIT_FRACTIONS, mask_seed)
    return GraphDataset(
        n=nodes.size,
        adjacency=dataset.adjacency[np.ix_(nodes, nodes)],
        features=dataset.features[nodes],
        labels=labels,
        num_classes=dataset.num_classes,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        name=name or f"{dataset.name}/sub{nodes.size}",
    )


def sample_clients(clients: int, fraction: float, round_index: int, seed: int) -> np.ndarray:
    """Sorted participant ids for one round, |S| = max(1, ceil(K*m))."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction_fit={fraction} outside (0, 1]")
    size = max(1, ceil(fraction * clients))
    rng = rng_for(seed, SAMPLING, round_index)
    return np.sort(rng.choice(clients, size=size, replace=False))


def client_update(
    global_params: ParamSet,
    client: ClientState,
    config: FedConfig,
    epoch_offset: int,
) -> tuple[ParamSet | None, list[EpochRecord]]:
    """Run local epochs from a copy of the global parameters.

    Returns (updated params, per-epoch records), or (None, []) when a
    local step hits non-finite numbers; the optimizer state rolls back
    so a failed round leaves no trace.
    """
    local = global_params.copy()
    if client.opt_state is None:
        client.opt_state = init_optimizer(local, config.optimizer)
    state = client.opt_state.copy()
    try:
        records = run_epochs(
            client.dataset,
            client.basis,
            config.model,
            local,
            state,
            config.local_epochs,
            config.seed,
            epoch_offset,
        )
    except NumericsError as exc:
        logger.warning("client %d aborted this round: %s", client.client_id, exc)
        return None, []
    client.opt_state = state
    return local, records


def fedavg(param_sets: list[ParamSet], weights: list[float]) -> ParamSet:
    """Weighted average of parameter sets, weights normalized to sum 1.

    Anchored at the first participant so identical inputs average to
    themselves exactly.
    """
    if not param_sets:
        raise ConfigError("fedavg needs at least one parameter set")
    if len(param_sets) != len(weights):
        raise ConfigError("one weight per parameter set required")
    weights = np.asarray(weights, dtype=float)
    if (weights <= 0).any():
        raise ConfigError("weights must be positive")
    if len(param_sets) == 1:
        return param_sets[0].copy()
    names = param_sets[0].names()
    for other in param_sets[1:]:
        if other.names() != names:
            raise ConfigError("parameter sets disagree on names")
        for name in names:
            if other[name].shape != param_sets[0][name].shape:
                raise ConfigError(f"shape mismatch for {name}")

    scale = weights / weights.sum()
    result = param_sets[0].copy()
    for name in names:
        anchor = param_sets[0][name].data
        total = np.zeros_like(anchor)
        for s, other in zip(scale[1:], param_sets[1:]):
            total += s * (other[name].data - anchor)
        result[name].data[:] = anchor + total
    return result


def build_clients(dataset: GraphDataset, config: FedConfig) -> list[ClientState]:
    """Partition the graph and precompute each client's eigenbasis."""
    parts = dirichlet_partition(dataset.labels, config.clients, config.alpha, config.seed)
    clients = []
    for i, nodes in enumerate(parts):
        sub = induce_subgraph(
            dataset,
            nodes,
            derive_seed(config.seed, MASKS, i),
            name=f"{dataset.name}/client{i}",
        )
        basis = sym_eig(build_normalized_laplacian(sub), unit_band=True)
        clients.append(ClientState(i, sub, basis, node_count=sub.n))
    return clients


def evaluate_global(
    clients: list[ClientState], config: ModelConfig, params: ParamSet
) -> tuple[float, float]:
    """Test loss/accuracy over the union of client test masks.

    Each client is evaluated on its own subgraph; contributions are
    weighted by the client's test-node count.
    """
    total = 0
    loss_sum = 0.0
    acc_sum = 0.0
    for client in clients:
        count = int(client.dataset.test_mask.sum())
        if count == 0:
            continue
        loss, accuracy = evaluate(
            client.dataset, client.basis, config, params, client.dataset.test_mask
        )
        total += count
        loss_sum += count * loss
        acc_sum += count * accuracy
    if total == 0:
        return float("nan"), float("nan")
    return loss_sum / total, acc_sum / total


def run_rounds(
    dataset: GraphDataset, config: FedConfig, on_round=None
) -> tuple[ParamSet, list[RoundRecord], list[ClientState]]:
    """Full federated simulation: partition, round loop, aggregation.

    Deterministic given the seed: client updates may run on a thread
    pool, but aggregation always consumes results in client-id order.
    ``on_round(record, global_params)`` fires after each aggregation.
    """
    clients = build_clients(dataset, config)
    global_params = init_params(config.model, config.seed)
    param_count = count_parameters(config.model)
    records: list[RoundRecord] = []
    bytes_cum = 0

    for round_index in range(config.rounds):
        participants = sample_clients(
            config.clients, config.fraction_fit, round_index, config.seed
        )
        offset = round_index * config.local_epochs

        def update(cid: int):
            return client_update(global_params, clients[cid], config, offset)

        participants = [int(c) for c in participants]
        if config.threads == 1:
            results = {cid: update(cid) for cid in participants}
        else:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                futures = {cid: pool.submit(update, cid) for cid in participants}
                results = {cid: futures[cid].result() for cid in participants}

        survivors = [
            (cid, results[cid][0]) for cid in participants if results[cid][0] is not None
        ]
        if survivors:
            global_params = fedavg(
                [params for _, params in survivors],
                [clients[cid].node_count for cid, _ in survivors],
            )
        else:
            logger.warning("round %d: every participant failed; keeping params", round_index)

        client_loss, client_accuracy, client_seconds = {}, {}, {}
        for cid in participants:
            _, epochs = results[cid]
            client_loss[cid] = epochs[-1].loss if epochs else float("nan")
            client_accuracy[cid] = epochs[-1].accuracy if epochs else float("nan")
            client_seconds[cid] = (
                float(np.mean([e.seconds for e in epochs])) if epochs else float("nan")
            )

        global_loss, global_accuracy = evaluate_global(clients, config.model, global_params)
        round_bytes = 2 * len(participants) * BYTES_PER_PARAM * param_count
        bytes_cum += round_bytes
        records.append(
            RoundRecord(
                round_index=round_index,
                participants=tuple(participants),
                client_loss=client_loss,
                client_accuracy=client_accuracy,
                client_epoch_seconds=client_seconds,
                global_loss=global_loss,
                global_accuracy=global_accuracy,
                round_bytes=round_bytes,
                bytes_cum=bytes_cum,
            )
        )
        if on_round is not None:
            on_round(records[-1], global_params)
    return global_params, records, clients


def comm_accounting(config: ModelConfig) -> tuple[int, int]:
    """(parameter count, bytes per one-way transfer of the model)."""
    count = count_parameters(config)
    return count, param_bytes(count)


def param_bytes(count: int) -> int:
    return BYTES_PER_PARAM * count


def write_manifest(path, entries: dict) -> None:
    """Write run settings as sorted ``key=value`` lines.

    Values are rendered with repr for floats so a read-back reproduces
    them exactly; keys may not contain '='.
    """
    lines = []
    for key in sorted(entries):
        if "=" in key:
            raise ConfigError(f"manifest key {key!r} contains '='")
        value = entries[key]
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"manifest line without '=': {line!r}")
        key, _, value = line.partition("=")
        entries[key] = value
    return entries


def write_metrics_csv(path, records: list[RoundRecord]) -> None:
    """Per-round metrics: one row per participant plus one global row.

    epoch_seconds is wall-clock and therefore excluded from any
    bit-for-bit reproducibility guarantee; every other column is
    deterministic given the run seed in single-thread mode.
    """
    def fmt(x: float) -> str:
        return repr(float(x))

    rows = ["round,client_id,loss,accuracy,bytes_cum,epoch_seconds"]
    for rec in records:
        for cid in rec.participants:
            rows.append(
                f"{rec.round_index},{cid},{fmt(rec.client_loss[cid])},"
                f"{fmt(rec.client_accuracy[cid])},{rec.bytes_cum},"
                f"{fmt(rec.client_epoch_seconds[cid])}"
            )
        rows.append(
            f"{rec.round_index},global,{fmt(rec.global_loss)},"
            f"{fmt(rec.global_accuracy)},{rec.bytes_cum},"
            f"{fmt(rec.mean_epoch_seconds)}"
        )
    Path(path).write_text("\n".join(rows) + "\n")


def partition_stats(
    labels: np.ndarray, parts: list[np.ndarray], num_classes: int
) -> dict:
    """Histogram and skew statistics for one partition.

    Returns per-client class counts, per-client dominant-class share,
    and the mean total-variation distance between client label
    distributions and the global one.
    """
    labels = np.asarray(labels)
    counts = np.zeros((len(parts), num_classes))
    for i, nodes in enumerate(parts):
        for cls, num in zip(*np.unique(labels[nodes], return_counts=True)):
            counts[i, cls] = num
    totals = counts.sum(axis=1, keepdims=True)
    hist = counts / np.where(totals == 0, 1, totals)
    global_hist = np.bincount(labels, minlength=num_classes) / labels.size
    tv = 0.5 * np.abs(hist - global_hist).sum(axis=1)
    return {
        "counts": counts,
        "max_share": hist.max(axis=1),
        "mean_tv": float(tv.mean()),
    }
