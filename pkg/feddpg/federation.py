"""
Centralized federated orchestration

A server holds the global generator parameters θ_P; each round it selects a
subset of clients, broadcasts θ_P, lets every selected client train locally
on its private shard, and replaces θ_P with the unweighted mean of the
uploaded copies. The frozen encoder never changes and is never transmitted.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from feddpg.config import PARTITION_SCHEMES, RoundConfig
from feddpg.data import TokenizedDataset
from feddpg.errors import AggregationError, ContractError, PartitionError
from feddpg.generator import (
    GENERATOR_KIND,
    GeneratorParams,
    PromptedClassifier,
    init_generator,
    sgd_step,
)
from feddpg.serialization import deserialize_params
from feddpg.tensor import backward
from feddpg.utils.format_utils import format_metrics_safe
from feddpg.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

_PARTITION_STREAM = 0x9A27
_SELECTION_STREAM = 0x5E1C
_MAX_PARTITION_RETRIES = 100


@dataclass
class ClientState:
    """One client: a private shard, its own seed and its last local θ_P"""

    client_id: int
    shard: TokenizedDataset
    seed: int
    local_generator: Optional[GeneratorParams] = None


@dataclass
class ServerState:
    """Global θ_P and the round counter"""

    global_generator: GeneratorParams
    encoder_digest: str
    seed: int
    round: int = 0

    def advance(self, params: GeneratorParams) -> None:
        if params.structure() != self.global_generator.structure():
            raise AggregationError("new global parameters do not match the generator structure")
        self.global_generator = params
        self.round += 1


@dataclass
class RoundMetrics:
    """Metrics of one completed round (round 0 is the initial evaluation)"""

    round: int
    selected: List[int] = field(default_factory=list)
    aggregated: List[int] = field(default_factory=list)
    accuracy: Optional[float] = None
    mean_loss: Optional[float] = None
    bytes_transmitted: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class LocalResult:
    """What a client hands back after local training"""

    client_id: int
    params: GeneratorParams
    num_samples: int
    # Mean per-sample loss of each local epoch
    epoch_losses: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.epoch_losses[-1] if self.epoch_losses else None


@dataclass
class Transfer:
    round: int
    direction: str
    client_id: int
    payload_type: str
    num_bytes: int


class Transport:
    """
    Instrumented channel between server and clients

    Every payload crosses as serialized bytes and is decoded on the other
    side, so no object is ever shared by reference. Each transfer is logged
    with its direction, payload type and size.
    """

    def __init__(self):
        self.transfers: List[Transfer] = []

    def _send(self, params: GeneratorParams, direction: str, client_id: int, round_t: int):
        if not isinstance(params, GeneratorParams):
            raise ContractError(
                f"only generator parameters may cross the transport, got {type(params).__name__}"
            )
        blob = params.serialize()
        kind, arrays = deserialize_params(blob)
        if kind != GENERATOR_KIND:
            raise ContractError(f"unexpected payload kind {kind!r}")
        self.transfers.append(
            Transfer(round_t, direction, client_id, type(params).__name__, len(blob))
        )
        return GeneratorParams.from_arrays(arrays)

    def broadcast(self, params: GeneratorParams, client_id: int, round_t: int) -> GeneratorParams:
        return self._send(params, "down", client_id, round_t)

    def upload(self, params: GeneratorParams, client_id: int, round_t: int) -> GeneratorParams:
        return self._send(params, "up", client_id, round_t)

    def bytes_for_round(self, round_t: int) -> int:
        return sum(t.num_bytes for t in self.transfers if t.round == round_t)

    @property
    def total_bytes(self) -> int:
        return sum(t.num_bytes for t in self.transfers)

    def payload_types(self, direction: Optional[str] = None) -> set:
        return {t.payload_type for t in self.transfers if direction in (None, t.direction)}


# Partitioning


def partition_indices(
    labels: Sequence[int],
    num_clients: int,
    scheme: str = "iid",
    seed: int = 0,
    alpha: float = 1.0,
) -> List[List[int]]:
    """
    Split sample indices into ``num_clients`` disjoint, sorted index lists

    iid: seeded permutation cut into contiguous near-equal parts, the
    remainder going to the lowest client ids.
    label_skew: per class, Dirichlet(α) proportions over clients; redrawn
    until every client holds at least one sample.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if num_clients < 1:
        raise PartitionError("num_clients must be positive")
    if n < num_clients:
        raise PartitionError(f"cannot split {n} samples across {num_clients} clients")
    if scheme not in PARTITION_SCHEMES:
        raise PartitionError(f"unknown partition scheme {scheme!r}")
    rng = np.random.default_rng([seed, _PARTITION_STREAM])

    if scheme == "iid":
        order = rng.permutation(n)
        return [sorted(part.tolist()) for part in np.array_split(order, num_clients)]

    if alpha <= 0:
        raise PartitionError("dirichlet alpha must be positive")
    classes = np.unique(labels)
    for attempt in range(_MAX_PARTITION_RETRIES):
        buckets: List[List[int]] = [[] for _ in range(num_clients)]
        for k in classes:
            idx_k = np.flatnonzero(labels == k)
            rng.shuffle(idx_k)
            props = rng.dirichlet(np.full(num_clients, alpha))
            # Clients already holding their fair share take no more
            props = props * np.array([len(b) < n / num_clients for b in buckets])
            if props.sum() == 0:
                props = np.full(num_clients, 1.0)
            props = props / props.sum()
            cuts = (np.cumsum(props) * len(idx_k)).astype(int)[:-1]
            for bucket, part in zip(buckets, np.split(idx_k, cuts)):
                bucket.extend(part.tolist())
        if min(len(b) for b in buckets) >= 1:
            if attempt:
                logger.debug(f"label_skew partition needed {attempt + 1} draws")
            return [sorted(b) for b in buckets]
    raise PartitionError(
        f"label_skew(alpha={alpha}) left a client empty after {_MAX_PARTITION_RETRIES} draws"
    )


def partition(
    dataset: TokenizedDataset,
    num_clients: int,
    scheme: str = "iid",
    seed: int = 0,
    alpha: float = 1.0,
) -> List[TokenizedDataset]:
    """Disjoint client shards whose union is ``dataset``"""
    parts = partition_indices(dataset.labels, num_clients, scheme, seed, alpha)
    return [dataset.subset(idx) for idx in parts]


# Rounds


def select_clients(num_clients: int, ratio: float, seed: int, round_t: int) -> List[int]:
    """
    round(ratio·N) distinct client ids drawn uniformly, seeded by (seed, t)

    Returned in ascending order.
    """
    count = int(round(ratio * num_clients))
    if not 1 <= count <= num_clients:
        raise ContractError(f"selection ratio {ratio} picks {count} of {num_clients} clients")
    rng = np.random.default_rng([seed, round_t, _SELECTION_STREAM])
    return sorted(rng.choice(num_clients, size=count, replace=False).tolist())


def local_train(
    client: ClientState,
    global_params: GeneratorParams,
    round_cfg: RoundConfig,
    model: PromptedClassifier,
    round_t: int,
) -> Optional[LocalResult]:
    """
    Train a copy of θ_P on the client's shard with minibatch gradient descent

    Each step descends the cross-entropy summed over the batch; batch order
    is drawn from the client's own (seed, t) stream. A client with an empty shard
    is skipped and returns None.
    """
    n = len(client.shard)
    if n == 0:
        logger.warning(f"Client {client.client_id} has an empty shard; skipping round {round_t}")
        return None

    params = global_params.copy()
    ids, mask = client.shard.arrays()
    labels = client.shard.label_array
    rng = np.random.default_rng([client.seed, round_t])

    epoch_losses = []
    for _ in range(round_cfg.local_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, round_cfg.batch_size):
            batch = order[start : start + round_cfg.batch_size]
            loss, _ = model.forward_loss(params, ids[batch], mask[batch], labels[batch])
            total += loss.item()
            record = backward(loss)
            sgd_step(params, round_cfg.lr)
            record.clear()
        epoch_losses.append(total / n)

    return LocalResult(client.client_id, params, n, epoch_losses)


def aggregate(updates: Sequence[Tuple[int, GeneratorParams]]) -> GeneratorParams:
    """
    Unweighted element-wise mean of client updates

    Updates are combined in ascending client-id order with a running mean
    m_k = m_{k-1} + (u_k − m_{k-1}) / k, so identical updates reproduce the
    input bit for bit. Shard sizes play no role.
    """
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u[0])
    first_id, first = ordered[0]
    structure = first.structure()
    mean = first.arrays()
    for k, (client_id, params) in enumerate(ordered[1:], start=2):
        if params.structure() != structure:
            raise AggregationError(
                f"update structure {params.structure()} does not match {structure}",
                client_id=client_id,
            )
        for name, arr in params.arrays().items():
            mean[name] += (arr - mean[name]) / k
    for name, arr in mean.items():
        if not np.all(np.isfinite(arr)):
            raise AggregationError(f"aggregated tensor {name} is not finite")
    return GeneratorParams.from_arrays(mean)


def evaluate_global(
    params: GeneratorParams,
    test_set: TokenizedDataset,
    model: PromptedClassifier,
    batch_size: int = 256,
) -> float:
    """Fraction of test samples whose argmax prediction equals the label"""
    if len(test_set) == 0:
        raise ContractError("cannot evaluate on an empty test set")
    ids, mask = test_set.arrays()
    preds = model.predict(params, ids, mask, batch_size)
    return float(np.mean(preds == test_set.label_array))


ClientTrainer = Callable[
    [int, List[Tuple[ClientState, GeneratorParams]]], List[Optional[LocalResult]]
]


def train_sequential(
    round_cfg: RoundConfig, model: PromptedClassifier
) -> ClientTrainer:
    """Trainer that runs every selected client in the calling process"""

    def train(round_t: int, jobs: List[Tuple[ClientState, GeneratorParams]]):
        return [local_train(c, p, round_cfg, model, round_t) for c, p in jobs]

    return train


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    round_cfg: RoundConfig,
    model: PromptedClassifier,
    transport: Transport,
    test_set: Optional[TokenizedDataset] = None,
    trainer: Optional[ClientTrainer] = None,
    eval_batch_size: int = 256,
) -> RoundMetrics:
    """
    select → broadcast → local training → upload → aggregate → t+1

    Clients with empty shards take no part in the round and are not counted
    in the mean.
    """
    start_time = time.time()
    round_t = server.round + 1
    selected = select_clients(len(clients), round_cfg.selection_ratio, server.seed, round_t)
    trainer = trainer or train_sequential(round_cfg, model)

    jobs = []
    for cid in selected:
        client = clients[cid]
        if len(client.shard) == 0:
            logger.warning(f"Client {cid} has an empty shard; excluded from round {round_t}")
            continue
        jobs.append((client, transport.broadcast(server.global_generator, cid, round_t)))

    results = [r for r in trainer(round_t, jobs) if r is not None]
    if not results:
        raise AggregationError(f"round {round_t}: no selected client returned an update")

    updates = []
    for result in sorted(results, key=lambda r: r.client_id):
        uploaded = transport.upload(result.params, result.client_id, round_t)
        clients[result.client_id].local_generator = result.params
        updates.append((result.client_id, uploaded))

    server.advance(aggregate(updates))
    if model.encoder.digest() != server.encoder_digest:
        raise ContractError(f"encoder parameters changed during round {round_t}")

    losses = [r.final_loss for r in results if r.final_loss is not None]
    metrics = RoundMetrics(
        round=round_t,
        selected=selected,
        aggregated=[cid for cid, _ in updates],
        mean_loss=float(np.mean(losses)) if losses else None,
        bytes_transmitted=transport.bytes_for_round(round_t),
    )
    if test_set is not None and len(test_set) > 0:
        metrics.accuracy = evaluate_global(
            server.global_generator, test_set, model, eval_batch_size
        )
    metrics.wall_time = time.time() - start_time
    logger.debug(
        f"Round {round_t}: "
        + format_metrics_safe(
            {
                "accuracy": metrics.accuracy,
                "mean_loss": metrics.mean_loss,
                "bytes": metrics.bytes_transmitted,
            }
        )
    )
    return metrics


class FederatedSimulation:
    """
    Server, clients and transport for one federated run

    Shards come from ``partition``; client seeds and the initial θ_P are
    derived from ``seed``.
    """

    def __init__(
        self,
        model: PromptedClassifier,
        train_set: TokenizedDataset,
        round_cfg: RoundConfig,
        seed: int,
        initial_params: Optional[GeneratorParams] = None,
        trainer: Optional[ClientTrainer] = None,
        eval_batch_size: int = 256,
    ):
        self.model = model
        self.round_cfg = round_cfg
        self.seed = seed
        self.eval_batch_size = eval_batch_size
        self.trainer = trainer

        shards = partition(
            train_set,
            round_cfg.num_clients,
            round_cfg.partition,
            seed,
            round_cfg.dirichlet_alpha,
        )
        self.clients = [
            ClientState(cid, shard, derive_seed(seed, f"client-{cid}"))
            for cid, shard in enumerate(shards)
        ]
        params = initial_params if initial_params is not None else init_generator(model.cfg, seed)
        self.server = ServerState(params, encoder_digest=model.encoder.digest(), seed=seed)
        self.transport = Transport()
        self.history: List[RoundMetrics] = []

        logger.info(
            f"Federation ready: {len(self.clients)} clients, "
            f"{round_cfg.clients_per_round} per round, "
            f"{params.num_values()} trainable values ({params.serialized_size()} bytes)"
        )

    @property
    def global_params(self) -> GeneratorParams:
        return self.server.global_generator

    def evaluate(self, test_set: TokenizedDataset) -> float:
        return evaluate_global(self.global_params, test_set, self.model, self.eval_batch_size)

    def initial_metrics(self, test_set: Optional[TokenizedDataset] = None) -> RoundMetrics:
        """Round-0 row: evaluation of the initial θ_P, nothing transmitted"""
        metrics = RoundMetrics(round=self.server.round)
        if test_set is not None and len(test_set) > 0:
            metrics.accuracy = self.evaluate(test_set)
        self.history.append(metrics)
        return metrics

    def run_round(self, test_set: Optional[TokenizedDataset] = None) -> RoundMetrics:
        metrics = run_round(
            self.server,
            self.clients,
            self.round_cfg,
            self.model,
            self.transport,
            test_set=test_set,
            trainer=self.trainer,
            eval_batch_size=self.eval_batch_size,
        )
        self.history.append(metrics)
        return metrics

    def run(self, rounds: int, test_set: Optional[TokenizedDataset] = None) -> List[RoundMetrics]:
        return [self.run_round(test_set) for _ in range(rounds)]

    @property
    def total_bytes(self) -> int:
        return self.transport.total_bytes
