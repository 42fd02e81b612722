"""
Client-local unlearning by random relabeling

The requesting client assigns every sample of its forget set a label drawn
uniformly from the other classes, trains a copy of the global θ_P on

    L = Σ_retain ℓ(θ_P; x, y) + λ · Σ_forget ℓ(θ_P; x, ŷ)

and the server adopts the result directly, without averaging.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from feddpg.config import UnlearnConfig
from feddpg.data import TokenizedDataset
from feddpg.errors import ContractError
from feddpg.federation import (
    ClientState,
    FederatedSimulation,
    ServerState,
    Transport,
    evaluate_global,
)
from feddpg.generator import GeneratorParams, PromptedClassifier, sgd_step
from feddpg.tensor import Tensor, add, backward, mul
from feddpg.utils.format_utils import format_change_safe, format_metrics_safe

logger = logging.getLogger(__name__)

_UNLEARN_STREAM = 0xF06E


@dataclass
class UnlearnRequest:
    """Which client forgets what, and how hard"""

    client_id: int
    forget_fraction: float = 0.2
    # Explicit shard positions; overrides forget_fraction when given
    forget_indices: Optional[List[int]] = None
    reg_lambda: float = 1.0
    unlearn_epochs: int = 5
    lr: float = 0.05
    batch_size: int = 8
    # None uses the forget-set size
    retain_sample_count: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.reg_lambda < 0:
            raise ContractError("unlearning lambda must be non-negative")
        if self.forget_indices is None and not 0.0 < self.forget_fraction <= 1.0:
            raise ContractError("forget_fraction must be in (0, 1]")
        if self.unlearn_epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ContractError("unlearn_epochs/lr must be >= 0 and batch_size >= 1")

    @classmethod
    def from_config(cls, cfg: UnlearnConfig, client_id: int, seed: int) -> "UnlearnRequest":
        return cls(
            client_id=client_id,
            forget_fraction=cfg.forget_fraction,
            reg_lambda=cfg.reg_lambda,
            unlearn_epochs=cfg.unlearn_epochs,
            lr=cfg.lr,
            batch_size=cfg.batch_size,
            retain_sample_count=cfg.retain_sample_count,
            seed=seed,
        )


@dataclass(frozen=True)
class RelabeledSample:
    tokens: Tuple[int, ...]
    label: int
    new_label: int

    def __post_init__(self):
        if self.new_label == self.label:
            raise ContractError(f"relabeled sample kept its label {self.label}")


def relabel(
    samples: TokenizedDataset, num_classes: int, rng: np.random.Generator
) -> List[RelabeledSample]:
    """
    Give every sample a label drawn uniformly from the K−1 other classes

    Draws r ∈ [0, K−2] and shifts it past the original label.
    """
    if num_classes < 2:
        raise ContractError("relabeling needs at least two classes")
    labels = samples.label_array
    if np.any(labels >= num_classes):
        raise ContractError(f"sample labels exceed the label space of {num_classes} classes")
    draws = rng.integers(0, num_classes - 1, size=labels.shape[0])
    new_labels = draws + (draws >= labels)
    return [
        RelabeledSample(tuple(seq), int(y), int(y_new))
        for seq, y, y_new in zip(samples.sequences, labels, new_labels)
    ]


@dataclass
class ForgetRetainSplit:
    """Forget set (original and relabeled targets) and retained correct samples"""

    forget_indices: List[int]
    retain_indices: List[int]
    forget: TokenizedDataset
    relabeled: TokenizedDataset
    retain: TokenizedDataset


def select_forget_retain(
    shard: TokenizedDataset, request: UnlearnRequest, num_classes: int
) -> ForgetRetainSplit:
    """
    Draw the forget set and a retain sample from the shard, then relabel

    The retain sample is drawn uniformly from the shard minus the forget set.
    """
    n = len(shard)
    rng = np.random.default_rng([request.seed, request.client_id, _UNLEARN_STREAM])

    if request.forget_indices is not None:
        forget_idx = sorted(set(int(i) for i in request.forget_indices))
        if any(i < 0 or i >= n for i in forget_idx):
            raise ContractError(f"forget indices fall outside the shard of {n} samples")
    else:
        count = min(n, max(1, int(round(request.forget_fraction * n)))) if n else 0
        forget_idx = sorted(rng.choice(n, size=count, replace=False).tolist()) if count else []
    if not forget_idx:
        raise ContractError(f"client {request.client_id} has an empty forget set")

    forget_set = set(forget_idx)
    pool = [i for i in range(n) if i not in forget_set]
    wanted = request.retain_sample_count
    if wanted is None:
        wanted = len(forget_idx)
    take = min(wanted, len(pool))
    if take < wanted:
        logger.warning(f"Client {request.client_id}: only {take} retain samples available")
    retain_idx = sorted(rng.choice(pool, size=take, replace=False).tolist()) if take else []

    forget = shard.subset(forget_idx)
    relabeled = relabel(forget, num_classes, rng)
    return ForgetRetainSplit(
        forget_indices=forget_idx,
        retain_indices=retain_idx,
        forget=forget,
        relabeled=forget.with_labels([s.new_label for s in relabeled]),
        retain=shard.subset(retain_idx),
    )


def unlearning_objective(
    model: PromptedClassifier,
    params: GeneratorParams,
    retain: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]],
    forget: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]],
    reg_lambda: float,
) -> Tensor:
    """
    Retain-set loss plus λ times the relabeled forget-set loss

    Each batch is an (ids, mask, labels) triple. At λ = 0 the forget term is
    not evaluated, so the result is exactly the retain-set loss.
    """
    terms = []
    if retain is not None and len(retain[2]):
        terms.append(model.forward_loss(params, *retain)[0])
    if reg_lambda != 0 and forget is not None and len(forget[2]):
        forget_loss = model.forward_loss(params, *forget)[0]
        terms.append(forget_loss if reg_lambda == 1 else mul(forget_loss, Tensor(reg_lambda)))
    if not terms:
        raise ContractError("unlearning objective has no samples")
    return terms[0] if len(terms) == 1 else add(terms[0], terms[1])


@dataclass
class UnlearnResult:
    client_id: int
    params: GeneratorParams
    split: ForgetRetainSplit
    epoch_losses: List[float] = field(default_factory=list)


def _rows(dataset: TokenizedDataset, idx: np.ndarray):
    if idx.size == 0:
        return None
    ids, mask = dataset.arrays()
    return ids[idx], mask[idx], dataset.label_array[idx]


def local_unlearn(
    client: ClientState,
    global_params: GeneratorParams,
    request: UnlearnRequest,
    model: PromptedClassifier,
    split: Optional[ForgetRetainSplit] = None,
) -> UnlearnResult:
    """
    Minimize the unlearning objective on a copy of the global θ_P

    Retain and relabeled forget samples are visited in parallel minibatches;
    each step descends the objective summed over both batches.
    """
    if request.client_id != client.client_id:
        raise ContractError(
            f"request for client {request.client_id} sent to client {client.client_id}"
        )
    split = split or select_forget_retain(client.shard, request, model.encoder.config.num_classes)
    if len(split.forget) == 0:
        raise ContractError(f"client {client.client_id} has an empty forget set")

    params = global_params.copy()
    rng = np.random.default_rng([request.seed, client.client_id, _UNLEARN_STREAM, 1])
    nf, nr, b = len(split.relabeled), len(split.retain), request.batch_size
    steps = -(-max(nf, nr) // b)

    epoch_losses = []
    for _ in range(request.unlearn_epochs):
        forget_order, retain_order = rng.permutation(nf), rng.permutation(nr)
        total = 0.0
        for step in range(steps):
            fb = forget_order[step * b : (step + 1) * b]
            rb = retain_order[step * b : (step + 1) * b]
            forget_rows = _rows(split.relabeled, fb)
            retain_rows = _rows(split.retain, rb)
            if len(rb) == 0 and (len(fb) == 0 or request.reg_lambda == 0):
                continue
            loss = unlearning_objective(model, params, retain_rows, forget_rows, request.reg_lambda)
            total += loss.item()
            record = backward(loss)
            sgd_step(params, request.lr)
            record.clear()
        epoch_losses.append(total)

    if epoch_losses:
        logger.info(
            f"Client {client.client_id} unlearned {nf} samples with {nr} retained: "
            f"objective {epoch_losses[0]:.4f} -> {epoch_losses[-1]:.4f}"
        )
    return UnlearnResult(client.client_id, params, split, epoch_losses)


def server_replace(
    server: ServerState,
    params: GeneratorParams,
    transport: Optional[Transport] = None,
    client_id: Optional[int] = None,
) -> ServerState:
    """
    Adopt the unlearned θ_P as the new global θ_P, bit for bit

    No other client participates; the round counter advances by one.
    """
    if params.structure() != server.global_generator.structure():
        raise ContractError(
            f"unlearned parameters {params.structure()} do not match the global generator"
        )
    if transport is not None:
        if client_id is None:
            raise ContractError("an upload through the transport needs the client id")
        params = transport.upload(params, client_id, server.round + 1)
    else:
        params = params.copy()
    server.advance(params)
    return server


@dataclass
class ClientAccuracy:
    client_id: int
    before: float
    after: float

    @property
    def delta(self) -> float:
        return self.after - self.before


@dataclass
class UnlearnReport:
    """Before/after evaluation of an unlearning request"""

    client_id: int
    forget_size: int
    retain_size: int
    reg_lambda: float
    forget_accuracy_before: float
    forget_accuracy_after: float
    # [initial, before, after] when the initial accuracy is known
    global_accuracy: List[float]
    per_client: List[ClientAccuracy] = field(default_factory=list)
    global_digest_after: str = ""

    @property
    def forget_delta(self) -> float:
        return self.forget_accuracy_after - self.forget_accuracy_before

    @property
    def global_delta(self) -> float:
        return self.global_accuracy[-1] - self.global_accuracy[-2]

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["forget_delta"] = self.forget_delta
        data["global_delta"] = self.global_delta
        for entry, client in zip(data["per_client"], self.per_client):
            entry["delta"] = client.delta
        return data


def evaluate_forgetting(
    before: GeneratorParams,
    after: GeneratorParams,
    forget_set: TokenizedDataset,
    global_test: TokenizedDataset,
    per_client_tests: Dict[int, TokenizedDataset],
    model: PromptedClassifier,
    client_id: int,
    retain_size: int = 0,
    reg_lambda: float = 0.0,
    initial_accuracy: Optional[float] = None,
    batch_size: int = 256,
) -> UnlearnReport:
    """
    Accuracy before and after unlearning on the forget set (original labels),
    the global test set and each listed client's private test split
    """

    def acc(params: GeneratorParams, data: TokenizedDataset) -> float:
        return evaluate_global(params, data, model, batch_size)

    global_points = [acc(before, global_test), acc(after, global_test)]
    if initial_accuracy is not None:
        global_points.insert(0, float(initial_accuracy))

    report = UnlearnReport(
        client_id=client_id,
        forget_size=len(forget_set),
        retain_size=retain_size,
        reg_lambda=reg_lambda,
        forget_accuracy_before=acc(before, forget_set),
        forget_accuracy_after=acc(after, forget_set),
        global_accuracy=global_points,
        per_client=[
            ClientAccuracy(cid, acc(before, data), acc(after, data))
            for cid, data in sorted(per_client_tests.items())
        ],
        global_digest_after=after.digest(),
    )
    logger.info(
        "Unlearning change: "
        + format_change_safe(
            {"forget_acc": report.forget_accuracy_before, "global_acc": global_points[-2]},
            {"forget_acc": report.forget_accuracy_after, "global_acc": global_points[-1]},
        )
    )
    return report


def perform_unlearning(
    simulation: FederatedSimulation, request: UnlearnRequest
) -> Tuple[UnlearnResult, GeneratorParams]:
    """
    Run one unlearning request against a simulation's current global θ_P

    The client receives θ_P over the transport, unlearns locally and the
    server replaces its global θ_P with the upload. Returns the client's
    result and the global θ_P from before the request.
    """
    server = simulation.server
    if not 0 <= request.client_id < len(simulation.clients):
        raise ContractError(f"unknown client {request.client_id}")
    client = simulation.clients[request.client_id]
    before = server.global_generator.copy()

    received = simulation.transport.broadcast(
        server.global_generator, client.client_id, server.round + 1
    )
    result = local_unlearn(client, received, request, simulation.model)
    server_replace(server, result.params, simulation.transport, client.client_id)
    client.local_generator = result.params

    if simulation.model.encoder.digest() != server.encoder_digest:
        raise ContractError("encoder parameters changed during unlearning")
    logger.info(
        f"Server replaced the global generator with client {client.client_id}'s update: "
        + format_metrics_safe(
            {"round": server.round, "digest": server.global_generator.digest()[:12]}
        )
    )
    return result, before
