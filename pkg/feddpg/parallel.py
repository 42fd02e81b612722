"""
Process-based parallel local training
"""

import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from feddpg.config import GeneratorConfig, RoundConfig
from feddpg.encoder import FrozenEncoder
from feddpg.errors import FedDPGError
from feddpg.federation import ClientState, LocalResult, local_train
from feddpg.generator import GeneratorParams, PromptedClassifier

logger = logging.getLogger(__name__)


@dataclass
class SerializableResult:
    """Local training result that can be pickled and sent between processes"""

    client_id: int
    arrays: Optional[Dict[str, np.ndarray]] = None
    num_samples: int = 0
    epoch_losses: List[float] = field(default_factory=list)
    train_time: float = 0.0
    skipped: bool = False
    error: Optional[str] = None


def _worker_init(
    encoder: FrozenEncoder,
    generator_config: GeneratorConfig,
    round_config: RoundConfig,
    clients: Sequence[ClientState],
) -> None:
    """Initialize worker process with the frozen encoder and every client shard"""
    global _worker_model
    global _worker_round_config
    global _worker_clients

    _worker_model = PromptedClassifier(encoder, generator_config)
    _worker_round_config = round_config
    _worker_clients = {c.client_id: c for c in clients}


def _run_client_worker(
    round_t: int, client_id: int, arrays: Dict[str, np.ndarray]
) -> SerializableResult:
    """Run one client's local training in a worker process"""
    start = time.time()
    try:
        client = _worker_clients[client_id]
        result = local_train(
            client,
            GeneratorParams.from_arrays(arrays),
            _worker_round_config,
            _worker_model,
            round_t,
        )
        if result is None:
            return SerializableResult(client_id=client_id, skipped=True)
        return SerializableResult(
            client_id=client_id,
            arrays=result.params.arrays(),
            num_samples=result.num_samples,
            epoch_losses=result.epoch_losses,
            train_time=time.time() - start,
        )
    except Exception as e:
        logger.exception(f"Error training client {client_id} in round {round_t}")
        return SerializableResult(client_id=client_id, error=f"{type(e).__name__}: {e}")


class ParallelClientTrainer:
    """
    Trains the selected clients of a round on a process pool

    Each job carries its client's id and a private copy of θ_P; the worker
    owns its rng stream, so results match sequential training bit for bit.
    With ``num_workers <= 1`` clients train inline.
    """

    def __init__(
        self,
        model: PromptedClassifier,
        round_config: RoundConfig,
        clients: Sequence[ClientState],
        num_workers: Optional[int] = None,
    ):
        self.model = model
        self.round_config = round_config
        self.clients = list(clients)
        self.num_workers = round_config.parallel_clients if num_workers is None else num_workers
        self.executor: Optional[ProcessPoolExecutor] = None

        logger.info(f"Initialized parallel client trainer with {self.num_workers} workers")

    def start(self) -> None:
        """Start the process pool"""
        if self.num_workers <= 1 or self.executor is not None:
            return
        executor_kwargs = {
            "max_workers": self.num_workers,
            "initializer": _worker_init,
            "initargs": (self.model.encoder, self.model.cfg, self.round_config, self.clients),
            "mp_context": mp.get_context("spawn"),
        }
        self.executor = ProcessPoolExecutor(**executor_kwargs)
        logger.info(f"Started process pool with {self.num_workers} processes")

    def stop(self) -> None:
        """Stop the process pool"""
        if self.executor:
            self.executor.shutdown(wait=True)
            self.executor = None
            logger.info("Stopped process pool")

    def __enter__(self) -> "ParallelClientTrainer":
        self.start()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.stop()

    def train(
        self, round_t: int, jobs: List[Tuple[ClientState, GeneratorParams]]
    ) -> List[Optional[LocalResult]]:
        """Train every job's client and return results in ascending client id"""
        if self.executor is None:
            results = [
                local_train(client, params, self.round_config, self.model, round_t)
                for client, params in jobs
            ]
            return sorted([r for r in results if r is not None], key=lambda r: r.client_id)

        futures = [
            self.executor.submit(_run_client_worker, round_t, client.client_id, params.arrays())
            for client, params in jobs
        ]
        results = []
        for future in futures:
            outcome: SerializableResult = future.result()
            if outcome.error:
                raise FedDPGError(f"client {outcome.client_id} failed: {outcome.error}")
            if outcome.skipped:
                logger.warning(f"Client {outcome.client_id} skipped round {round_t}")
                continue
            results.append(
                LocalResult(
                    client_id=outcome.client_id,
                    params=GeneratorParams.from_arrays(outcome.arrays),
                    num_samples=outcome.num_samples,
                    epoch_losses=outcome.epoch_losses,
                )
            )
        return sorted(results, key=lambda r: r.client_id)
