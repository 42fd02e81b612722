"""
Experiment runner for feddpg
"""

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from feddpg._version import __version__
from feddpg.config import Config
from feddpg.data import (
    SyntheticTaskSpec,
    TokenizedDataset,
    bayes_oracle_accuracy,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
)
from feddpg.encoder import FrozenEncoder, pretrain_backbone
from feddpg.errors import ConfigError, ContractError
from feddpg.federation import FederatedSimulation, RoundMetrics, evaluate_global, partition_indices
from feddpg.generator import GeneratorParams, PromptedClassifier, param_count
from feddpg.parallel import ParallelClientTrainer
from feddpg.unlearning import UnlearnRequest, evaluate_forgetting, perform_unlearning
from feddpg.utils.format_utils import format_metrics_safe
from feddpg.utils.metrics_io import append_jsonl, write_csv, write_json
from feddpg.utils.metrics_utils import group_summary
from feddpg.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

ABLATION_MODES = ("prompt_and_text", "text_only", "prompt_only")
GRID_AXES = ("hidden", "prompt_len", "selection_ratio")


def build_task_spec(config: Config, seed: Optional[int] = None) -> SyntheticTaskSpec:
    """Synthetic task described by the data and encoder sections"""
    return SyntheticTaskSpec(
        num_classes=config.encoder.num_classes,
        vocab_size=config.encoder.vocab_size,
        seq_len_min=config.data.seq_len_min,
        seq_len_max=config.data.seq_len_max,
        signal_tokens_per_class=config.data.signal_tokens_per_class,
        signal_rate=config.data.signal_rate,
        seed=config.experiment.seed if seed is None else seed,
        pad_id=config.data.pad_id,
    )


def build_datasets(
    config: Config, seed: Optional[int] = None
) -> Tuple[TokenizedDataset, TokenizedDataset, Optional[SyntheticTaskSpec]]:
    """
    Train and test sets: JSON-lines files when configured, else synthetic draws

    Synthetic train and test sets come from separate streams of the same task.
    """
    if config.train_from_files:
        if config.data.test_path is None:
            raise ConfigError("data.test_path is required when data.train_path is set")
        kwargs = dict(
            vocab_size=config.encoder.vocab_size,
            num_classes=config.encoder.num_classes,
            pad_id=config.data.pad_id,
        )
        train = load_jsonl(config.data.train_path, **kwargs)
        test = load_jsonl(config.data.test_path, **kwargs)
        logger.info(f"Loaded {len(train)} train / {len(test)} test samples from JSON-lines files")
        return train, test, None

    spec = build_task_spec(config, seed)
    train = generate_synthetic(spec, config.data.num_train, stream=0)
    test = generate_synthetic(spec, config.data.num_test, stream=1)
    logger.info(
        f"Generated synthetic task: {len(train)} train / {len(test)} test samples, "
        f"signal_rate={spec.signal_rate}"
    )
    return train, test, spec


def build_encoder(
    config: Config, seed: Optional[int] = None, show_progress: bool = False
) -> FrozenEncoder:
    """
    Frozen backbone: randomly initialized, or trained on a pretext task first

    The pretext task shares the vocabulary and class count but draws its
    signal tokens from a different seed.
    """
    seed = config.experiment.seed if seed is None else seed
    encoder_seed = derive_seed(seed, "encoder")
    if config.encoder.backbone == "random":
        return FrozenEncoder.initialize(config.encoder, encoder_seed)

    pretext_spec = build_task_spec(config, derive_seed(seed, "pretext"))
    pretext = generate_synthetic(pretext_spec, config.encoder.pretrain_samples, stream=2)
    encoder, _ = pretrain_backbone(
        config.encoder,
        pretext,
        steps=config.encoder.pretrain_steps,
        lr=config.encoder.pretrain_lr,
        seed=encoder_seed,
        batch_size=config.encoder.pretrain_batch_size,
        show_progress=show_progress,
    )
    return encoder


@dataclass
class RunOutcome:
    """Result of one federated training run"""

    label: str
    history: List[RoundMetrics]
    params: GeneratorParams
    total_bytes: int
    param_count: int
    serialized_size: int
    encoder_digest: str
    simulation: Optional[FederatedSimulation] = field(default=None, repr=False)

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.history[-1].accuracy if self.history else None

    def summary(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "rounds": self.history[-1].round if self.history else 0,
            "final_accuracy": self.final_accuracy,
            "total_bytes": self.total_bytes,
            "param_count": self.param_count,
            "serialized_size": self.serialized_size,
        }


class ExperimentRunner:
    """
    Runs one experiment command and owns its run directory

    The run directory is ``<output_dir>/<command>_<config digest[:12]>``; an
    existing directory gets a numeric suffix instead of being overwritten.
    """

    def __init__(
        self,
        config: Config,
        command: str = "train",
        output_dir: Optional[str] = None,
        setup_logging: bool = True,
    ):
        self.config = config
        self.command = command
        base_dir = Path(output_dir or config.experiment.output_dir)
        self.run_dir = self._make_run_dir(base_dir, f"{command}_{config.digest()[:12]}")
        self._handlers: List[logging.Handler] = []
        if setup_logging:
            self._setup_logging()

        self._data: Dict[int, Tuple[TokenizedDataset, TokenizedDataset, Any]] = {}
        self._encoders: Dict[int, FrozenEncoder] = {}
        self.config.to_yaml(self.run_dir / "config.yaml")
        logger.info(f"Run directory: {self.run_dir}")

    @staticmethod
    def _make_run_dir(base_dir: Path, name: str) -> Path:
        candidate = base_dir / name
        suffix = 1
        while candidate.exists():
            candidate = base_dir / f"{name}_{suffix}"
            suffix += 1
        candidate.mkdir(parents=True)
        return candidate

    def _setup_logging(self) -> None:
        """Set up logging"""
        log_dir = self.config.experiment.log_dir or os.path.join(self.run_dir, "logs")
        os.makedirs(log_dir, exist_ok=True)

        root_logger = logging.getLogger()
        root_logger.setLevel(getattr(logging, self.config.experiment.log_level))

        log_file = os.path.join(log_dir, f"feddpg_{time.strftime('%Y%m%d_%H%M%S')}.log")
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(
            logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
        )
        root_logger.addHandler(file_handler)

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(logging.Formatter("%(asctime)s - %(levelname)s - %(message)s"))
        root_logger.addHandler(console_handler)

        self._handlers = [file_handler, console_handler]
        self.log_file = log_file
        logger.info(f"Logging to {log_file}")

    def close(self) -> None:
        """Detach this run's log handlers"""
        root_logger = logging.getLogger()
        for handler in self._handlers:
            root_logger.removeHandler(handler)
            handler.close()
        self._handlers = []

    def __enter__(self) -> "ExperimentRunner":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    # Shared building blocks

    @property
    def show_progress(self) -> bool:
        return self.config.experiment.show_progress

    def data_for(self, seed: int) -> Tuple[TokenizedDataset, TokenizedDataset, Any]:
        if seed not in self._data:
            self._data[seed] = build_datasets(self.config, seed)
        return self._data[seed]

    def encoder_for(self, seed: int) -> FrozenEncoder:
        if seed not in self._encoders:
            self._encoders[seed] = build_encoder(self.config, seed, self.show_progress)
        return self._encoders[seed]

    def _oracle(self, spec: Optional[SyntheticTaskSpec], test: TokenizedDataset) -> Optional[float]:
        if spec is None or len(test) == 0:
            return None
        return bayes_oracle_accuracy(spec, test)

    def _write_manifest(self, seed: int, extra: Optional[Dict[str, Any]] = None) -> None:
        train, test, spec = self.data_for(seed)
        manifest = {
            "command": self.command,
            "version": __version__,
            "config_digest": self.config.digest(),
            "seed": seed,
            "train_digest": train.digest(),
            "test_digest": test.digest(),
            "encoder_digest": self.encoder_for(seed).digest(),
            "task": spec.to_dict() if spec is not None else None,
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        manifest.update(extra or {})
        write_json(manifest, self.run_dir / "run.json")

    def federated_run(
        self,
        config: Config,
        label: str,
        out_dir: Optional[Path] = None,
        rounds: Optional[int] = None,
        checkpoints: bool = False,
    ) -> RunOutcome:
        """
        Partition → initial evaluation → federated rounds, on the data and
        encoder of ``config.experiment.seed``

        Round rows are appended to ``out_dir/metrics.jsonl`` as they complete.
        """
        seed = config.experiment.seed
        rounds = config.experiment.rounds if rounds is None else rounds
        train, test, _ = self.data_for(seed)
        encoder = self.encoder_for(seed)
        encoder_digest = encoder.digest()
        model = PromptedClassifier(encoder, config.generator)
        simulation = FederatedSimulation(
            model,
            train,
            config.federation,
            seed,
            eval_batch_size=config.experiment.eval_batch_size,
        )
        metrics_path = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = out_dir / "metrics.jsonl"

        def record(row: RoundMetrics) -> None:
            if metrics_path is not None:
                append_jsonl(row, metrics_path)

        record(simulation.initial_metrics(test))
        with ParallelClientTrainer(model, config.federation, simulation.clients) as trainer:
            if trainer.num_workers > 1:
                simulation.trainer = trainer.train
            for _ in tqdm(range(rounds), desc=label, disable=not self.show_progress):
                metrics = simulation.run_round(test)
                record(metrics)
                interval = config.federation.checkpoint_interval
                if checkpoints and interval > 0 and metrics.round % interval == 0:
                    self._save_generator(
                        simulation.global_params, f"generator_round_{metrics.round}.fdpg"
                    )
                logger.info(
                    f"[{label}] round {metrics.round}: "
                    + format_metrics_safe(
                        {
                            "accuracy": metrics.accuracy,
                            "mean_loss": metrics.mean_loss,
                            "bytes": metrics.bytes_transmitted,
                        }
                    )
                )

        if encoder.digest() != encoder_digest:
            raise ContractError("encoder parameters changed during training")
        params = simulation.global_params
        if checkpoints:
            self._save_generator(params, "generator_final.fdpg")
            encoder.save(self._checkpoint_dir() / "encoder.fdpg")
        elif out_dir is not None and out_dir != self.run_dir:
            # mode, cell and method subdirectories keep their own final generator
            nbytes = params.save(out_dir / "generator_final.fdpg")
            logger.debug(f"Saved {out_dir.name}/generator_final.fdpg ({nbytes} bytes)")
        return RunOutcome(
            label=label,
            history=simulation.history,
            params=params,
            total_bytes=simulation.total_bytes,
            param_count=param_count(config.generator),
            serialized_size=params.serialized_size(),
            encoder_digest=encoder_digest,
            simulation=simulation,
        )

    def _checkpoint_dir(self) -> Path:
        path = self.run_dir / "checkpoints"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _save_generator(self, params: GeneratorParams, name: str) -> None:
        nbytes = params.save(self._checkpoint_dir() / name)
        logger.debug(f"Saved {name} ({nbytes} bytes)")

    # Commands

    def run_experiment(self) -> Dict[str, Any]:
        """Single federated training run with checkpoints and a summary"""
        seed = self.config.experiment.seed
        outcome = self.federated_run(self.config, "train", self.run_dir, checkpoints=True)
        _, test, spec = self.data_for(seed)
        summary = outcome.summary()
        summary["bayes_accuracy"] = self._oracle(spec, test)
        summary["config_digest"] = self.config.digest()
        write_csv([summary], self.run_dir / "summary.csv")
        self._write_manifest(seed, {"bayes_accuracy": summary["bayes_accuracy"]})
        logger.info(f"Training finished: {format_metrics_safe(summary)}")
        return summary

    def run_ablation(self) -> Dict[str, Any]:
        """[P; x], x and P input configurations on identical data and encoder"""
        seed = self.config.experiment.seed
        outcomes = {}
        for mode in ABLATION_MODES:
            cfg = self.config.replace(generator={"input_mode": mode})
            outcomes[mode] = self.federated_run(cfg, mode, self.run_dir / mode)

        rounds = [m.round for m in outcomes[ABLATION_MODES[0]].history]
        table = [
            {
                "round": t,
                **{mode: outcomes[mode].history[i].accuracy for mode in ABLATION_MODES},
            }
            for i, t in enumerate(rounds)
        ]
        write_csv(table, self.run_dir / "ablation.csv", ["round", *ABLATION_MODES])
        summaries = [dict(o.summary(), input_mode=m) for m, o in outcomes.items()]
        write_csv(summaries, self.run_dir / "summary.csv")
        self._write_manifest(seed)
        return {
            "final_accuracy": {m: o.final_accuracy for m, o in outcomes.items()},
            "data_digest": self.data_for(seed)[0].digest(),
        }

    def run_grid(self, seeds: Optional[Sequence[int]] = None) -> Dict[str, Any]:
        """
        Every (selection ratio, prompt length, hidden width) cell, per seed

        One ``grid.csv`` row per cell plus ``grid_summary.csv`` with per-axis
        statistics of the final accuracy.
        """
        exp = self.config.experiment
        seeds = list(seeds) if seeds is not None else [exp.seed]
        cells = [
            (seed, ratio, plen, hidden)
            for seed in seeds
            for ratio in exp.grid_ratios
            for plen in exp.grid_prompt_lens
            for hidden in exp.grid_hidden
        ]
        rows = []
        for seed, ratio, plen, hidden in tqdm(cells, desc="grid", disable=not self.show_progress):
            cfg = self.config.replace(
                generator={"prompt_len": plen, "hidden": hidden},
                federation={"selection_ratio": ratio},
                experiment={"seed": seed},
            )
            label = f"seed{seed}_r{ratio}_p{plen}_h{hidden}"
            outcome = self.federated_run(cfg, label, self.run_dir / "cells" / label)
            rows.append(
                {
                    "seed": seed,
                    "selection_ratio": ratio,
                    "prompt_len": plen,
                    "hidden": hidden,
                    "final_accuracy": outcome.final_accuracy,
                    "param_count": outcome.param_count,
                    "total_bytes": outcome.total_bytes,
                }
            )
        write_csv(rows, self.run_dir / "grid.csv")
        summary = summarize_grid(rows)
        write_csv(summary, self.run_dir / "grid_summary.csv")
        self._write_manifest(seeds[0], {"seeds": seeds})
        return {"rows": rows, "summary": summary}

    def run_unlearning(self) -> Dict[str, Any]:
        """
        Federated pre-training, one client's unlearning request, server-side
        replacement and a before/after report
        """
        u = self.config.unlearning
        seed = self.config.experiment.seed
        cfg = self.config.replace(
            generator={"prompt_len": u.pre_prompt_len},
            federation={"selection_ratio": u.pre_selection_ratio},
        )
        outcome = self.federated_run(cfg, "pretrain", self.run_dir, rounds=u.pre_rounds)
        simulation = outcome.simulation
        _, test, _ = self.data_for(seed)

        client_id = u.client_id
        with_data = [c.client_id for c in simulation.clients if len(c.shard) > 0]
        rng = np.random.default_rng([seed, 0xC1])
        if client_id is None:
            client_id = int(rng.choice(with_data))
        elif client_id not in with_data:
            raise ConfigError(f"unlearning.client_id {client_id} has no data")

        request = UnlearnRequest.from_config(u, client_id, seed)
        result, before = perform_unlearning(simulation, request)
        append_jsonl(
            {
                "round": simulation.server.round,
                "replaced_by": client_id,
                "bytes_transmitted": simulation.transport.bytes_for_round(
                    simulation.server.round
                ),
            },
            self.run_dir / "metrics.jsonl",
        )

        private = partition_indices(
            test.labels, len(simulation.clients), "iid", derive_seed(seed, "private-test")
        )
        report_ids = sorted(
            rng.choice(
                len(simulation.clients),
                size=min(u.report_clients, len(simulation.clients)),
                replace=False,
            ).tolist()
        )
        report = evaluate_forgetting(
            before,
            simulation.global_params,
            result.split.forget,
            test,
            {cid: test.subset(private[cid]) for cid in report_ids},
            simulation.model,
            client_id=client_id,
            retain_size=len(result.split.retain),
            reg_lambda=request.reg_lambda,
            initial_accuracy=outcome.history[0].accuracy,
            batch_size=self.config.experiment.eval_batch_size,
        )
        report_dict = report.to_dict()
        write_json(report_dict, self.run_dir / "unlearn_report.json")
        self._save_generator(before, "generator_before_unlearning.fdpg")
        self._save_generator(simulation.global_params, "generator_final.fdpg")
        self._write_manifest(seed, {"unlearned_client": client_id})
        return report_dict

    def run_compare(self) -> Dict[str, Any]:
        """Dynamic generator against a static soft prompt of the same length"""
        seed = self.config.experiment.seed
        rows = []
        for method, mode in (("dynamic", "prompt_and_text"), ("static", "static_prompt")):
            cfg = self.config.replace(generator={"input_mode": mode})
            outcome = self.federated_run(cfg, method, self.run_dir / method)
            rows.append(dict(outcome.summary(), method=method, input_mode=mode))
        write_csv(rows, self.run_dir / "compare.csv")
        self._write_manifest(seed)
        return {"rows": rows}

    def evaluate_checkpoint(self, checkpoint: str, encoder_path: Optional[str] = None) -> float:
        """Test accuracy of a saved generator with a saved (or rebuilt) encoder"""
        seed = self.config.experiment.seed
        params = GeneratorParams.load(checkpoint)
        if encoder_path:
            encoder = FrozenEncoder.load(encoder_path, self.config.encoder)
        else:
            encoder = self.encoder_for(seed)
        _, test, _ = self.data_for(seed)
        model = PromptedClassifier(encoder, params.infer_config(self.config.generator))
        accuracy = evaluate_global(params, test, model, self.config.experiment.eval_batch_size)
        logger.info(f"Checkpoint {checkpoint}: accuracy {accuracy:.4f} on {len(test)} samples")
        return accuracy


def summarize_grid(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Mean, std, min and max of final accuracy for each value of each grid axis"""
    summary = []
    for axis in GRID_AXES:
        summary.extend(group_summary(rows, axis, "final_accuracy"))
    return summary


def generate_data_files(config: Config, out_dir: str) -> Dict[str, Any]:
    """Write the configured synthetic train/test sets as JSON-lines files"""
    train, test, spec = build_datasets(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(train, out / "train.jsonl")
    save_jsonl(test, out / "test.jsonl")
    info = {
        "train_path": str(out / "train.jsonl"),
        "test_path": str(out / "test.jsonl"),
        "num_train": len(train),
        "num_test": len(test),
        "train_digest": train.digest(),
        "test_digest": test.digest(),
        "bayes_accuracy": bayes_oracle_accuracy(spec, test) if spec and len(test) else None,
        "task": spec.to_dict() if spec else None,
    }
    write_json(info, out / "task.json")
    return info
