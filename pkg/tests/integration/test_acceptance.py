"""
End-to-end behavior on the reference synthetic task

These runs take minutes each; deselect with -m "not slow".
"""

import math

import pytest

from feddpg.controller import ExperimentRunner, build_datasets, build_encoder
from feddpg.federation import FederatedSimulation
from feddpg.generator import PromptedClassifier
from feddpg.parallel import ParallelClientTrainer
from feddpg.unlearning import UnlearnRequest, evaluate_forgetting, perform_unlearning
from feddpg.utils.metrics_io import read_jsonl
from feddpg.utils.metrics_utils import summarize_values


def make_simulation(config):
    seed = config.experiment.seed
    train, test, spec = build_datasets(config, seed)
    encoder = build_encoder(config, seed)
    model = PromptedClassifier(encoder, config.generator)
    simulation = FederatedSimulation(
        model, train, config.federation, seed, eval_batch_size=config.experiment.eval_batch_size
    )
    return simulation, test, spec


def strip_time(history):
    return [dict(m.to_dict(), wall_time=0.0) for m in history]


class TestSmoke:
    """Fast end-to-end checks on a tiny model"""

    def test_every_command_runs(self, small_config):
        with ExperimentRunner(small_config, "train", setup_logging=False) as runner:
            summary = runner.run_experiment()
            assert summary["final_accuracy"] is not None
            assert runner.run_ablation()["final_accuracy"]["prompt_and_text"] is not None
            assert len(runner.run_compare()["rows"]) == 2
            assert len(runner.run_unlearning()["global_accuracy"]) == 3


@pytest.mark.slow
@pytest.mark.integration
class TestReferenceTask:
    """Learning, ablation and capacity on the reference task"""

    def test_learning_reaches_oracle_fraction(self, reference_config):
        with ExperimentRunner(reference_config, "train", setup_logging=False) as runner:
            summary = runner.run_experiment()
        assert summary["rounds"] == 100
        assert summary["final_accuracy"] >= 0.85 * summary["bayes_accuracy"]

    def test_oracle_bounds_every_round(self, reference_config):
        config = reference_config.replace(data={"num_test": 5000}, experiment={"rounds": 30})
        with ExperimentRunner(config, "train", setup_logging=False) as runner:
            summary = runner.run_experiment()
            rows = read_jsonl(runner.run_dir / "metrics.jsonl")
        oracle, n = summary["bayes_accuracy"], config.data.num_test
        tolerance = 3 * math.sqrt(oracle * (1 - oracle) / n) + 1 / n
        assert all(row["accuracy"] <= oracle + tolerance for row in rows)

    def test_ablation_ordering(self, reference_config):
        with ExperimentRunner(reference_config, "ablate", setup_logging=False) as runner:
            final = runner.run_ablation()["final_accuracy"]
        assert final["prompt_and_text"] >= final["prompt_only"]

        shorter = reference_config.replace(generator={"prompt_len": 1}, experiment={"rounds": 20})
        longer = reference_config.replace(experiment={"rounds": 20})
        text_only = []
        for config in (shorter, longer):
            with ExperimentRunner(config, "ablate", setup_logging=False) as runner:
                cfg = config.replace(generator={"input_mode": "text_only"})
                text_only.append(runner.federated_run(cfg, "text_only").final_accuracy)
        assert text_only[0] == text_only[1]

    def test_capacity_trend(self, reference_config):
        config = reference_config.replace(
            experiment={
                "grid_ratios": [0.10],
                "grid_prompt_lens": [5],
                "grid_hidden": [5, 10, 20],
            }
        )
        with ExperimentRunner(config, "grid", setup_logging=False) as runner:
            rows = runner.run_grid([0, 1, 2])["rows"]
        means = [
            summarize_values(r["final_accuracy"] for r in rows if r["hidden"] == h)["mean"]
            for h in (5, 10, 20)
        ]
        inversions = [a - b for a, b in zip(means, means[1:]) if b < a]
        assert len(inversions) <= 1
        assert all(drop <= 0.005 for drop in inversions)


@pytest.mark.slow
@pytest.mark.integration
class TestFederationContracts:
    """Determinism, frozen encoder and communication on the reference task"""

    def test_parallel_clients_reproduce_sequential_run(self, reference_config):
        config = reference_config.replace(experiment={"rounds": 50})
        sequential, test, _ = make_simulation(config)
        trajectory = []
        for _ in range(50):
            sequential.run_round(test)
            trajectory.append(sequential.global_params.digest())

        parallel, test, _ = make_simulation(config)
        with ParallelClientTrainer(
            parallel.model, config.federation, parallel.clients, num_workers=2
        ) as trainer:
            parallel.trainer = trainer.train
            for t in range(50):
                parallel.run_round(test)
                assert parallel.global_params.digest() == trajectory[t]
        assert strip_time(parallel.history) == strip_time(sequential.history)

    def test_communication_accounting(self, reference_config):
        simulation, _, _ = make_simulation(reference_config)
        assert reference_config.federation.clients_per_round == 10
        simulation.run(10)
        size = simulation.global_params.serialized_size()
        assert simulation.total_bytes == 200 * size

    def test_encoder_frozen_through_training_and_unlearning(self, reference_config):
        simulation, _, _ = make_simulation(reference_config)
        digest = simulation.model.encoder.digest()
        simulation.run(20)
        assert simulation.model.encoder.digest() == digest
        perform_unlearning(simulation, UnlearnRequest(client_id=0))
        assert simulation.model.encoder.digest() == digest


@pytest.mark.slow
@pytest.mark.integration
class TestUnlearningScenario:
    """Pre-training, one client's request and server-side replacement"""

    def test_forgetting_with_bounded_global_cost(self, unlearning_config):
        u = unlearning_config.unlearning
        config = unlearning_config.replace(
            generator={"prompt_len": u.pre_prompt_len},
            federation={"selection_ratio": u.pre_selection_ratio},
        )
        simulation, test, _ = make_simulation(config)
        simulation.run(u.pre_rounds)

        request = UnlearnRequest.from_config(u, client_id=3, seed=config.experiment.seed)
        result, before = perform_unlearning(simulation, request)
        assert simulation.global_params.bit_equal(result.params)

        report = evaluate_forgetting(
            before,
            simulation.global_params,
            result.split.forget,
            test,
            {},
            simulation.model,
            client_id=3,
        )
        assert report.forget_accuracy_after < report.forget_accuracy_before
        assert report.global_delta >= -0.05

    def test_runner_report(self, unlearning_config):
        with ExperimentRunner(unlearning_config, "unlearn", setup_logging=False) as runner:
            report = runner.run_unlearning()
        assert len(report["per_client"]) == unlearning_config.unlearning.report_clients
        assert report["forget_delta"] < 0
        assert report["global_delta"] >= -0.05
