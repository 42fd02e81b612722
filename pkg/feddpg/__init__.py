"""
feddpg: federated dynamic prompt generation for a frozen encoder, with unlearning
"""

from feddpg._version import __version__
from feddpg.config import Config, load_config
from feddpg.controller import ExperimentRunner
from feddpg.encoder import FrozenEncoder
from feddpg.federation import FederatedSimulation, aggregate, evaluate_global, partition
from feddpg.generator import GeneratorParams, PromptedClassifier, init_generator, param_count
from feddpg.unlearning import UnlearnRequest, local_unlearn, server_replace

__all__ = [
    "Config",
    "ExperimentRunner",
    "FederatedSimulation",
    "FrozenEncoder",
    "GeneratorParams",
    "PromptedClassifier",
    "UnlearnRequest",
    "__version__",
    "aggregate",
    "evaluate_global",
    "init_generator",
    "load_config",
    "local_unlearn",
    "param_count",
    "partition",
    "server_replace",
]
