"""
Pytest fixtures for end-to-end experiment scenarios
"""

import shutil
import sys
import tempfile
from pathlib import Path

import pytest

from feddpg.config import Config

sys.path.append(str(Path(__file__).parent.parent))
from test_utils import tiny_config  # noqa: E402

CONFIG_DIR = Path(__file__).parent.parent.parent / "configs"


@pytest.fixture
def temp_workspace():
    """Create a temporary workspace for run directories"""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir, ignore_errors=True)


@pytest.fixture
def reference_config(temp_workspace):
    """The reference synthetic task with progress bars off and output in the workspace"""
    config = Config.from_yaml(CONFIG_DIR / "reference_task.yaml")
    return config.replace(
        experiment={"show_progress": False, "output_dir": str(temp_workspace / "runs")}
    )


@pytest.fixture
def unlearning_config(temp_workspace):
    """The unlearning scenario on the reference task"""
    config = Config.from_yaml(CONFIG_DIR / "reference_task.yaml")
    overrides = Config.from_yaml(CONFIG_DIR / "unlearning.yaml")
    return config.replace(
        generator={"prompt_len": overrides.generator.prompt_len},
        unlearning=overrides.to_dict()["unlearning"],
        experiment={"show_progress": False, "output_dir": str(temp_workspace / "runs")},
    )


@pytest.fixture
def small_config(temp_workspace):
    """A tiny experiment for quick end-to-end checks"""
    return tiny_config(experiment={"output_dir": str(temp_workspace / "runs")})
