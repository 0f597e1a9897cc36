from dataclasses import replace
from pathlib import Path

import pytest

from microstack.config import SolverPolicy
from microstack.domain import ParameterSet, default_parameters
from microstack.stack import StackConfig
from microstack.validation import load_stack


ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
SCHEMA = ROOT / "schema.json"
POLICY = ROOT / "microstack.yaml"


@pytest.fixture(autouse=True)
def _no_thread_override(monkeypatch):
    monkeypatch.delenv("MICROSTACK_THREADS", raising=False)


@pytest.fixture
def params() -> ParameterSet:
    return default_parameters()


@pytest.fixture
def policy() -> SolverPolicy:
    return SolverPolicy(modes=16, quadrature_factor=8)


@pytest.fixture
def single_cell(policy) -> StackConfig:
    return load_stack(CONFIGS / "single_cell.json", SCHEMA, policy)


@pytest.fixture
def network_stack(policy) -> StackConfig:
    return load_stack(CONFIGS / "fig6_network.json", SCHEMA, policy)


@pytest.fixture
def quiet_policy(policy) -> SolverPolicy:
    """Migration and electrolyte resistance off: pure advection-diffusion with wall fluxes."""
    return replace(policy, migration=False, electrolyte_ohmic=False)
