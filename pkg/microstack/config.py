# microstack/config.py
"""
Document loading and schema validation.

Responsibilities:
- Load JSON and YAML documents
- Validate them against one definition of schema.json
- Expose the solver policy as a frozen object

This module does NOT:
- convert units or build domain objects (see microstack.validation)
- run any solver
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional
import json
import math
import os

import yaml
from jsonschema import Draft202012Validator


THREADS_ENV = "MICROSTACK_THREADS"


class ConfigError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverPolicy:
    temperature: float = 298.15
    viscosity: float = 1.0e-3
    modes: int = 64
    quadrature_factor: int = 8
    tol_j_factor: float = 1.0e-8
    max_root_iterations: int = 200
    exponent_clamp: float = 500.0
    c_floor: float = 1.0e-9
    bc_damping: float = 0.5
    bc_tol: float = 1.0e-6
    max_bc_iters: int = 100
    newton_tol: float = 1.0e-10
    max_newton: int = 100
    max_halvings: int = 30
    outer_tol: float = 1.0e-5
    mass_tol: float = 1.0e-6
    max_outer: int = 50
    sweep_points: int = 21
    linear_solver: str = "dense"  # dense | iterative
    threads: int = 1
    electrolyte_ohmic: bool = True
    migration: bool = True

    @property
    def quadrature_nodes(self) -> int:
        return self.quadrature_factor * self.modes

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _load_schema(schema_path: Path) -> Dict[str, Any]:
    """
    Load JSON Schema from a schema.json file.
    """
    try:
        raw = schema_path.read_text(encoding="utf-8")
    except Exception as e:
        raise ConfigError(f"Failed to read schema file: {schema_path}") from e

    try:
        parsed = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Schema is not valid JSON: {schema_path}") from e

    if not isinstance(parsed, dict):
        raise ConfigError(f"Schema must be a JSON object: {schema_path}")

    return parsed


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except Exception as e:
        raise ConfigError(f"Failed to read document: {path}") from e


def _load_json(path: Path) -> Any:
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e


def _load_yaml(path: Path) -> Any:
    try:
        return yaml.safe_load(_read_text(path))
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: invalid YAML") from e


def _subschema(schema: Dict[str, Any], definition: Optional[str]) -> Dict[str, Any]:
    if definition is None:
        return schema
    defs = schema.get("$defs", {})
    if definition not in defs:
        raise ConfigError(f"Schema has no definition named {definition!r}")
    # keep $defs reachable so internal $ref pointers still resolve
    return {"$defs": defs, "$ref": f"#/$defs/{definition}"}


def validate_document(raw: Any, schema: Dict[str, Any], definition: Optional[str], source: str) -> None:
    validator = Draft202012Validator(_subschema(schema, definition))
    errors = sorted(validator.iter_errors(raw), key=lambda e: [str(p) for p in e.path])

    if errors:
        messages = []
        for err in errors:
            path = ".".join(str(p) for p in err.path)
            prefix = path if path else "<root>"
            messages.append(f"{prefix}: {err.message}")
        raise ConfigError(f"Invalid {definition or 'document'} in {source}:\n" + "\n".join(messages))


def load_document(path: Path, schema_path: Path, definition: Optional[str]) -> Dict[str, Any]:
    """
    Load a JSON or YAML document and validate it against one schema definition.

    Raises ConfigError on read, parse or validation failure.
    """
    path = Path(path)
    if path.suffix.lower() in (".yaml", ".yml"):
        raw = _load_yaml(path)
    else:
        raw = _load_json(path)

    if raw is None:
        raise ConfigError(f"Document is empty: {path}")

    if not isinstance(raw, dict):
        raise ConfigError(f"Document must be a mapping at top level: {path}")

    validate_document(raw, _load_schema(Path(schema_path)), definition, str(path))
    return raw


def load_policy(
    policy_path: Optional[Path],
    schema_path: Path,
    overrides: Optional[Dict[str, Any]] = None,
) -> SolverPolicy:
    """
    Load the solver policy. A missing path yields the defaults.

    MICROSTACK_THREADS overrides the threads field when set.
    """
    raw: Dict[str, Any] = {}
    if policy_path is not None:
        raw = dict(load_document(Path(policy_path), schema_path, "policy"))
    if overrides:
        raw.update(overrides)
        validate_document(raw, _load_schema(Path(schema_path)), "policy", "overrides")

    env_threads = os.environ.get(THREADS_ENV)
    if env_threads is not None:
        try:
            raw["threads"] = int(env_threads)
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env_threads!r}") from e
        if raw["threads"] < 1:
            raise ConfigError(f"{THREADS_ENV} must be at least 1")

    known = {f.name for f in fields(SolverPolicy)}
    policy = SolverPolicy(**{k: v for k, v in raw.items() if k in known})

    for name in ("temperature", "viscosity", "c_floor", "bc_tol", "newton_tol", "outer_tol", "mass_tol"):
        value = float(getattr(policy, name))
        if not math.isfinite(value) or value <= 0:
            raise ConfigError(f"policy.{name} must be a finite positive number")

    return policy
