"""Configuration loading and backend construction for the CLI."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .backend import (
    Backend,
    BackendPolicy,
    CHECK_PARAMS,
    CORRECTION_PARAMS,
    GENERATION_PARAMS,
    HttpBackend,
    MockBackend,
    PolicyBackend,
    REASONING_PARAMS,
    ReplayBackend,
    SamplingParams,
    TraceLedger,
)

STAGE_DEFAULT_PARAMS = {
    "reasoning": REASONING_PARAMS,
    "check": CHECK_PARAMS,
    "correction": CORRECTION_PARAMS,
    "generation": GENERATION_PARAMS,
}


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RoleConfig:
    """How one model role (subject/generator/feedback/corrector) is served."""

    kind: str = "mock"  # mock | http | replay
    script: str | None = None
    base_url: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    trace_file: str | None = None
    probe: bool = True


@dataclass(frozen=True)
class PipelineOptions:
    format: str = "step-cot"
    parse_retries: int = 0
    prescreen: bool = False
    workers: int = 1


@dataclass(frozen=True)
class ForgeOptions:
    samples_per_question: int = 5
    target_wrong: int | None = None
    target_correct: int | None = None
    correct_source: str = "generator"  # generator | gold


@dataclass(frozen=True)
class AppConfig:
    seed: int = 0
    roles: dict[str, RoleConfig] = field(default_factory=dict)
    policy: BackendPolicy = BackendPolicy()
    params: dict[str, SamplingParams] = field(default_factory=dict)
    pipeline: PipelineOptions = PipelineOptions()
    forge: ForgeOptions = ForgeOptions()
    trace_log: str | None = None
    base_dir: Path = Path(".")

    def stage_params(self, stage: str) -> SamplingParams:
        return self.params.get(stage, STAGE_DEFAULT_PARAMS[stage])

    def resolve(self, maybe_path: str | None) -> str | None:
        if maybe_path is None:
            return None
        path = Path(maybe_path)
        return str(path if path.is_absolute() else self.base_dir / path)


def _params_from(record: dict, defaults: SamplingParams) -> SamplingParams:
    permitted = {
        "temperature",
        "top_p",
        "top_k",
        "repetition_penalty",
        "max_tokens",
        "seed",
    }
    unknown = set(record) - permitted
    if unknown:
        raise ConfigError(f"unknown sampling fields {sorted(unknown)}")
    return replace(defaults, **record)


def load_config(path: str | Path | None) -> AppConfig:
    """Load a YAML (or JSON) config file; every section is optional."""
    if path is None:
        return AppConfig()
    path = Path(path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    roles = {
        name: RoleConfig(**role) for name, role in (raw.get("roles") or {}).items()
    }
    policy = BackendPolicy(**(raw.get("policy") or {}))
    params = {
        stage: _params_from(record, STAGE_DEFAULT_PARAMS[stage])
        for stage, record in (raw.get("params") or {}).items()
    }
    pipeline = PipelineOptions(**(raw.get("pipeline") or {}))
    forge = ForgeOptions(**(raw.get("forge") or {}))
    return AppConfig(
        seed=raw.get("seed", 0),
        roles=roles,
        policy=policy,
        params=params,
        pipeline=pipeline,
        forge=forge,
        trace_log=raw.get("trace_log"),
        base_dir=path.parent,
    )


def build_backend(config: AppConfig, role: str) -> Backend:
    """Instantiate the configured backend for a role, wrapped in the policy."""
    role_config = config.roles.get(role)
    if role_config is None:
        raise ConfigError(f"no backend configured for role {role!r}")
    ledger = TraceLedger(config.resolve(config.trace_log))
    if role_config.kind == "mock":
        if not role_config.script:
            raise ConfigError(f"mock role {role!r} needs a script file")
        inner: Backend = MockBackend.from_script_file(
            config.resolve(role_config.script), ledger=ledger
        )
    elif role_config.kind == "replay":
        if not role_config.trace_file:
            raise ConfigError(f"replay role {role!r} needs a trace file")
        inner = ReplayBackend.from_trace_file(config.resolve(role_config.trace_file))
    elif role_config.kind == "http":
        if not role_config.base_url or not role_config.model:
            raise ConfigError(f"http role {role!r} needs base_url and model")
        api_key = None
        if role_config.api_key_env:
            api_key = os.environ.get(role_config.api_key_env)
        inner = HttpBackend(
            base_url=role_config.base_url,
            model=role_config.model,
            api_key=api_key,
            ledger=ledger,
            timeout=config.policy.timeout,
            probe=role_config.probe,
        )
    else:
        raise ConfigError(f"unknown backend kind {role_config.kind!r}")
    return PolicyBackend(inner, config.policy)
