import pytest

from stepcheck.backend import PolicyBackend
from stepcheck.config import ConfigError, build_backend, load_config


def test_defaults_without_file():
    config = load_config(None)
    assert config.pipeline.format == "step-cot"
    assert config.policy.max_retries == 3
    assert config.stage_params("reasoning").temperature == 0.0
    assert config.stage_params("check").top_k == 30
    assert config.stage_params("check").repetition_penalty == 1.2


def test_full_file_roundtrip(tmp_path):
    script = tmp_path / "subject.json"
    script.write_text('{"rules": [{"replies": ["hi"]}]}', encoding="utf-8")
    config_file = tmp_path / "config.yaml"
    config_file.write_text(
        "seed: 3\n"
        "trace_log: ledger.jsonl\n"
        "roles:\n"
        "  subject: {kind: mock, script: subject.json}\n"
        "policy: {max_retries: 1, requests_per_minute: 10}\n"
        "params:\n"
        "  check: {temperature: 0.9}\n"
        "pipeline: {format: all-direct, workers: 2}\n"
        "forge: {samples_per_question: 3, correct_source: gold}\n",
        encoding="utf-8",
    )
    config = load_config(config_file)
    assert config.seed == 3
    assert config.pipeline.format == "all-direct"
    assert config.policy.max_retries == 1
    assert config.stage_params("check").temperature == 0.9
    assert config.stage_params("check").top_p == 0.85  # default kept
    assert config.forge.samples_per_question == 3
    backend = build_backend(config, "subject")
    assert isinstance(backend, PolicyBackend)
    # relative paths resolve against the config file directory
    assert (tmp_path / "ledger.jsonl").exists()


def test_missing_role_rejected(tmp_path):
    config_file = tmp_path / "config.yaml"
    config_file.write_text("roles: {}\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        build_backend(load_config(config_file), "subject")


def test_unknown_sampling_field_rejected(tmp_path):
    config_file = tmp_path / "config.yaml"
    config_file.write_text("params:\n  check: {tempurature: 1.0}\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(config_file)
