"""Launcher configuration: env vars, flags, and their precedence."""

import pytest

from embed_service.__main__ import DEFAULT_PORT, Settings, load_settings


def test_defaults():
    settings = load_settings([], env={})
    assert settings == Settings(("toy-64",), "127.0.0.1", DEFAULT_PORT, None)


def test_env_values_apply():
    settings = load_settings(
        [],
        env={
            "EMBED_MODELS": "toy-8,toy-16",
            "EMBED_PORT": "9001",
            "EMBED_RECORD": "runs/fixture.jsonl",
        },
    )
    assert settings.models == ("toy-8", "toy-16")
    assert settings.port == 9001
    assert settings.record == "runs/fixture.jsonl"


def test_flags_beat_env():
    settings = load_settings(
        ["--models", "toy-32", "--port", "7777"],
        env={"EMBED_MODELS": "toy-8", "EMBED_PORT": "9001"},
    )
    assert settings.models == ("toy-32",)
    assert settings.port == 7777


def test_empty_record_env_means_no_recording():
    assert load_settings([], env={"EMBED_RECORD": ""}).record is None


def test_bad_model_list_rejected():
    with pytest.raises(ValueError, match="no model ids"):
        load_settings(["--models", " , "], env={})
