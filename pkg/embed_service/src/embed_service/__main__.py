"""Launcher: `python -m embed_service` or the `embed-service` script.

Flags beat environment variables (EMBED_MODELS, EMBED_PORT, EMBED_RECORD),
which beat the built-in defaults.
"""

from __future__ import annotations

import argparse
import os
from dataclasses import dataclass
from typing import Mapping

from embed_service.encoders import build_encoder, parse_model_list
from embed_service.recording import FixtureRecorder
from embed_service.service import create_app

DEFAULT_MODELS = "toy-64"
DEFAULT_PORT = 8081


@dataclass(frozen=True)
class Settings:
    models: tuple[str, ...]
    host: str
    port: int
    record: str | None


def load_settings(argv=None, env: Mapping[str, str] | None = None) -> Settings:
    env = os.environ if env is None else env
    parser = argparse.ArgumentParser(
        prog="embed-service",
        description="Serve image/text embeddings over HTTP with optional fixture recording.",
    )
    parser.add_argument(
        "--models",
        default=env.get("EMBED_MODELS", DEFAULT_MODELS),
        help="comma-separated model ids (default: %(default)s)",
    )
    parser.add_argument("--host", default="127.0.0.1", help="bind address (default: %(default)s)")
    parser.add_argument(
        "--port",
        type=int,
        default=int(env.get("EMBED_PORT", str(DEFAULT_PORT))),
        help="port to listen on (default: %(default)s)",
    )
    parser.add_argument(
        "--record",
        default=env.get("EMBED_RECORD") or None,
        help="tee every served embedding to this JSON-Lines fixture file",
    )
    args = parser.parse_args(argv)
    return Settings(parse_model_list(args.models), args.host, args.port, args.record)


def main(argv=None) -> None:
    import uvicorn

    settings = load_settings(argv)
    encoders = [build_encoder(model_id) for model_id in settings.models]
    recorder = FixtureRecorder(settings.record) if settings.record else None
    app = create_app(encoders, recorder)
    uvicorn.run(app, host=settings.host, port=settings.port, log_level="info")


if __name__ == "__main__":
    main()
