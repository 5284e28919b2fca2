"""HTTP embedding microservice with a fixed JSON protocol and fixture recording."""

from embed_service.encoders import CLIP_MODELS, ClipEncoder, Encoder, ToyEncoder, build_encoder, parse_model_list
from embed_service.recording import FixtureRecorder
from embed_service.service import MAX_BATCH, create_app

__all__ = [
    "CLIP_MODELS",
    "ClipEncoder",
    "Encoder",
    "FixtureRecorder",
    "MAX_BATCH",
    "ToyEncoder",
    "build_encoder",
    "create_app",
    "parse_model_list",
]
