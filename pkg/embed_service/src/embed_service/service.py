"""The HTTP surface: GET /v1/models and POST /v1/embed.

Request validation is hand-rolled rather than delegated to the framework so
the wire contract stays exact: 400 {"error", "item_index"} for undecodable
payloads, 404 for unknown models, 413 for oversized batches — never a
framework-shaped 422. Embedding runs in the threadpool, so concurrent
requests proceed while one encodes; responses preserve item order.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import io
from typing import Sequence

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image
from starlette.concurrency import run_in_threadpool

from embed_service.encoders import Encoder
from embed_service.recording import FixtureRecorder

#: Largest accepted |items| per request.
MAX_BATCH = 256

KINDS = ("text", "image")


class _RequestError(Exception):
    """Maps straight onto an error response."""

    def __init__(self, status: int, message: str, item_index: int | None = None) -> None:
        super().__init__(message)
        self.status = status
        self.message = message
        self.item_index = item_index

    def response(self) -> JSONResponse:
        body: dict = {"error": self.message}
        if self.item_index is not None:
            body["item_index"] = self.item_index
        return JSONResponse(status_code=self.status, content=body)


def _validated_request(body: object, encoders: dict[str, Encoder]) -> tuple[Encoder, str, list[str]]:
    if not isinstance(body, dict):
        raise _RequestError(400, "request body must be a JSON object")
    for field in ("kind", "items", "model"):
        if field not in body:
            raise _RequestError(400, f"missing field {field!r}")
    kind = body["kind"]
    if kind not in KINDS:
        raise _RequestError(400, f"kind must be one of {list(KINDS)}, got {kind!r}")
    model = body["model"]
    if not isinstance(model, str):
        raise _RequestError(400, "model must be a string")
    if model not in encoders:
        raise _RequestError(404, f"unknown model {model!r}; available: {sorted(encoders)}")
    items = body["items"]
    if not isinstance(items, list):
        raise _RequestError(400, "items must be a list")
    if not items:
        raise _RequestError(400, "items must not be empty")
    if len(items) > MAX_BATCH:
        raise _RequestError(413, f"batch of {len(items)} exceeds the limit of {MAX_BATCH}")
    for index, item in enumerate(items):
        if not isinstance(item, str):
            raise _RequestError(
                400, f"item {index} must be a string, got {type(item).__name__}", index
            )
    return encoders[model], kind, items


def _decode_image_item(payload: str, index: int) -> tuple[bytes, Image.Image]:
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise _RequestError(400, f"item {index} is not valid base64: {exc}", index) from exc
    try:
        image = Image.open(io.BytesIO(raw))
        image.load()
    except Exception as exc:  # Pillow raises a zoo of types for bad bytes
        raise _RequestError(400, f"item {index} is not a decodable image: {exc}", index) from exc
    return raw, image


def _embed_items(
    encoder: Encoder, kind: str, items: list[str], recorder: FixtureRecorder | None
) -> dict:
    if kind == "text":
        keys = [hashlib.sha256(item.encode("utf-8")).hexdigest() for item in items]
        matrix = encoder.encode_texts(items)
    else:
        blobs_images = [_decode_image_item(item, index) for index, item in enumerate(items)]
        keys = [hashlib.sha256(raw).hexdigest() for raw, _ in blobs_images]
        matrix = encoder.encode_images([image for _, image in blobs_images])
    embeddings = [[float(value) for value in row] for row in matrix]
    if recorder is not None:
        for key, row in zip(keys, embeddings):
            recorder.record(encoder.model_id, kind, key, row)
    return {"embeddings": embeddings, "dim": encoder.dim, "model": encoder.model_id}


def create_app(encoders: Sequence[Encoder], recorder: FixtureRecorder | None = None) -> FastAPI:
    """Wire encoders (and an optional fixture recorder) into the app."""
    by_id: dict[str, Encoder] = {}
    for encoder in encoders:
        if encoder.model_id in by_id:
            raise ValueError(f"duplicate model id {encoder.model_id!r}")
        by_id[encoder.model_id] = encoder
    if not by_id:
        raise ValueError("at least one encoder is required")

    app = FastAPI(title="embed-service", docs_url=None, redoc_url=None)

    @app.get("/v1/models")
    def list_models() -> list[dict]:
        return [
            {"id": e.model_id, "dim": e.dim, "input_resolution": e.input_resolution}
            for e in by_id.values()
        ]

    @app.post("/v1/embed")
    async def embed(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _RequestError(400, "request body is not valid JSON").response()
        try:
            encoder, kind, items = _validated_request(body, by_id)
            return await run_in_threadpool(_embed_items, encoder, kind, items, recorder)
        except _RequestError as exc:
            return exc.response()

    return app
