"""Embedding backbones behind one interface.

Two families: `toy-<dim>` — a deterministic content-hash encoder that needs
no weights and exists so the protocol, recording, and clients can be
exercised hermetically — and CLIP backbones loaded lazily through
`transformers`. Every encoder returns L2-normalized float64 rows and owns
its preprocessing (the service hands it decoded RGB images, never raw
bytes), so clients never resize anything.
"""

from __future__ import annotations

import hashlib
import re
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from PIL import Image

#: toy encoders resize to this square before hashing, like a real backbone
#: with a native input size would.
TOY_RESOLUTION = 224

_TOY_PATTERN = re.compile(r"^toy-([1-9][0-9]{0,3})$")

#: Service-facing id -> (huggingface checkpoint, native input resolution).
CLIP_MODELS = {
    "clip-vit-b32": ("openai/clip-vit-base-patch32", 224),
    "clip-vit-b16": ("openai/clip-vit-base-patch16", 224),
    "clip-vit-l14-336": ("openai/clip-vit-large-patch14-336", 336),
}


@runtime_checkable
class Encoder(Protocol):
    """What the service needs from a backbone."""

    model_id: str
    dim: int
    input_resolution: int

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray: ...

    def encode_images(self, images: Sequence[Image.Image]) -> np.ndarray: ...


def _unit_rows(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("encoder produced a zero vector")
    return arr / norms


class ToyEncoder:
    """Deterministic stand-in backbone: content-hash-seeded unit vectors.

    Not a learned model. The same payload maps to the same vector in any
    process, different payloads to effectively independent random unit
    vectors, which is exactly what protocol and record/replay tests need.
    """

    def __init__(self, model_id: str, dim: int) -> None:
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.model_id = model_id
        self.dim = dim
        self.input_resolution = TOY_RESOLUTION

    def _vector(self, *parts: bytes) -> np.ndarray:
        digest = hashlib.sha256(b"|".join(parts)).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "big")))
        vec = rng.normal(size=self.dim)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec[0] = 1.0
            norm = 1.0
        return vec / norm

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._vector(b"text", str(t).encode("utf-8")) for t in texts])

    def encode_images(self, images: Sequence[Image.Image]) -> np.ndarray:
        size = (self.input_resolution, self.input_resolution)
        return np.stack(
            [
                self._vector(b"image", img.convert("RGB").resize(size, Image.BILINEAR).tobytes())
                for img in images
            ]
        )


class ClipEncoder:
    """A CLIP backbone via `transformers`, using the checkpoint's own
    preprocessing (resize, crop, normalize) and projection heads.

    Imports torch/transformers lazily so the service can run toy-only
    without either installed.
    """

    def __init__(self, model_id: str, checkpoint: str, input_resolution: int, **load_kwargs) -> None:
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self._model = CLIPModel.from_pretrained(checkpoint, **load_kwargs)
        self._model.eval()
        self._processor = CLIPProcessor.from_pretrained(checkpoint, **load_kwargs)
        self.model_id = model_id
        self.dim = int(self._model.config.projection_dim)
        self.input_resolution = input_resolution

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        with self._torch.no_grad():
            inputs = self._processor(
                text=[str(t) for t in texts], return_tensors="pt", padding=True, truncation=True
            )
            features = self._model.get_text_features(**inputs)
        return _unit_rows(features.cpu().numpy())

    def encode_images(self, images: Sequence[Image.Image]) -> np.ndarray:
        with self._torch.no_grad():
            inputs = self._processor(
                images=[img.convert("RGB") for img in images], return_tensors="pt"
            )
            features = self._model.get_image_features(**inputs)
        return _unit_rows(features.cpu().numpy())


def build_encoder(model_id: str, **load_kwargs) -> Encoder:
    """Instantiate the encoder for a model id.

    `toy-<dim>` builds instantly; CLIP ids pull weights through
    `transformers` (pass e.g. local_files_only=True to forbid downloads).
    """
    match = _TOY_PATTERN.match(model_id)
    if match:
        return ToyEncoder(model_id, int(match.group(1)))
    if model_id in CLIP_MODELS:
        checkpoint, resolution = CLIP_MODELS[model_id]
        return ClipEncoder(model_id, checkpoint, resolution, **load_kwargs)
    known = ["toy-<dim>", *sorted(CLIP_MODELS)]
    raise ValueError(f"unknown model id {model_id!r}; known: {', '.join(known)}")


def parse_model_list(text: str) -> tuple[str, ...]:
    """Split a comma-separated model list, rejecting empties and duplicates."""
    ids = tuple(part.strip() for part in text.split(",") if part.strip())
    if not ids:
        raise ValueError(f"no model ids in {text!r}")
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate model ids in {text!r}")
    return ids
