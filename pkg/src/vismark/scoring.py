"""Compatibility scoring between images and texts via pluggable backends.

A backend embeds batches of texts and images into a shared space; this module
turns those embeddings into cosine score matrices (rows = texts, cols =
images), averages matrices across backbones and prompt variants, renders
prompt templates, and provides three concrete backends: a deterministic
synthetic oracle for tests, a remote HTTP backend speaking the embed-service
protocol, and a record/replay fixture backend.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from vismark.imgcore import Color, ImageBuffer, PointF, encode_png

DEFAULT_BATCH_SIZE = 32

_SLOT_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

_ZERO_NORM = 1e-12


class ProtocolError(RuntimeError):
    """The remote service answered, but not in the agreed wire format."""


class BackendTransportError(RuntimeError):
    """The remote service could not be reached after the configured retries."""


class FixtureLookupError(LookupError):
    """A content hash has no recorded embedding in the fixture file."""


class ScorerBackend(Protocol):
    """Anything that can embed batches of texts and images."""

    @property
    def identifier(self) -> str: ...

    @property
    def dim(self) -> int: ...

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...

    def embed_images(self, images: Sequence[ImageBuffer]) -> np.ndarray: ...


def content_hash_text(text: str) -> str:
    """SHA-256 over the UTF-8 bytes of the text."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def content_hash_image(image: ImageBuffer) -> str:
    """SHA-256 over the canonical PNG encoding of the image."""
    return hashlib.sha256(encode_png(image)).hexdigest()


def _normalize_rows(arr, what: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{what} embeddings must be a 2-D batch, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} embeddings must be finite")
    norms = np.linalg.norm(a, axis=1)
    bad = np.nonzero(norms < _ZERO_NORM)[0]
    if bad.size:
        raise ValueError(f"{what} embedding at index {int(bad[0])} has zero norm")
    return a / norms[:, np.newaxis]


def cosine_score(a, b) -> float:
    """Cosine similarity of two vectors, clamped into [-1, 1]."""
    va = np.asarray(a, dtype=np.float64).ravel()
    vb = np.asarray(b, dtype=np.float64).ravel()
    if va.shape != vb.shape:
        raise ValueError(f"dim mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class ScoreMatrix:
    """Scores with rows = texts (questions) and columns = images (answers)."""

    values: np.ndarray
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"score matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("score matrix entries must be finite")
        if v.shape != (len(self.row_labels), len(self.col_labels)):
            raise ValueError(
                f"shape {v.shape} does not match {len(self.row_labels)} row and "
                f"{len(self.col_labels)} col labels"
            )
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "row_labels", tuple(self.row_labels))
        object.__setattr__(self, "col_labels", tuple(self.col_labels))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def score_pairs(
    backend: ScorerBackend,
    images: Sequence[ImageBuffer],
    texts: Sequence[str],
    *,
    image_labels: Sequence[str] | None = None,
) -> ScoreMatrix:
    """Cosine scores for every (text, image) pair.

    Embeddings are defensively re-normalized on ingest; entry (q, a) is the
    similarity of text q and image a. Column labels default to short content
    digests of the images, so permuting the image list permutes columns and
    labels identically.
    """
    images = list(images)
    texts = list(texts)
    if not images or not texts:
        raise ValueError("score_pairs needs at least one image and one text")
    t = _normalize_rows(backend.embed_texts(texts), "text")
    if t.shape[0] != len(texts):
        raise ValueError(
            f"backend {backend.identifier} returned {t.shape[0]} embeddings for {len(texts)} texts"
        )
    i = _normalize_rows(backend.embed_images(images), "image")
    if i.shape[0] != len(images):
        raise ValueError(
            f"backend {backend.identifier} returned {i.shape[0]} embeddings for {len(images)} images"
        )
    if t.shape[1] != i.shape[1]:
        raise ValueError(f"text dim {t.shape[1]} != image dim {i.shape[1]}")
    if image_labels is None:
        col_labels = tuple(img.content_digest()[:12] for img in images)
    else:
        if len(image_labels) != len(images):
            raise ValueError("one label per image")
        col_labels = tuple(image_labels)
    return ScoreMatrix(t @ i.T, tuple(texts), col_labels)


def ensemble_scores(matrices: Sequence[ScoreMatrix]) -> ScoreMatrix:
    """Entrywise arithmetic mean of score matrices sharing shape and labels."""
    if not matrices:
        raise ValueError("ensemble of zero matrices")
    first = matrices[0]
    for m in matrices[1:]:
        if m.shape != first.shape:
            raise ValueError(f"shape mismatch: {m.shape} vs {first.shape}")
        if m.row_labels != first.row_labels or m.col_labels != first.col_labels:
            raise ValueError("all ensembled matrices must share labels")
    mean = np.mean([m.values for m in matrices], axis=0)
    return ScoreMatrix(mean, first.row_labels, first.col_labels)


@dataclass(frozen=True)
class PromptTemplate:
    """A text pattern with named {slot} placeholders."""

    pattern: str

    @property
    def slots(self) -> tuple[str, ...]:
        seen: list[str] = []
        for name in _SLOT_RE.findall(self.pattern):
            if name not in seen:
                seen.append(name)
        return tuple(seen)

    def render(self, slots: Mapping[str, str]) -> str:
        needed = self.slots
        missing = [s for s in needed if s not in slots]
        if missing:
            raise ValueError(f"missing slot value(s) {missing} for pattern {self.pattern!r}")
        extra = [s for s in slots if s not in needed]
        if extra:
            raise ValueError(f"unused slot value(s) {extra} for pattern {self.pattern!r}")
        out = self.pattern
        for name in needed:
            out = out.replace("{" + name + "}", str(slots[name]))
        return out


def render_template(template: PromptTemplate | str, slots: Mapping[str, str]) -> str:
    """Render a template (or raw pattern string) with the given slot values."""
    if isinstance(template, str):
        template = PromptTemplate(template)
    return template.render(slots)


# --------------------------------------------------------------------------
# Synthetic oracle backend
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionSignature:
    """Where a marker must land (within a pixel tolerance) to mean a key."""

    center: PointF
    tolerance: float

    def __post_init__(self) -> None:
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be > 0, got {self.tolerance}")


def _hash_generator(*parts: str) -> np.random.Generator:
    digest = hashlib.sha256("|".join(parts).encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "big")))


class SyntheticOracle:
    """A deterministic stand-in for a vision-language model.

    Texts embed to hash-derived unit vectors keyed by their canonical key
    (the longest registered key appearing in the text, else the text itself).
    An image whose exact-color marker pixels center within a registered
    region's tolerance embeds to that key's text vector plus small seeded
    noise; any other image embeds to a hash of its raw pixels. By
    construction, a text scores close to 1 against its own planted image and
    near 0 against everything else.
    """

    def __init__(
        self,
        seed: int,
        dim: int,
        alignment: Mapping[str, RegionSignature],
        *,
        marker_color: Color = Color(255, 0, 0),
        noise_norm: float = 0.03,
    ) -> None:
        if dim < 8:
            raise ValueError(f"dim must be >= 8, got {dim}")
        if not 0.0 <= noise_norm <= 0.05:
            raise ValueError(f"noise_norm must be in [0, 0.05], got {noise_norm}")
        self._seed = int(seed)
        self._dim = int(dim)
        self._alignment = dict(alignment)
        self._color = np.array(marker_color.as_tuple(), dtype=np.uint8)
        self._noise_norm = float(noise_norm)

    @property
    def identifier(self) -> str:
        return f"synthetic:{self._seed}:{self._dim}"

    @property
    def dim(self) -> int:
        return self._dim

    def _unit(self, kind: str, key: str) -> np.ndarray:
        gen = _hash_generator(str(self._seed), kind, key)
        v = gen.standard_normal(self._dim)
        return v / np.linalg.norm(v)

    def canonical_key(self, text: str) -> str:
        """The longest registered key contained in the text, else the text."""
        lowered = text.lower()
        best: str | None = None
        for key in self._alignment:
            if key.lower() in lowered and (best is None or len(key) > len(best)):
                best = key
        return best if best is not None else text

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        rows = [self._unit("text", self.canonical_key(t)) for t in texts]
        return np.stack(rows).astype(np.float32)

    def _match_key(self, image: ImageBuffer) -> str | None:
        marked = np.all(image.array == self._color, axis=-1)
        if not marked.any():
            return None
        ys, xs = np.nonzero(marked)
        cx, cy = float(xs.mean()), float(ys.mean())
        best: tuple[float, int, str] | None = None
        for order, (key, sig) in enumerate(self._alignment.items()):
            d = float(np.hypot(cx - sig.center.x, cy - sig.center.y))
            if d <= sig.tolerance and (best is None or (d, order) < best[:2]):
                best = (d, order, key)
        return best[2] if best else None

    def embed_images(self, images: Sequence[ImageBuffer]) -> np.ndarray:
        rows = []
        for image in images:
            key = self._match_key(image)
            if key is None:
                rows.append(self._unit("image-content", image.content_digest()))
                continue
            v = self._unit("text", key)
            if self._noise_norm > 0:
                noise = _hash_generator(str(self._seed), "noise", image.content_digest()).standard_normal(self._dim)
                v = v + noise / np.linalg.norm(noise) * self._noise_norm
            rows.append(v / np.linalg.norm(v))
        return np.stack(rows).astype(np.float32)


def synthetic_oracle(
    seed: int,
    dim: int,
    alignment: Mapping[str, RegionSignature] | None = None,
    **kwargs,
) -> SyntheticOracle:
    """Build the deterministic test backend; empty alignment gives a purely
    random (hash-driven) embedder, useful as a chance-level baseline."""
    return SyntheticOracle(seed, dim, alignment or {}, **kwargs)


class ConstantImageBackend:
    """Embeds every image to one fixed unit vector: a symmetric backend.

    Because image content is ignored entirely, any score is invariant to
    marking, which makes this the canonical "marker has no effect" control
    for the bias probe.
    """

    def __init__(self, seed: int, dim: int) -> None:
        if dim < 8:
            raise ValueError(f"dim must be >= 8, got {dim}")
        self._seed = int(seed)
        self._dim = int(dim)
        self._oracle = SyntheticOracle(seed, dim, {})

    @property
    def identifier(self) -> str:
        return f"constant:{self._seed}:{self._dim}"

    @property
    def dim(self) -> int:
        return self._dim

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return self._oracle.embed_texts(texts)

    def embed_images(self, images: Sequence[ImageBuffer]) -> np.ndarray:
        row = self._oracle._unit("constant-image", "the-one-vector").astype(np.float32)
        return np.tile(row, (len(list(images)), 1))


# --------------------------------------------------------------------------
# Remote backend (bridge to the embedding service)
# --------------------------------------------------------------------------


def _body_excerpt(text: str, limit: int = 200) -> str:
    return text[:limit] + ("..." if len(text) > limit else "")


class RemoteBackend:
    """Embeds via the embed-service HTTP protocol.

    Transient failures (connection errors, timeouts, 5xx) are retried with
    exponential backoff; protocol violations (bad JSON, wrong counts, wrong
    dims, 4xx) fail immediately with a body excerpt. Responses are cached by
    content hash, so repeated scoring of the same prompts stays cheap.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        batch_size: int = DEFAULT_BATCH_SIZE,
        max_retries: int = 3,
        backoff: float = 0.25,
        timeout: float = 30.0,
        session=None,
    ) -> None:
        import requests

        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self._requests = requests
        self._endpoint = endpoint.rstrip("/")
        self._model = model
        self._batch_size = batch_size
        self._max_retries = max_retries
        self._backoff = backoff
        self._timeout = timeout
        self._session = session if session is not None else requests.Session()
        self._lock = threading.Lock()
        self._cache: dict[tuple[str, str], np.ndarray] = {}
        advertised = self._fetch_models()
        if model not in advertised:
            raise ProtocolError(
                f"model {model!r} not advertised by {self._endpoint}; available: {sorted(advertised)}"
            )
        self._dim = advertised[model]

    @property
    def identifier(self) -> str:
        return f"remote:{self._endpoint}:{self._model}"

    @property
    def dim(self) -> int:
        return self._dim

    def _send(self, method: str, path: str, payload: dict | None, context: str):
        url = self._endpoint + path
        last_exc: Exception | None = None
        for attempt in range(self._max_retries + 1):
            if attempt:
                time.sleep(self._backoff * (2 ** (attempt - 1)))
            try:
                resp = self._session.request(method, url, json=payload, timeout=self._timeout)
            except (self._requests.ConnectionError, self._requests.Timeout) as exc:
                last_exc = exc
                continue
            if resp.status_code >= 500:
                last_exc = BackendTransportError(
                    f"{context}: server error {resp.status_code}: {_body_excerpt(resp.text)}"
                )
                continue
            if resp.status_code != 200:
                raise ProtocolError(
                    f"{context}: HTTP {resp.status_code}: {_body_excerpt(resp.text)}"
                )
            return resp
        raise BackendTransportError(
            f"{context}: giving up after {self._max_retries + 1} attempts: {last_exc}"
        ) from last_exc

    def _fetch_models(self) -> dict[str, int]:
        resp = self._send("GET", "/v1/models", None, "listing models")
        try:
            listing = resp.json()
            return {str(entry["id"]): int(entry["dim"]) for entry in listing}
        except (ValueError, TypeError, KeyError) as exc:
            raise ProtocolError(
                f"malformed /v1/models response ({exc}): {_body_excerpt(resp.text)}"
            ) from exc

    def _embed_batch(self, kind: str, items: list[str], first_index: int) -> np.ndarray:
        context = f"embedding {kind} items {first_index}..{first_index + len(items) - 1}"
        resp = self._send(
            "POST", "/v1/embed", {"kind": kind, "items": items, "model": self._model}, context
        )
        try:
            payload = resp.json()
            vectors = payload["embeddings"]
        except (ValueError, TypeError, KeyError) as exc:
            raise ProtocolError(f"{context}: malformed response ({exc}): {_body_excerpt(resp.text)}") from exc
        if not isinstance(vectors, list) or len(vectors) != len(items):
            got = len(vectors) if isinstance(vectors, list) else type(vectors).__name__
            raise ProtocolError(f"{context}: expected {len(items)} embeddings, got {got}")
        arr = np.asarray(vectors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != self._dim:
            raise ProtocolError(
                f"{context}: embedding dim {arr.shape[-1] if arr.ndim == 2 else '?'} != advertised {self._dim}"
            )
        try:
            return _normalize_rows(arr, kind).astype(np.float32)
        except ValueError as exc:
            raise ProtocolError(f"{context}: {exc}") from exc

    def _embed(self, kind: str, payloads: list[str], hashes: list[str]) -> np.ndarray:
        rows: list[np.ndarray | None] = [None] * len(payloads)
        with self._lock:
            for idx, h in enumerate(hashes):
                cached = self._cache.get((kind, h))
                if cached is not None:
                    rows[idx] = cached
        missing = [idx for idx, row in enumerate(rows) if row is None]
        for start in range(0, len(missing), self._batch_size):
            chunk = missing[start : start + self._batch_size]
            batch = self._embed_batch(kind, [payloads[i] for i in chunk], chunk[0])
            with self._lock:
                for row, idx in zip(batch, chunk):
                    rows[idx] = row
                    self._cache[(kind, hashes[idx])] = row
        return np.stack(rows)  # type: ignore[arg-type]

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        texts = [str(t) for t in texts]
        return self._embed("text", texts, [content_hash_text(t) for t in texts])

    def embed_images(self, images: Sequence[ImageBuffer]) -> np.ndarray:
        blobs = [encode_png(img) for img in images]
        payloads = [base64.b64encode(b).decode("ascii") for b in blobs]
        hashes = [hashlib.sha256(b).hexdigest() for b in blobs]
        return self._embed("image", payloads, hashes)


def remote_backend(endpoint: str, model: str, **kwargs) -> RemoteBackend:
    """Connect to an embedding service and validate the model is advertised."""
    return RemoteBackend(endpoint, model, **kwargs)


# --------------------------------------------------------------------------
# Fixture backend (record/replay)
# --------------------------------------------------------------------------


class FixtureBackend:
    """Replays embeddings recorded in a JSON-Lines fixture file.

    Each line is {"key": sha256-of-canonical-content, "kind": "text"|"image",
    "model": id, "embedding": [...]}; canonical content is UTF-8 text bytes
    or PNG bytes from encode_png. Vectors are returned exactly as recorded.
    """

    def __init__(self, path: str | Path, model: str | None = None) -> None:
        path = Path(path)
        entries: dict[tuple[str, str, str], np.ndarray] = {}
        models: list[str] = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                key = str(record["key"])
                kind = str(record["kind"])
                rec_model = str(record["model"])
                vec = np.asarray(record["embedding"], dtype=np.float32)
            except (ValueError, TypeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad fixture line ({exc})") from exc
            if vec.ndim != 1 or vec.size == 0:
                raise ValueError(f"{path}:{lineno}: embedding must be a non-empty vector")
            if rec_model not in models:
                models.append(rec_model)
            entries[(rec_model, kind, key)] = vec
        if not entries:
            raise ValueError(f"{path}: fixture file has no entries")
        if model is None:
            if len(models) != 1:
                raise ValueError(
                    f"{path}: fixture records multiple models {sorted(models)}; pass model explicitly"
                )
            model = models[0]
        elif model not in models:
            raise ValueError(f"{path}: no entries for model {model!r}; recorded: {sorted(models)}")
        self._path = path
        self._model = model
        self._table = {
            (kind, key): vec for (m, kind, key), vec in entries.items() if m == model
        }
        dims = {v.size for v in self._table.values()}
        if len(dims) != 1:
            raise ValueError(f"{path}: inconsistent embedding dims {sorted(dims)} for model {model!r}")
        self._dim = dims.pop()

    @property
    def identifier(self) -> str:
        return f"fixture:{self._model}"

    @property
    def dim(self) -> int:
        return self._dim

    def _lookup(self, kind: str, hashes: list[str], describe: str) -> np.ndarray:
        missing = [(i, h) for i, h in enumerate(hashes) if (kind, h) not in self._table]
        if missing:
            detail = "; ".join(f"{describe} {i} sha256={h}" for i, h in missing)
            raise FixtureLookupError(f"{self._path}: no recorded embedding for {detail}")
        return np.stack([self._table[(kind, h)] for h in hashes])

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return self._lookup("text", [content_hash_text(t) for t in texts], "text")

    def embed_images(self, images: Sequence[ImageBuffer]) -> np.ndarray:
        return self._lookup("image", [content_hash_image(img) for img in images], "image")


def fixture_backend(path: str | Path, model: str | None = None) -> FixtureBackend:
    """Open a recorded fixture file as a backend."""
    return FixtureBackend(path, model)
