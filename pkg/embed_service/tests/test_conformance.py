"""Live-wire conformance: the real scoring client against a running server.

A uvicorn instance serves the app on an ephemeral localhost port in a
background thread; `vismark`'s remote backend — the consumer this service
exists for — must satisfy every contract it relies on: advertised models,
unit rows, ordering, determinism, batching, and record/replay parity.
"""

import base64
import socket
import threading
import time

import numpy as np
import pytest
import requests
import uvicorn

from embed_service import FixtureRecorder, build_encoder, create_app

from vismark.imgcore import BBox, ImageBuffer, PointF, encode_png
from vismark.scoring import (
    BackendTransportError,
    ProtocolError,
    fixture_backend,
    remote_backend,
    score_pairs,
)
from vismark.tasks import KeypointInstance, name_keypoints


def _gradient_image(width, height, phase=0):
    arr = np.zeros((height, width, 3), dtype=np.uint8)
    ys, xs = np.mgrid[0:height, 0:width]
    arr[..., 0] = (xs * 3 + phase) % 251
    arr[..., 1] = (ys * 5 + 60) % 196 + 60
    arr[..., 2] = (xs + ys * 2 + 80) % 176 + 80
    return ImageBuffer(arr)


@pytest.fixture(scope="module")
def live(tmp_path_factory):
    record = tmp_path_factory.mktemp("record") / "fixture.jsonl"
    app = create_app([build_encoder("toy-64")], FixtureRecorder(record))

    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    server = uvicorn.Server(uvicorn.Config(app, log_level="error"))
    thread = threading.Thread(target=server.run, kwargs={"sockets": [sock]}, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10.0
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("server did not start within 10s")
        time.sleep(0.01)

    yield f"http://127.0.0.1:{port}", record
    server.should_exit = True
    thread.join(timeout=10.0)


def test_backend_validates_model_on_connect(live):
    url, _ = live
    backend = remote_backend(url, "toy-64")
    assert backend.dim == 64
    assert "toy-64" in backend.identifier


def test_unadvertised_model_is_rejected(live):
    url, _ = live
    with pytest.raises(ProtocolError, match="not advertised"):
        remote_backend(url, "toy-128")


def test_text_rows_are_unit_float32_in_order(live):
    url, _ = live
    backend = remote_backend(url, "toy-64")
    texts = ["first prompt", "second prompt", "third prompt"]
    rows = backend.embed_texts(texts)
    assert rows.shape == (3, 64)
    assert rows.dtype == np.float32
    assert np.allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-5)
    assert np.array_equal(backend.embed_texts(["second prompt"])[0], rows[1])


def test_image_rows_match_by_content(live):
    url, _ = live
    backend = remote_backend(url, "toy-64")
    images = [_gradient_image(50, 40), _gradient_image(50, 40, phase=7)]
    rows = backend.embed_images(images)
    assert rows.shape == (2, 64)
    assert not np.array_equal(rows[0], rows[1])
    assert np.array_equal(backend.embed_images([images[1]])[0], rows[1])


def test_determinism_across_backends(live):
    url, _ = live
    first = remote_backend(url, "toy-64").embed_texts(["stable"])
    second = remote_backend(url, "toy-64").embed_texts(["stable"])
    assert np.array_equal(first, second)


def test_batches_larger_than_chunk_size(live):
    url, _ = live
    backend = remote_backend(url, "toy-64", batch_size=8)
    texts = [f"prompt number {i}" for i in range(20)]  # 3 HTTP batches
    rows = backend.embed_texts(texts)
    assert rows.shape == (20, 64)
    singles = np.stack([remote_backend(url, "toy-64").embed_texts([t])[0] for t in texts[:3]])
    assert np.array_equal(rows[:3], singles)


def test_duplicates_share_rows(live):
    url, _ = live
    rows = remote_backend(url, "toy-64").embed_texts(["twin", "other", "twin"])
    assert np.array_equal(rows[0], rows[2])


def test_score_pairs_through_the_wire(live):
    url, _ = live
    backend = remote_backend(url, "toy-64")
    matrix = score_pairs(backend, [_gradient_image(40, 40, phase=p) for p in (0, 5, 9)], ["a cat", "a dog"])
    assert matrix.values.shape == (2, 3)
    assert np.all(np.isfinite(matrix.values))
    assert np.all(np.abs(matrix.values) <= 1.0 + 1e-6)


def test_naming_pipeline_runs_end_to_end(live):
    url, _ = live
    inst = KeypointInstance(
        _gradient_image(64, 64),
        ("beak", "tail"),
        (PointF(20.0, 20.0), PointF(44.0, 44.0)),
        BBox(0, 0, 64, 64),
        "bird",
    )
    result = name_keypoints(inst, remote_backend(url, "toy-64"))
    assert result.plan.matrix.shape == (2, 2)
    assert 0.0 <= result.t2i_accuracy <= 1.0
    assert 0.0 <= result.i2t_accuracy <= 1.0


def test_dead_endpoint_is_a_transport_error():
    with pytest.raises(BackendTransportError):
        remote_backend("http://127.0.0.1:9", "toy-64", max_retries=0, timeout=2.0)


def test_gate_s1_conformance_and_replay(live):
    """One verdict line for the live protocol + record/replay guarantee."""
    url, record = live
    texts = ["gate-s1 cat", "gate-s1 dog"]
    images = [_gradient_image(56, 44, phase=21), _gradient_image(56, 44, phase=22)]
    payloads = [base64.b64encode(encode_png(img)).decode("ascii") for img in images]

    served_text = requests.post(
        f"{url}/v1/embed", json={"kind": "text", "items": texts, "model": "toy-64"}, timeout=10
    ).json()["embeddings"]
    served_image = requests.post(
        f"{url}/v1/embed", json={"kind": "image", "items": payloads, "model": "toy-64"}, timeout=10
    ).json()["embeddings"]

    backend = remote_backend(url, "toy-64")
    remote_text = backend.embed_texts(texts)
    remote_image = backend.embed_images(images)

    replay = fixture_backend(record)
    replay_text = replay.embed_texts(texts)
    replay_image = replay.embed_images(images)

    replay_exact = np.array_equal(replay_text, np.asarray(served_text, dtype=np.float32)) and (
        np.array_equal(replay_image, np.asarray(served_image, dtype=np.float32))
    )
    remote_close = np.allclose(remote_text, replay_text, atol=1e-6) and np.allclose(
        remote_image, replay_image, atol=1e-6
    )
    ok = replay_exact and remote_close
    line = (
        "[gate S1] live protocol + record/replay: "
        f"{'PASS' if ok else 'FAIL'} -- replay bit-exact vs served: {replay_exact}, "
        f"remote client within 1e-6 of replay: {remote_close}"
    )
    print(line)
    assert ok, line
