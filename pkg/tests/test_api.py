"""HTTP API (health / samples / rewards)"""

import base64

import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.utils.images import decode_ppm, encode_ppm

client = TestClient(app)


def _b64(image: np.ndarray) -> str:
    return base64.b64encode(encode_ppm(image)).decode("ascii")


def test_root_and_health():
    assert client.get("/").json()["status"] == "healthy"
    body = client.get("/api/v1/health").json()
    assert body["status"] == "ok"


def test_memory_status_reports_tape():
    body = client.get("/api/v1/health/memory").json()
    assert body["status"] == "ok"
    assert set(body["tape"]) == {"live_nodes", "peak_nodes", "precision"}
    assert body["memory"]["rss_mb"] > 0


def test_sample_endpoint(denoiser_ckpt):
    payload = {
        "checkpoint": str(denoiser_ckpt),
        "class_id": 2,
        "seed": 4,
        "guidance_w": 2.0,
        "sampler_steps": 3,
        "rewards": "rotation",
    }
    first = client.post("/api/v1/samples", json=payload)
    assert first.status_code == 200
    body = first.json()
    assert body["class_id"] == 2 and body["seed"] == 4
    assert set(body["rewards"]) == {"rotation", "combined"}
    image = decode_ppm(base64.b64decode(body["image_ppm_base64"]))
    assert image.shape == (3, 8, 8)
    # 같은 seed → 같은 이미지
    assert client.post("/api/v1/samples", json=payload).json() == body


def test_sample_missing_checkpoint_is_400(tmp_path):
    response = client.post("/api/v1/samples", json={"checkpoint": str(tmp_path / "none.ckpt"), "class_id": 0})
    assert response.status_code == 400


def test_sample_rejects_bad_class(denoiser_ckpt):
    response = client.post("/api/v1/samples", json={"checkpoint": str(denoiser_ckpt), "class_id": 9})
    assert response.status_code == 422


def test_reward_symmetric_image():
    image = np.full((3, 8, 8), 0.5)
    response = client.post("/api/v1/rewards", json={"image_ppm_base64": _b64(image), "rewards": "rotation,jpeg:0.5"})
    assert response.status_code == 200
    scores = response.json()["rewards"]
    assert scores["rotation"] == 0.0
    assert scores["combined"] == pytest.approx(0.5 * scores["jpeg"])


@pytest.mark.parametrize(
    "payload, code",
    [
        ({"image_ppm_base64": "***not base64***"}, 400),
        ({"image_ppm_base64": _b64(np.zeros((3, 12, 12)))}, 400),
        ({"image_ppm_base64": _b64(np.zeros((3, 8, 8))), "rewards": "sharpness"}, 422),
        ({"image_ppm_base64": _b64(np.zeros((3, 8, 8))), "rewards": "classifier"}, 422),
    ],
)
def test_reward_errors(payload, code):
    assert client.post("/api/v1/rewards", json=payload).status_code == code


async def test_health_over_asgi_transport():
    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(transport=transport, base_url="http://test") as ac:
        response = await ac.get("/api/v1/health")
    assert response.status_code == 200
    assert response.json()["version"] == app.version
