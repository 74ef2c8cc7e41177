import numpy as np
import pytest
from fastapi.testclient import TestClient

from diffusion_service.app import create_app
from diffusion_service.config import ServiceConfig


def test_health_reports_version_and_loras(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    payload = resp.json()
    assert payload["status"] == "ok"
    assert payload["protocol_version"] == 1
    assert payload["lora_ids"] == ["toy"]


def test_health_lists_every_adapter(model_path, tmp_path):
    d = tmp_path / "two_loras"
    d.mkdir()
    for name in ("wood", "stone"):
        np.savez(d / f"{name}.npz", delta_k=0.1, delta_b=0.0)
    client = TestClient(create_app(ServiceConfig(model_path=model_path, lora_dir=str(d))))
    assert client.get("/health").json()["lora_ids"] == ["stone", "wood"]


def test_unknown_route_and_method(client):
    assert client.get("/nope").status_code == 404
    assert client.get("/sds_grad").status_code == 405


def test_config_from_env_and_validation(model_path, lora_dir):
    cfg = ServiceConfig.from_env(
        {"MODEL_PATH": model_path, "LORA_DIR": lora_dir, "MAX_BATCH": "2", "WT_MODE": "unit"}
    )
    assert (cfg.max_batch, cfg.wt_mode) == (2, "unit")
    with pytest.raises(KeyError):
        ServiceConfig.from_env({})
    with pytest.raises(FileNotFoundError):
        ServiceConfig.from_env({"MODEL_PATH": "/does/not/exist.npz"})
    with pytest.raises(ValueError):
        ServiceConfig.from_env({"MODEL_PATH": model_path, "WT_MODE": "bogus"})
    with pytest.raises(ValueError):
        ServiceConfig.from_env({"MODEL_PATH": model_path, "MAX_BATCH": "0"})


def test_unit_weighting_mode(model_path, rng):
    from diffusion_service.wire import decode_tensor, encode_tensor

    client = TestClient(
        create_app(ServiceConfig(model_path=model_path, wt_mode="unit"))
    )
    z = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
    resp = client.post(
        "/sds_grad",
        json={"protocol_version": 1, "tensors": {"latents": encode_tensor(z)}, "seed": 3},
    )
    w = decode_tensor(resp.json()["tensors"]["w_t"])
    assert np.array_equal(w, np.ones(2, dtype=np.float32))
