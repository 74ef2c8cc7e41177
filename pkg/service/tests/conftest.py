import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from diffusion_service.app import create_app
from diffusion_service.config import ServiceConfig

from stub_oracle import (
    B_COND,
    B_UNCOND,
    ENCODE_MATRIX,
    K_COND,
    K_UNCOND,
    TOY_DELTA_B,
    TOY_DELTA_K,
)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def model_path(tmp_path):
    path = tmp_path / "model.npz"
    np.savez(
        path,
        encode_matrix=ENCODE_MATRIX,
        k_uncond=K_UNCOND,
        b_uncond=B_UNCOND,
        k_cond=K_COND,
        b_cond=B_COND,
    )
    return str(path)


@pytest.fixture
def lora_dir(tmp_path):
    d = tmp_path / "loras"
    d.mkdir()
    np.savez(d / "toy.npz", delta_k=TOY_DELTA_K, delta_b=TOY_DELTA_B)
    return str(d)


@pytest.fixture
def service_config(model_path, lora_dir):
    return ServiceConfig(model_path=model_path, lora_dir=lora_dir, max_batch=4)


@pytest.fixture
def client(service_config):
    return TestClient(create_app(service_config))


@pytest.fixture
def live_endpoint(service_config):
    """A real uvicorn server on an ephemeral port, for HTTP-client tests."""
    import uvicorn

    app = create_app(service_config)
    server = uvicorn.Server(
        uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10.0
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("service did not start")
        time.sleep(0.01)
    port = server.servers[0].sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5.0)
