"""HTTP surface: /encode, /sds_grad, /health.

The service is stateless; no request mutates server state. Model inference is
serialized through a lock (one accelerator), while the HTTP layer may accept
concurrently. Responses are rendered with sorted keys and fixed separators so
identical requests produce byte-identical bodies.
"""

from __future__ import annotations

import json
import threading

from fastapi import FastAPI, Request
from fastapi.responses import Response

from .config import ServiceConfig
from .model import StubDiffusionModel, load_lora_dir
from .wire import (
    PROTOCOL_VERSION,
    WireError,
    encode_tensor,
    parse_encode_request,
    parse_sds_request,
)


def _json_bytes(payload: dict, status: int = 200) -> Response:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return Response(content=body, status_code=status, media_type="application/json")


def _error(status: int, detail: str) -> Response:
    return _json_bytes({"detail": detail}, status=status)


def create_app(config: ServiceConfig) -> FastAPI:
    config.validate()
    model = StubDiffusionModel.load(config.model_path)
    loras = load_lora_dir(config.lora_dir)
    lock = threading.Lock()

    app = FastAPI(title="diffusion-service", docs_url=None, redoc_url=None)
    app.state.config = config
    app.state.model = model
    app.state.loras = loras

    @app.get("/health")
    def health():
        return _json_bytes(
            {
                "status": "ok",
                "protocol_version": PROTOCOL_VERSION,
                "lora_ids": sorted(loras),
            }
        )

    async def _read_body(request: Request):
        try:
            return await request.json()
        except Exception as exc:
            raise WireError(f"body is not valid JSON: {exc}") from None

    @app.post("/encode")
    async def encode(request: Request):
        try:
            body = await _read_body(request)
            images = parse_encode_request(body, config.max_batch)
        except WireError as exc:
            return _error(exc.status, str(exc))
        try:
            with lock:
                latents = app.state.model.encode(images)
        except Exception as exc:
            return _error(500, f"inference failure: {exc}")
        return _json_bytes(
            {
                "protocol_version": PROTOCOL_VERSION,
                "tensors": {"latents": encode_tensor(latents)},
            }
        )

    @app.post("/sds_grad")
    async def sds_grad(request: Request):
        try:
            body = await _read_body(request)
            req = parse_sds_request(body, config.max_batch)
        except WireError as exc:
            return _error(exc.status, str(exc))
        lora = None
        if req.lora_id:
            lora = loras.get(req.lora_id)
            if lora is None:
                return _error(404, f"unknown lora_id {req.lora_id!r}")
        try:
            with lock:
                grad, t, w = app.state.model.sds_gradient(
                    req.latents,
                    req.prompt,
                    lora,
                    req.t_min,
                    req.t_max,
                    req.cfg_scale,
                    req.seed,
                    wt_mode=config.wt_mode,
                )
        except Exception as exc:
            return _error(500, f"inference failure: {exc}")
        return _json_bytes(
            {
                "protocol_version": PROTOCOL_VERSION,
                "provider": "diffusion-service",
                "tensors": {
                    "grad_latent": encode_tensor(grad),
                    "t_sampled": encode_tensor(t),
                    "w_t": encode_tensor(w),
                },
            }
        )

    return app


def create_app_from_env() -> FastAPI:
    return create_app(ServiceConfig.from_env())
