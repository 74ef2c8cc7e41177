"""Guidance providers: analytic oracles and the remote score-distillation client.

A provider turns rendered views into gradients for the optimizer. Pixel-space
providers return image gradients that flow straight into render_backward;
latent-space providers return latent gradients that the pipeline first pulls
through the affine encoder. The remote provider speaks the wire protocol and
is safe to retry (requests are idempotent: the service derives all sampling
from the request seed).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import requests

from .render import RenderOutput
from .wire import (
    PROTOCOL_VERSION,
    GuidanceGradient,
    GuidanceRequest,
    ProtocolError,
    decode_tensor,
    encode_tensor,
    parse_guidance_response,
)


class ProviderError(Exception):
    """Remote provider failed after retries or returned an HTTP error."""


def silhouette_oracle(
    render: RenderOutput, target_mask: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean-squared silhouette mismatch and its image-space gradient.

    Returns (loss, dl_drgb, dl_dalpha); the RGB gradient is zero, the loss
    touches alpha only.
    """
    mask = np.asarray(target_mask, dtype=np.float64)
    if mask.shape != render.alpha.shape:
        raise ValueError(f"mask shape {mask.shape} != alpha {render.alpha.shape}")
    diff = render.alpha - mask
    loss = float(np.mean(diff * diff))
    dl_dalpha = 2.0 * diff / diff.size
    return loss, np.zeros_like(render.rgb), dl_dalpha


def latent_target_oracle(
    latent: np.ndarray, target_latent: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean-squared latent mismatch and its gradient w.r.t. the latent."""
    z = np.asarray(latent, dtype=np.float64)
    zt = np.asarray(target_latent, dtype=np.float64)
    if z.shape != zt.shape:
        raise ValueError(f"latent shape {z.shape} != target {zt.shape}")
    diff = z - zt
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def sds_remote(
    request: GuidanceRequest,
    endpoint: str,
    timeout: float = 30.0,
    retries: int = 2,
    retry_wait: float = 0.5,
) -> GuidanceGradient:
    """POST a gradient request to the service and parse the response.

    Connection-level failures are retried up to `retries` times; HTTP error
    statuses raise ProviderError, malformed bodies raise ProtocolError. The
    caller's arrays are never mutated.
    """
    body = request.to_body()
    url = endpoint.rstrip("/") + "/sds_grad"
    last_exc: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = requests.post(url, json=body, timeout=timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_exc = exc
            if attempt < retries:
                time.sleep(retry_wait)
            continue
        if resp.status_code != 200:
            raise ProviderError(
                f"service returned {resp.status_code}: {resp.text[:200]}"
            )
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response is not JSON: {exc}") from None
        return parse_guidance_response(payload, np.asarray(request.latents).shape)
    raise ProviderError(f"service unreachable after {retries + 1} attempts: {last_exc}")


def encode_remote(
    images: np.ndarray,
    endpoint: str,
    timeout: float = 30.0,
    retries: int = 2,
    retry_wait: float = 0.5,
) -> np.ndarray:
    """Encode a (B, 3, H, W) image batch through the service, (B, 4, H/8, W/8)."""
    imgs = np.asarray(images, dtype=np.float32)
    if imgs.ndim != 4 or imgs.shape[1] != 3:
        raise ValueError(f"images must be (B, 3, H, W), got {imgs.shape}")
    body = {
        "protocol_version": PROTOCOL_VERSION,
        "tensors": {"images": encode_tensor(imgs)},
    }
    url = endpoint.rstrip("/") + "/encode"
    last_exc: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = requests.post(url, json=body, timeout=timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_exc = exc
            if attempt < retries:
                time.sleep(retry_wait)
            continue
        if resp.status_code != 200:
            raise ProviderError(
                f"service returned {resp.status_code}: {resp.text[:200]}"
            )
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response is not JSON: {exc}") from None
        if payload.get("protocol_version") != PROTOCOL_VERSION:
            raise ProtocolError("protocol version mismatch in /encode response")
        tensors = payload.get("tensors")
        if not isinstance(tensors, dict) or "latents" not in tensors:
            raise ProtocolError("/encode response missing latents")
        latents = decode_tensor(tensors["latents"], "latents")
        b, _, h, w = imgs.shape
        if latents.shape != (b, 4, h // 8, w // 8):
            raise ProtocolError(
                f"latents shape {latents.shape} != ({b}, 4, {h // 8}, {w // 8})"
            )
        return latents
    raise ProviderError(f"service unreachable after {retries + 1} attempts: {last_exc}")


@dataclass
class SilhouetteProvider:
    """Pixel-space provider matching rendered alpha to a fixed mask."""

    target_mask: np.ndarray
    latent_space: bool = False
    name: str = "silhouette"

    def pixel_gradient(self, render: RenderOutput):
        return silhouette_oracle(render, self.target_mask)


@dataclass
class LatentTargetProvider:
    """Latent-space provider pulling encodings toward a fixed target."""

    target_latent: np.ndarray  # (4, h, w)
    latent_space: bool = True
    name: str = "latent-target"

    def latent_gradient(self, latents: np.ndarray, seed: int):
        """Per-view gradients for a (B, 4, h, w) batch; seed is unused."""
        lat = np.asarray(latents, dtype=np.float64)
        grads = np.empty_like(lat)
        loss = 0.0
        for b in range(lat.shape[0]):
            l, grads[b] = latent_target_oracle(lat[b], self.target_latent)
            loss += l
        return loss / lat.shape[0], grads


@dataclass
class RemoteSDSProvider:
    """Latent-space provider backed by the HTTP score-distillation service.

    The telemetry scalar is the mean squared gradient magnitude (score
    distillation supplies a gradient, not a loss).
    """

    endpoint: str
    prompt: str
    lora_id: str = ""
    t_min: float = 0.02
    t_max: float = 0.98
    cfg_scale: float = 100.0
    timeout: float = 30.0
    retries: int = 2
    latent_space: bool = True
    name: str = "sds"

    def latent_gradient(self, latents: np.ndarray, seed: int):
        req = GuidanceRequest(
            latents=np.asarray(latents, dtype=np.float32),
            prompt=self.prompt,
            lora_id=self.lora_id,
            t_min=self.t_min,
            t_max=self.t_max,
            cfg_scale=self.cfg_scale,
            seed=seed,
        )
        result = sds_remote(req, self.endpoint, timeout=self.timeout, retries=self.retries)
        grads = np.asarray(result.grad_latent, dtype=np.float64)
        return float(np.mean(grads * grads)), grads


@dataclass
class ZeroProvider:
    """Pixel-space provider with identically zero gradients (for testing)."""

    latent_space: bool = False
    name: str = "zero"

    def pixel_gradient(self, render: RenderOutput):
        return 0.0, np.zeros_like(render.rgb), np.zeros_like(render.alpha)
