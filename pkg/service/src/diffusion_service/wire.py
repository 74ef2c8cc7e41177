"""Wire protocol v1: JSON bodies with base64 little-endian float32 tensors.

This is the server half of the protocol the stylization engine speaks; both
sides encode tensors as {"shape": [...], "data": base64} and reject payloads
from a different protocol version. Validation failures map to specific HTTP
codes: 400 for malformed or version-mismatched bodies, 413 for oversized
batches, 422 for image resolutions that are not multiples of 8.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np

PROTOCOL_VERSION = 1


class WireError(Exception):
    """Protocol violation; carries the HTTP status to answer with."""

    status = 400


class BatchTooLarge(WireError):
    status = 413


class BadResolution(WireError):
    status = 422


def encode_tensor(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_tensor(obj, name: str = "tensor") -> np.ndarray:
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise WireError(f"{name}: missing shape/data")
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (TypeError, ValueError) as exc:
        raise WireError(f"{name}: undecodable payload: {exc}") from None
    expected = int(np.prod(shape)) * 4 if shape else 4
    if len(raw) != expected:
        raise WireError(
            f"{name}: payload is {len(raw)} bytes, shape {shape} needs {expected}"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if not np.isfinite(arr).all():
        raise WireError(f"{name}: non-finite values in payload")
    return np.asarray(arr, dtype=np.float32)


def _check_version(body) -> None:
    if not isinstance(body, dict):
        raise WireError("request is not a JSON object")
    version = body.get("protocol_version")
    if version != PROTOCOL_VERSION:
        raise WireError(
            f"protocol version mismatch: got {version}, need {PROTOCOL_VERSION}"
        )


def parse_encode_request(body, max_batch: int) -> np.ndarray:
    """Validate an /encode body: returns the (B, 3, H, W) image batch."""
    _check_version(body)
    tensors = body.get("tensors")
    if not isinstance(tensors, dict) or "images" not in tensors:
        raise WireError("request missing tensors.images")
    images = decode_tensor(tensors["images"], "images")
    if images.ndim != 4 or images.shape[1] != 3:
        raise WireError(f"images must be (B, 3, H, W), got {images.shape}")
    b, _, h, w = images.shape
    if b > max_batch:
        raise BatchTooLarge(f"batch {b} exceeds the service limit {max_batch}")
    if h % 8 or w % 8:
        raise BadResolution(f"image resolution {h}x{w} is not a multiple of 8")
    return images


@dataclass
class SdsRequest:
    latents: np.ndarray  # (B, 4, h, w) float32
    prompt: str
    lora_id: str
    t_min: float
    t_max: float
    cfg_scale: float
    seed: int


def parse_sds_request(body, max_batch: int) -> SdsRequest:
    """Validate an /sds_grad body."""
    _check_version(body)
    tensors = body.get("tensors")
    if not isinstance(tensors, dict) or "latents" not in tensors:
        raise WireError("request missing tensors.latents")
    latents = decode_tensor(tensors["latents"], "latents")
    if latents.ndim != 4 or latents.shape[1] != 4:
        raise WireError(f"latents must be (B, 4, h, w), got {latents.shape}")
    if latents.shape[0] > max_batch:
        raise BatchTooLarge(
            f"batch {latents.shape[0]} exceeds the service limit {max_batch}"
        )
    prompt = body.get("prompt", "")
    lora_id = body.get("lora_id", "")
    if not isinstance(prompt, str) or not isinstance(lora_id, str):
        raise WireError("prompt and lora_id must be strings")
    try:
        t_min = float(body.get("t_min", 0.02))
        t_max = float(body.get("t_max", 0.98))
        cfg_scale = float(body.get("cfg_scale", 100.0))
        seed = int(body.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise WireError(f"bad scalar field: {exc}") from None
    if not 0.0 <= t_min <= t_max <= 1.0:
        raise WireError(f"bad timestep range [{t_min}, {t_max}]")
    return SdsRequest(latents, prompt, lora_id, t_min, t_max, cfg_scale, seed)
