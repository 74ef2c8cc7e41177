"""JSON-over-HTTP wire format shared with the guidance service.

Tensors travel as base64-encoded little-endian float32 buffers next to an
explicit shape list. The protocol is versioned; both sides reject requests
or responses from a different major version.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np

PROTOCOL_VERSION = 1


class ProtocolError(Exception):
    """Malformed or incompatible wire payload."""


def encode_tensor(arr: np.ndarray) -> dict:
    """Encode an array as {"shape": [...], "data": base64 float32 LE}."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_tensor(obj: dict, name: str = "tensor") -> np.ndarray:
    """Decode and validate a wire tensor; rejects size mismatch and non-finite."""
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise ProtocolError(f"{name}: missing shape/data")
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"{name}: undecodable payload: {exc}") from None
    expected = int(np.prod(shape)) * 4 if shape else 4
    if len(raw) != expected:
        raise ProtocolError(
            f"{name}: payload is {len(raw)} bytes, shape {shape} needs {expected}"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if not np.isfinite(arr).all():
        raise ProtocolError(f"{name}: non-finite values in payload")
    return np.asarray(arr, dtype=np.float32)


@dataclass
class GuidanceRequest:
    """One batched gradient request to the remote service."""

    latents: np.ndarray  # (B, 4, h, w)
    prompt: str
    lora_id: str
    t_min: float = 0.02
    t_max: float = 0.98
    cfg_scale: float = 100.0
    seed: int = 0

    def to_body(self) -> dict:
        lat = np.asarray(self.latents)
        if lat.ndim != 4 or lat.shape[1] != 4:
            raise ValueError(f"latents must be (B, 4, h, w), got {lat.shape}")
        if not 0.0 <= self.t_min <= self.t_max <= 1.0:
            raise ValueError(f"bad timestep range [{self.t_min}, {self.t_max}]")
        return {
            "protocol_version": PROTOCOL_VERSION,
            "tensors": {"latents": encode_tensor(lat)},
            "prompt": self.prompt,
            "lora_id": self.lora_id,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "cfg_scale": self.cfg_scale,
            "seed": int(self.seed),
        }


@dataclass
class GuidanceGradient:
    """Parsed service response."""

    grad_latent: np.ndarray  # (B, 4, h, w) float32
    t_sampled: np.ndarray    # (B,) float32
    w_t: np.ndarray          # (B,) float32
    provider: str = "remote"


def parse_guidance_response(body: dict, batch_shape: tuple) -> GuidanceGradient:
    """Validate a response body against the request batch shape."""
    if not isinstance(body, dict):
        raise ProtocolError("response is not a JSON object")
    version = body.get("protocol_version")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(
            f"protocol version mismatch: got {version}, need {PROTOCOL_VERSION}"
        )
    tensors = body.get("tensors")
    if not isinstance(tensors, dict):
        raise ProtocolError("response missing tensors")
    for key in ("grad_latent", "t_sampled", "w_t"):
        if key not in tensors:
            raise ProtocolError(f"response missing tensor {key!r}")
    grad = decode_tensor(tensors["grad_latent"], "grad_latent")
    t_sampled = decode_tensor(tensors["t_sampled"], "t_sampled")
    w_t = decode_tensor(tensors["w_t"], "w_t")
    if grad.shape != tuple(batch_shape):
        raise ProtocolError(
            f"grad_latent shape {grad.shape} != request latents {tuple(batch_shape)}"
        )
    b = batch_shape[0]
    if t_sampled.shape != (b,) or w_t.shape != (b,):
        raise ProtocolError("t_sampled / w_t must be one value per batch item")
    return GuidanceGradient(
        grad_latent=grad,
        t_sampled=t_sampled,
        w_t=w_t,
        provider=str(body.get("provider", "remote")),
    )
