"""Deterministic linear stand-in for the latent diffusion backend.

A real deployment wires a latent-diffusion checkpoint behind the same three
entry points (``encode``, ``predict_noise``, schedule helpers). The stub keeps the
full service contract testable on CPU: every operation is an explicit linear
map, so expected responses can be recomputed analytically.

Model file (``.npz``)::

    encode_matrix  (4, 4)  latent channels from (R, G, B, 1) of the 8x box-
                           downsampled image (posterior mean, no sampling)
    k_uncond, b_uncond     scalars of the unconditional noise branch
    k_cond, b_cond         scalars of the conditional noise branch

LoRA adapter file (``.npz``): scalars ``delta_k``, ``delta_b`` added to the
conditional branch. The empty lora_id "" means the base model.

Noise model, with ``e(prompt)`` a deterministic hash embedding in [0, 1)::

    eps_uncond = k_uncond * z_t + b_uncond * t
    eps_cond   = (k_cond + delta_k) * z_t + (b_cond + delta_b) * t + e(prompt)
    eps_hat    = eps_uncond + cfg_scale * (eps_cond - eps_uncond)

Diffusion schedule: alpha_t = sqrt(1 - t), sigma_t = sqrt(t) on t in [0, 1];
the default gradient weighting is w_t = sigma_t^2 = t.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def alpha_sigma(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signal/noise scales of the forward process at continuous t in [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    return np.sqrt(1.0 - t), np.sqrt(t)


def prompt_embedding(prompt: str) -> float:
    """Deterministic scalar embedding of a prompt, in [0, 1)."""
    return (zlib.crc32(prompt.encode("utf-8")) % 4096) / 4096.0


@dataclass
class LoraAdapter:
    delta_k: float
    delta_b: float

    @classmethod
    def load(cls, path) -> "LoraAdapter":
        with np.load(path) as data:
            return cls(delta_k=float(data["delta_k"]), delta_b=float(data["delta_b"]))


def load_lora_dir(lora_dir) -> dict[str, LoraAdapter]:
    """Load every *.npz adapter; the stem is the advertised lora_id."""
    adapters: dict[str, LoraAdapter] = {}
    if lora_dir is None:
        return adapters
    for path in sorted(Path(lora_dir).glob("*.npz")):
        adapters[path.stem] = LoraAdapter.load(path)
    return adapters


@dataclass
class StubDiffusionModel:
    encode_matrix: np.ndarray  # (4, 4)
    k_uncond: float
    b_uncond: float
    k_cond: float
    b_cond: float

    @classmethod
    def load(cls, path) -> "StubDiffusionModel":
        with np.load(path) as data:
            matrix = np.asarray(data["encode_matrix"], dtype=np.float64)
            if matrix.shape != (4, 4):
                raise ValueError(f"encode_matrix must be (4, 4), got {matrix.shape}")
            return cls(
                encode_matrix=matrix,
                k_uncond=float(data["k_uncond"]),
                b_uncond=float(data["b_uncond"]),
                k_cond=float(data["k_cond"]),
                b_cond=float(data["b_cond"]),
            )

    def save(self, path) -> None:
        np.savez(
            path,
            encode_matrix=self.encode_matrix,
            k_uncond=self.k_uncond,
            b_uncond=self.b_uncond,
            k_cond=self.k_cond,
            b_cond=self.b_cond,
        )

    def encode(self, images: np.ndarray) -> np.ndarray:
        """Posterior-mean latents, (B, 3, H, W) -> (B, 4, H/8, W/8)."""
        imgs = np.asarray(images, dtype=np.float64)
        b, _, h, w = imgs.shape
        down = imgs.reshape(b, 3, h // 8, 8, w // 8, 8).mean(axis=(3, 5))
        flat = down.reshape(b, 3, -1)
        ones = np.ones((b, 1, flat.shape[2]))
        feat = np.concatenate([flat, ones], axis=1)
        z = np.einsum("ck,bkn->bcn", self.encode_matrix, feat)
        return z.reshape(b, 4, h // 8, w // 8)

    def predict_noise(
        self,
        z_t: np.ndarray,
        t: np.ndarray,
        prompt: str,
        cfg_scale: float,
        lora: LoraAdapter | None,
    ) -> np.ndarray:
        tt = np.asarray(t, dtype=np.float64)[:, None, None, None]
        dk = lora.delta_k if lora is not None else 0.0
        db = lora.delta_b if lora is not None else 0.0
        eps_uncond = self.k_uncond * z_t + self.b_uncond * tt
        eps_cond = (
            (self.k_cond + dk) * z_t
            + (self.b_cond + db) * tt
            + prompt_embedding(prompt)
        )
        return eps_uncond + cfg_scale * (eps_cond - eps_uncond)

    def sds_gradient(
        self,
        latents: np.ndarray,
        prompt: str,
        lora: LoraAdapter | None,
        t_min: float,
        t_max: float,
        cfg_scale: float,
        seed: int,
        wt_mode: str = "sigma_sq",
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Seeded score-distillation residual w_t (eps_hat - eps).

        Returns (grad, t, w_t) in float64; one t and one w_t per batch item.
        """
        z = np.asarray(latents, dtype=np.float64)
        rng = np.random.default_rng(seed)
        t = rng.uniform(t_min, t_max, size=z.shape[0])
        eps = rng.standard_normal(z.shape)
        alpha, sigma = alpha_sigma(t)
        z_t = alpha[:, None, None, None] * z + sigma[:, None, None, None] * eps
        eps_hat = self.predict_noise(z_t, t, prompt, cfg_scale, lora)
        if wt_mode == "sigma_sq":
            w = sigma**2
        elif wt_mode == "unit":
            w = np.ones_like(t)
        else:
            raise ValueError(f"unknown wt_mode {wt_mode!r}")
        grad = w[:, None, None, None] * (eps_hat - eps)
        return grad, t, w


def make_stub_model(path, seed: int = 0) -> StubDiffusionModel:
    """Write a default stub checkpoint; handy for demos and smoke tests."""
    rng = np.random.default_rng(seed)
    model = StubDiffusionModel(
        encode_matrix=rng.normal(scale=0.5, size=(4, 4)),
        k_uncond=0.7,
        b_uncond=0.1,
        k_cond=1.3,
        b_cond=-0.2,
    )
    model.save(path)
    return model
