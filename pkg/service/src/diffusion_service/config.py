"""Service configuration from the environment.

Variables: MODEL_PATH (required), LORA_DIR, DEVICE, MAX_BATCH, WT_MODE, PORT
(PORT is read by the launcher, not here).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .wire import PROTOCOL_VERSION


@dataclass
class ServiceConfig:
    model_path: str
    lora_dir: str | None = None
    device: str = "cpu"
    max_batch: int = 8
    wt_mode: str = "sigma_sq"  # "sigma_sq" | "unit"
    protocol_version: int = PROTOCOL_VERSION

    def validate(self) -> None:
        if not os.path.exists(self.model_path):
            raise FileNotFoundError(f"model checkpoint not found: {self.model_path}")
        if self.lora_dir is not None and not os.path.isdir(self.lora_dir):
            raise FileNotFoundError(f"LoRA directory not found: {self.lora_dir}")
        if self.max_batch < 1:
            raise ValueError(f"max_batch must be positive, got {self.max_batch}")
        if self.wt_mode not in ("sigma_sq", "unit"):
            raise ValueError(f"unknown wt_mode {self.wt_mode!r}")

    @classmethod
    def from_env(cls, env=os.environ) -> "ServiceConfig":
        if "MODEL_PATH" not in env:
            raise KeyError("MODEL_PATH is required")
        config = cls(
            model_path=env["MODEL_PATH"],
            lora_dir=env.get("LORA_DIR") or None,
            device=env.get("DEVICE", "cpu"),
            max_batch=int(env.get("MAX_BATCH", "8")),
            wt_mode=env.get("WT_MODE", "sigma_sq"),
        )
        config.validate()
        return config
