"""Launcher: `python -m diffusion_service` serves on HOST:PORT (env)."""

import os

import uvicorn

from .app import create_app_from_env


def main() -> None:
    uvicorn.run(
        create_app_from_env(),
        host=os.environ.get("HOST", "127.0.0.1"),
        port=int(os.environ.get("PORT", "8184")),
        log_level=os.environ.get("LOG_LEVEL", "info"),
    )


if __name__ == "__main__":
    main()
