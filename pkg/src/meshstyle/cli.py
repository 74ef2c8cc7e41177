"""Command-line interface.

Exit codes: 1 for configuration errors, 2 for file I/O errors, 3 for remote
provider failures.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import shutil
import sys
from datetime import datetime, timezone

import click
import numpy as np

from . import __version__
from .cage import PartLabelError, fallback_segment, ingest_part_labels
from .encoder import (
    EncoderFitError,
    PairSet,
    fit_affine_encoder,
    load_encoder_map,
    save_encoder_map,
)
from .guidance import (
    LatentTargetProvider,
    ProviderError,
    RemoteSDSProvider,
    SilhouetteProvider,
    encode_remote,
)
from .mesh import MeshError, load_mesh, save_obj
from .pipeline import ScheduleConfig, run, setup_state
from .render import RenderConfig, camera_from_config, render_soft, sample_camera, save_png
from .symmetry import detect_symmetry_planes
from .wire import ProtocolError


class ConfigError(Exception):
    pass


EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_PROVIDER = 3


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return data


def _build_dataclass(cls, overrides: dict, source: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - fields
    if unknown:
        raise ConfigError(f"unknown {source} keys: {sorted(unknown)}")
    coerced = dict(overrides)
    for key in ("elevation_range", "azimuth_range"):
        if key in coerced and coerced[key] is not None:
            coerced[key] = tuple(coerced[key])
    if "parts_select" in coerced and coerced["parts_select"] is not None:
        coerced["parts_select"] = tuple(coerced["parts_select"])
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {source}: {exc}") from None


def _load_mask(path: str, resolution: int) -> np.ndarray:
    from PIL import Image

    try:
        img = Image.open(path).convert("L")
    except OSError as exc:
        raise ConfigError(f"cannot read mask {path}: {exc}") from None
    if img.size != (resolution, resolution):
        raise ConfigError(
            f"mask {path} is {img.size[0]}x{img.size[1]}, render is {resolution}x{resolution}"
        )
    return np.asarray(img, dtype=np.float64) / 255.0


@click.group()
@click.version_option(version=__version__)
def main():
    """Mesh deformation driven by differentiable rendering."""


@main.command()
@click.option("--config", "config_path", type=str, default=None, help="JSON config file")
@click.option("--mesh", "mesh_path", type=str, required=True)
@click.option("--labels", "labels_path", type=str, default=None)
@click.option(
    "--provider",
    type=click.Choice(["silhouette", "latent-target", "sds"]),
    default="silhouette",
)
@click.option("--endpoint", type=str, default=None, help="guidance service URL")
@click.option("--prompt", type=str, default="")
@click.option("--lora", type=str, default="")
@click.option("--target-mask", "target_mask", type=str, default=None)
@click.option("--target-latent", "target_latent", type=str, default=None)
@click.option("--encoder-map", "encoder_map_path", type=str, default=None)
@click.option("--parts-select", "parts_select", type=str, default=None, help="e.g. 1,3")
@click.option("--symmetry", type=click.Choice(["auto", "off"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--deterministic", is_flag=True, default=False)
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--dry-run", is_flag=True, default=False)
def stylize(
    config_path,
    mesh_path,
    labels_path,
    provider,
    endpoint,
    prompt,
    lora,
    target_mask,
    target_latent,
    encoder_map_path,
    parts_select,
    symmetry,
    seed,
    deterministic,
    out_dir,
    dry_run,
):
    """Optimize a mesh against the chosen guidance provider."""
    try:
        cfg = _load_config_file(config_path)
        schedule = _build_dataclass(ScheduleConfig, cfg.get("schedule", {}), "schedule")
        render_cfg = _build_dataclass(RenderConfig, cfg.get("render", {}), "render")
        guidance_cfg = cfg.get("guidance", {})
        if symmetry is not None:
            schedule.symmetry = symmetry
        if seed is not None:
            schedule.seed = seed
        if deterministic:
            schedule.deterministic = True
        if parts_select is not None:
            try:
                schedule.parts_select = tuple(
                    int(t) for t in parts_select.split(",") if t.strip()
                )
            except ValueError:
                raise ConfigError(f"bad --parts-select: {parts_select!r}") from None
        schedule.validate()
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))

    try:
        mesh = load_mesh(mesh_path)
        parts = (
            ingest_part_labels(labels_path, mesh.num_vertices) if labels_path else None
        )
    except (MeshError, PartLabelError, OSError) as exc:
        _fail(EXIT_IO, str(exc))

    try:
        emap = None
        if provider == "silhouette":
            if target_mask is None:
                raise ConfigError("--provider silhouette needs --target-mask")
            mask = _load_mask(target_mask, render_cfg.resolution)
            prov = SilhouetteProvider(target_mask=mask)
        elif provider == "latent-target":
            if target_latent is None or encoder_map_path is None:
                raise ConfigError(
                    "--provider latent-target needs --target-latent and --encoder-map"
                )
            try:
                target = np.load(target_latent)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read target latent: {exc}") from None
            emap = load_encoder_map(encoder_map_path)
            prov = LatentTargetProvider(target_latent=np.asarray(target, dtype=np.float64))
        else:
            if endpoint is None or encoder_map_path is None:
                raise ConfigError("--provider sds needs --endpoint and --encoder-map")
            emap = load_encoder_map(encoder_map_path)
            prov = RemoteSDSProvider(
                endpoint=endpoint,
                prompt=prompt,
                lora_id=lora,
                t_min=float(guidance_cfg.get("t_min", 0.02)),
                t_max=float(guidance_cfg.get("t_max", 0.98)),
                cfg_scale=float(guidance_cfg.get("cfg_scale", 100.0)),
            )
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (OSError, ValueError) as exc:
        _fail(EXIT_IO, str(exc))

    manifest = {
        "tool": "meshstyle",
        "version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "command": "stylize",
        "mesh": {"path": os.path.abspath(mesh_path), "sha256": _sha256(mesh_path)},
        "labels": (
            {"path": os.path.abspath(labels_path), "sha256": _sha256(labels_path)}
            if labels_path
            else None
        ),
        "provider": {
            "name": provider,
            "endpoint": endpoint,
            "prompt": prompt,
            "lora": lora,
            "target_mask": (
                {"path": os.path.abspath(target_mask), "sha256": _sha256(target_mask)}
                if target_mask
                else None
            ),
            "target_latent": (
                {"path": os.path.abspath(target_latent), "sha256": _sha256(target_latent)}
                if target_latent
                else None
            ),
            "encoder_map": (
                {
                    "path": os.path.abspath(encoder_map_path),
                    "sha256": _sha256(encoder_map_path),
                }
                if encoder_map_path
                else None
            ),
        },
        "schedule": dataclasses.asdict(schedule),
        "render": dataclasses.asdict(render_cfg),
    }

    if dry_run:
        click.echo(json.dumps(manifest, indent=1, sort_keys=True, default=list))
        click.echo("dry run: configuration valid")
        return

    try:
        state = setup_state(
            mesh, schedule, render_cfg, prov, parts=parts, encoder_map=emap
        )
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=list)
    if encoder_map_path:
        shutil.copyfile(encoder_map_path, os.path.join(out_dir, "encoder.map"))

    try:
        summary = run(state, out_dir)
    except (ProviderError, ProtocolError) as exc:
        _fail(EXIT_PROVIDER, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(json.dumps(summary["final"], sort_keys=True))
    click.echo(f"wrote {os.path.join(out_dir, 'final.obj')}")


@main.command("fit-encoder")
@click.option("--mesh", "mesh_path", type=str, default=None)
@click.option("--service", "service_url", type=str, default=None)
@click.option("--pairs", "pairs_dir", type=str, default=None, help="directory of .png/.npy pairs")
@click.option("--n", "num_pairs", type=int, default=500)
@click.option("--resolution", type=int, default=128)
@click.option("--batch", "batch_size", type=int, default=8, help="images per encode request")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", type=str, required=True)
def fit_encoder(mesh_path, service_url, pairs_dir, num_pairs, resolution, batch_size, seed, out_path):
    """Fit the affine latent encoder from rendered views or stored pairs."""
    pairs = []
    if pairs_dir is not None:
        try:
            stems = sorted(
                f[:-4] for f in os.listdir(pairs_dir) if f.endswith(".png")
            )
            if not stems:
                _fail(EXIT_IO, f"no .png files in {pairs_dir}")
            from PIL import Image

            for stem in stems:
                img = Image.open(os.path.join(pairs_dir, stem + ".png")).convert("RGB")
                arr = np.transpose(
                    np.asarray(img, dtype=np.float64) / 255.0, (2, 0, 1)
                )
                lat = np.load(os.path.join(pairs_dir, stem + ".npy"))
                pairs.append((arr, np.asarray(lat, dtype=np.float64)))
        except OSError as exc:
            _fail(EXIT_IO, f"cannot read pairs: {exc}")
    elif service_url is not None:
        if mesh_path is None:
            _fail(EXIT_CONFIG, "--service mode needs --mesh to render views")
        try:
            mesh = load_mesh(mesh_path)
        except MeshError as exc:
            _fail(EXIT_IO, str(exc))
        rng = np.random.Generator(np.random.PCG64(seed))
        cfg = RenderConfig(resolution=resolution)
        images = []
        for _ in range(num_pairs):
            cam = sample_camera(rng, cfg)
            images.append(render_soft(mesh.vertices, mesh.faces, cam, cfg).rgb)
        if batch_size < 1:
            _fail(EXIT_CONFIG, "--batch must be at least 1")
        try:
            batch = batch_size
            for lo in range(0, len(images), batch):
                chunk = np.stack(images[lo : lo + batch]).astype(np.float32)
                latents = encode_remote(chunk, service_url)
                for b in range(chunk.shape[0]):
                    pairs.append((images[lo + b], np.asarray(latents[b], dtype=np.float64)))
        except (ProviderError, ProtocolError) as exc:
            _fail(EXIT_PROVIDER, str(exc))
    else:
        _fail(EXIT_CONFIG, "need --pairs or --service")

    try:
        emap = fit_affine_encoder(PairSet(pairs), allow_degenerate=True)
    except EncoderFitError as exc:
        _fail(EXIT_CONFIG, str(exc))
    save_encoder_map(out_path, emap)
    click.echo(f"residual {emap.residual:.6g}; wrote {out_path}")


@main.command("detect-symmetry")
@click.option("--mesh", "mesh_path", type=str, required=True)
@click.option("--tau-point", type=float, default=None)
@click.option("--tau-total", type=float, default=None)
@click.option("--out", "out_path", type=str, default=None)
def detect_symmetry(mesh_path, tau_point, tau_total, out_path):
    """Report reflective symmetry planes of a mesh."""
    try:
        mesh = load_mesh(mesh_path)
    except MeshError as exc:
        _fail(EXIT_IO, str(exc))
    planes = detect_symmetry_planes(mesh.vertices, tau_point, tau_total)
    lines = [f"planes {len(planes)}"]
    for p in planes:
        n = p.axis
        lines.append(
            f"plane axis={p.axis_index} normal={n[0]:.9g},{n[1]:.9g},{n[2]:.9g} "
            f"pairs={len(p.pairs)} max_residual={p.max_residual:.9g} "
            f"sum_residual={p.sum_residual:.9g}"
        )
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    click.echo(text.rstrip())


@main.command("render-preview")
@click.option("--mesh", "mesh_path", type=str, required=True)
@click.option("--resolution", type=int, default=256)
@click.option("--elevation", type=float, default=20.0)
@click.option("--out", "out_dir", type=str, required=True)
def render_preview(mesh_path, resolution, elevation, out_dir):
    """Render 8 turntable views (45 degree azimuth steps) as PNGs."""
    try:
        mesh = load_mesh(mesh_path)
    except MeshError as exc:
        _fail(EXIT_IO, str(exc))
    os.makedirs(out_dir, exist_ok=True)
    cfg = RenderConfig(resolution=resolution)
    for k in range(8):
        cam = camera_from_config(cfg, elevation, 45.0 * k)
        out = render_soft(mesh.vertices, mesh.faces, cam, cfg)
        save_png(os.path.join(out_dir, f"preview_az{45 * k:03d}.png"), out.rgb, out.alpha)
    click.echo(f"wrote 8 previews to {out_dir}")


@main.command("segment-fallback")
@click.option("--mesh", "mesh_path", type=str, required=True)
@click.option("--parts", "num_parts", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", type=str, required=True)
def segment_fallback(mesh_path, num_parts, seed, out_path):
    """Write k-means part labels (one per vertex line)."""
    try:
        mesh = load_mesh(mesh_path)
    except MeshError as exc:
        _fail(EXIT_IO, str(exc))
    try:
        parts = fallback_segment(mesh, num_parts, seed)
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(str(int(l)) for l in parts.labels) + "\n")
    click.echo(f"wrote {parts.num_parts} parts to {out_path}")


if __name__ == "__main__":
    main()
