"""Affine approximation of a latent image encoder.

A 4x4 matrix maps box-downsampled RGB (plus a constant channel) to the
4-channel latent grid, pixelwise. The map is fit by streaming least squares
over (image, latent) pairs and gives the optimizer an analytic, invertible
backward path that a black-box encoder cannot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

_CHANNEL_NAMES = ("R", "G", "B", "const")


class EncoderFitError(Exception):
    """Raised when the pair data cannot determine the affine map."""


@dataclass
class EncoderMap:
    """Fitted pixelwise affine map from RGB(+1) to 4 latent channels."""

    matrix: np.ndarray                 # (4, 4), last column is the bias
    source_resolution: tuple[int, int]
    latent_resolution: tuple[int, int]
    residual: float

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (4, 4):
            raise ValueError(f"matrix must be (4, 4), got {self.matrix.shape}")
        sh, sw = self.source_resolution
        lh, lw = self.latent_resolution
        if sh != 8 * lh or sw != 8 * lw:
            raise ValueError(
                f"source {self.source_resolution} must be 8x the latent "
                f"{self.latent_resolution}"
            )


@dataclass
class PairSet:
    """A sequence of (image (3,H,W), latent (4,H/8,W/8)) training pairs.

    Any sequence type works; a lazily generating one keeps memory flat while
    fitting. uint8 images are interpreted as [0,255] and rescaled.
    """

    pairs: Sequence[tuple[np.ndarray, np.ndarray]]

    def __len__(self) -> int:
        return len(self.pairs)


def _as_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64, copy=False)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"image must be (3, H, W), got {arr.shape}")
    return arr


def downsample_box(image: np.ndarray) -> np.ndarray:
    """8x8 box (mean) downsample of a (3, H, W) image; H, W divisible by 8."""
    arr = _as_image(image)
    _, h, w = arr.shape
    if h % 8 or w % 8:
        raise ValueError(f"image resolution {h}x{w} not divisible by 8")
    return arr.reshape(3, h // 8, 8, w // 8, 8).mean(axis=(2, 4))


def upsample_spread(grad: np.ndarray) -> np.ndarray:
    """Adjoint of downsample_box: each source pixel gets cell gradient / 64."""
    g = np.asarray(grad, dtype=np.float64)
    if g.ndim != 3 or g.shape[0] != 3:
        raise ValueError(f"grad must be (3, h, w), got {g.shape}")
    up = np.repeat(np.repeat(g, 8, axis=1), 8, axis=2)
    return up / 64.0


def encode_approx(emap: EncoderMap, image: np.ndarray) -> np.ndarray:
    """Encode one image to its (4, h, w) latent."""
    arr = _as_image(image)
    if arr.shape[1:] != emap.source_resolution:
        raise ValueError(
            f"image resolution {arr.shape[1:]} != map source {emap.source_resolution}"
        )
    down = downsample_box(arr)
    lh, lw = emap.latent_resolution
    flat = down.reshape(3, -1)
    z = emap.matrix[:, :3] @ flat + emap.matrix[:, 3:4]
    return z.reshape(4, lh, lw)


def encode_backward(emap: EncoderMap, dl_dlatent: np.ndarray) -> np.ndarray:
    """Pull a latent gradient back to the full-resolution image, (3, H, W)."""
    g = np.asarray(dl_dlatent, dtype=np.float64)
    lh, lw = emap.latent_resolution
    if g.shape != (4, lh, lw):
        raise ValueError(f"latent grad must be (4, {lh}, {lw}), got {g.shape}")
    gd = (emap.matrix[:, :3].T @ g.reshape(4, -1)).reshape(3, lh, lw)
    return upsample_spread(gd)


def fit_affine_encoder(
    pairs: PairSet | Sequence[tuple[np.ndarray, np.ndarray]],
    allow_degenerate: bool = False,
) -> EncoderMap:
    """Fit the affine map by streaming normal equations in float64.

    Pairs are consumed strictly in order (refits are bit-identical). With ten
    or more pairs the last tenth is held out of the fit and supplies the
    reported residual (RMSE per latent element); otherwise the residual is
    in-sample.

    A rank-deficient normal matrix (input channels carry no independent
    variation, e.g. every image constant) raises EncoderFitError naming the
    deficient channel combination. allow_degenerate instead solves in the
    observed subspace (minimum norm), which encodes images from the same
    distribution exactly; use it for grayscale renders where R = G = B by
    construction.
    """
    seq = pairs.pairs if isinstance(pairs, PairSet) else pairs
    n = len(seq)
    if n == 0:
        raise EncoderFitError("no pairs to fit")
    n_hold = n // 10 if n >= 10 else 0
    n_fit = n - n_hold

    xtx = np.zeros((4, 4))
    xtz = np.zeros((4, 4))
    source_res = None
    latent_res = None
    for p in range(n_fit):
        image, latent = seq[p]
        down = downsample_box(image)
        z = np.asarray(latent, dtype=np.float64)
        if source_res is None:
            source_res = _as_image(image).shape[1:]
            latent_res = down.shape[1:]
        if z.shape != (4, *latent_res):
            raise ValueError(f"pair {p}: latent shape {z.shape} != (4, {latent_res})")
        xb = np.vstack([down.reshape(3, -1), np.ones((1, down.shape[1] * down.shape[2]))])
        xtx += xb @ xb.T
        xtz += xb @ z.reshape(4, -1).T

    evals, evecs = np.linalg.eigh(xtx)
    good = evals > 1e-12 * max(evals[-1], 1e-300)
    if not np.all(good):
        null_vec = evecs[:, int(np.argmin(evals))]
        combo = " + ".join(
            f"{c:+.3f}*{name}" for c, name in zip(null_vec, _CHANNEL_NAMES)
        )
        if not allow_degenerate:
            raise EncoderFitError(
                f"normal matrix is singular: no variation along {combo}; "
                "the pair images do not span the input channels"
            )
        inv = evecs[:, good] @ np.diag(1.0 / evals[good]) @ evecs[:, good].T
        matrix = (inv @ xtz).T
    else:
        matrix = np.linalg.solve(xtx, xtz).T

    emap = EncoderMap(
        matrix=matrix,
        source_resolution=tuple(source_res),
        latent_resolution=tuple(latent_res),
        residual=0.0,
    )
    lo = n_fit if n_hold else 0
    sq_sum = 0.0
    count = 0
    for p in range(lo, n):
        image, latent = seq[p]
        pred = encode_approx(emap, image)
        z = np.asarray(latent, dtype=np.float64)
        sq_sum += float(np.sum((pred - z) ** 2))
        count += z.size
    emap.residual = float(np.sqrt(sq_sum / count))
    return emap


def save_encoder_map(path, emap: EncoderMap) -> None:
    """Plain-text serialization with full-precision matrix entries."""
    lines = [
        "affine-encoder-map v1",
        f"source {emap.source_resolution[0]} {emap.source_resolution[1]}",
        f"latent {emap.latent_resolution[0]} {emap.latent_resolution[1]}",
        f"residual {emap.residual:.17g}",
    ]
    for row in emap.matrix:
        lines.append(" ".join(f"{x:.17g}" for x in row))
    lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def load_encoder_map(path) -> EncoderMap:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [l.strip() for l in fh if l.strip()]
    try:
        if lines[0] != "affine-encoder-map v1":
            raise ValueError(f"bad header: {lines[0]!r}")
        src = tuple(int(t) for t in lines[1].split()[1:3])
        lat = tuple(int(t) for t in lines[2].split()[1:3])
        residual = float(lines[3].split()[1])
        matrix = np.array([[float(t) for t in lines[4 + r].split()] for r in range(4)])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed encoder map {path}: {exc}") from None
    if not np.isfinite(matrix).all():
        raise ValueError(f"encoder map {path} has non-finite entries")
    return EncoderMap(
        matrix=matrix,
        source_resolution=src,
        latent_resolution=lat,
        residual=residual,
    )
