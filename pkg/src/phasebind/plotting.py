"""Rasters and figures.

Phase images use the HSV wheel: hue encodes phase, value encodes rate, and
units below the off threshold are black.  Those rasters are written straight
to PNG so pixel values are exact.  Summary figures (histograms, response
curves, sample sheets) go through matplotlib with the defaults below.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import hsv_to_rgb  # noqa: E402
from PIL import Image  # noqa: E402

from .readout import OFF_THRESHOLD, PhaseHistogram  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figure(width=3.4, height=None, **kw):
    golden = (np.sqrt(5) - 1) / 2
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(width, height or width * golden), **kw)


def save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def tile_channels(values: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Lay out a ``(H*W*C,)`` vector as an ``(H, W*C)`` grid, channels side by side."""
    h, w, c = shape
    v = np.asarray(values).reshape(h, w, c)
    return np.concatenate([v[:, :, i] for i in range(c)], axis=1)


def phase_to_rgb(rates: np.ndarray, phases: np.ndarray,
                 off_threshold: float = OFF_THRESHOLD) -> np.ndarray:
    """uint8 RGB with hue ``(phi + pi) / 2pi``, saturation 1, value = rate."""
    rates = np.clip(np.asarray(rates, dtype=np.float64), 0.0, 1.0)
    hue = np.mod((np.asarray(phases, dtype=np.float64) + np.pi) / (2 * np.pi), 1.0)
    value = np.where(rates >= off_threshold, rates, 0.0)
    hsv = np.stack([hue, np.ones_like(hue), value], axis=-1)
    return np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def render_phase_image(layer, shape: tuple[int, ...] | None,
                       off_threshold: float = OFF_THRESHOLD) -> np.ndarray:
    """Phase-coloured raster of one layer state.

    ``shape`` is ``(H, W)`` or ``(H, W, C)``; channels are tiled side by side.
    """
    rates = np.asarray(layer.rates).reshape(-1)
    if shape is None:
        raise ValueError("layer has no grid geometry to render")
    if len(shape) == 2:
        shape = (*shape, 1)
    if int(np.prod(shape)) != rates.size:
        raise ValueError(f"layer with {rates.size} units does not fit grid {shape}")
    return phase_to_rgb(tile_channels(rates, shape), tile_channels(layer.phases, shape), off_threshold)


def write_png(path, rgb: np.ndarray, scale: int = 1) -> Path:
    path = Path(path)
    img = np.asarray(rgb, dtype=np.uint8)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    Image.fromarray(img).save(path)
    return path


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def label_image_rgb(labels: np.ndarray) -> np.ndarray:
    """Colour segment labels evenly around the hue wheel; label 0 is black."""
    labels = np.asarray(labels)
    k = max(int(labels.max()), 1)
    hue = np.where(labels > 0, (labels - 1) / k, 0.0)
    hsv = np.stack([hue, np.ones_like(hue, float), (labels > 0).astype(float)], axis=-1)
    return np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def gray_png(path, image: np.ndarray, scale: int = 1) -> Path:
    g = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    return write_png(path, np.repeat(g[..., None], 3, axis=-1), scale)


def write_histogram_csv(hist: PhaseHistogram, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_center", "count"])
        for c, n in zip(hist.centers, hist.counts):
            w.writerow([f"{c:.17g}", int(n)])
    return path


def render_histogram(hist: PhaseHistogram, path, peaks=None) -> Path:
    fig, ax = figure()
    width = np.diff(hist.edges)
    colors = hsv_to_rgb(np.stack([(hist.centers + np.pi) / (2 * np.pi),
                                  np.ones(len(width)), np.ones(len(width))], axis=-1))
    ax.bar(hist.centers, hist.counts, width=width * 0.9, color=colors, edgecolor="k", linewidth=0.4)
    if peaks is not None:
        for p in peaks:
            ax.axvline(hist.centers[p], color="k", ls=":", lw=0.8)
    ax.set_xlim(-np.pi, np.pi)
    ax.set_xticks([-np.pi, 0, np.pi], [r"$-\pi$", "0", r"$\pi$"])
    ax.set_xlabel("phase")
    ax.set_ylabel("active units")
    return save(fig, path)


def render_response(rows, path) -> Path:
    rows = np.asarray(rows)
    fig, ax = figure()
    ax.plot(rows[:, 0], rows[:, 1], label="synchrony + classic")
    ax.plot(rows[:, 0], rows[:, 2], ls="--", label="synchrony only")
    ax.set_xlim(0, np.pi)
    ax.set_ylim(bottom=0)
    ax.set_xticks([0, np.pi / 2, np.pi], ["0", r"$\pi/2$", r"$\pi$"])
    ax.set_xlabel(r"phase difference $\Delta\phi$")
    ax.set_ylabel("input to activation")
    ax.legend(frameon=False)
    return save(fig, path)


def render_image_sheet(images: np.ndarray, shape: tuple[int, int], path, ncols: int = 10,
                       titles=None) -> Path:
    images = np.asarray(images).reshape(len(images), *shape)
    n = len(images)
    ncols = min(ncols, max(n, 1))
    nrows = max(1, -(-n // ncols))
    fig, axes = figure(0.8 * ncols, 0.8 * nrows, nrows=nrows, ncols=ncols, squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for i, (ax, img) in enumerate(zip(axes.flat, images)):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        if titles is not None:
            ax.set_title(titles[i], fontsize=6)
    return save(fig, path)


def render_training_curve(epochs, errors, path) -> Path:
    fig, ax = figure()
    ax.plot(epochs, errors, marker="o", ms=2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("reconstruction MSE")
    return save(fig, path)
