"""Image datasets: synthetic generators and PNG directories."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

__all__ = ["synthetic_images", "load_png", "save_png", "load_image_dir", "save_image_grid"]


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def synthetic_images(n: int, d: int = 16, seed: int = 0, shapes: int = 2, edge: float = 1.5) -> np.ndarray:
    """Random colour gradients with a few soft-edged discs and boxes.

    Returns ``(n, d, d, 3)`` float32 in ``[0, 1]``. ``edge`` is the width of
    the shape boundaries in pixels.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid((np.arange(d) + 0.5) / d, (np.arange(d) + 0.5) / d, indexing="ij")
    out = np.empty((n, d, d, 3), dtype=np.float32)
    soft = edge / d
    for k in range(n):
        c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
        angle = rng.uniform(0, 2 * np.pi)
        t = 0.5 + (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5))
        img = c0 + np.clip(t, 0, 1)[..., None] * (c1 - c0)
        for _ in range(rng.integers(1, shapes + 1)):
            colour = rng.uniform(0.0, 1.0, size=3)
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            if rng.random() < 0.5:
                r = rng.uniform(0.12, 0.3)
                dist = np.hypot(yy - cy, xx - cx) - r
            else:
                hy, hx = rng.uniform(0.1, 0.3, size=2)
                dist = np.maximum(np.abs(yy - cy) - hy, np.abs(xx - cx) - hx)
            alpha = 1 - _smoothstep(dist / soft + 0.5)
            img = img * (1 - alpha[..., None]) + colour * alpha[..., None]
        out[k] = img
    return out


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_png(path, image) -> None:
    from PIL import Image

    from ._io import atomic_open

    arr = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    im = Image.fromarray(np.round(arr * 255).astype(np.uint8))
    with atomic_open(path) as fh:
        im.save(fh, format="PNG")


def load_image_dir(directory, labels_csv=None):
    """Load all PNGs of a directory (sorted by name) and optional labels.

    The labels CSV has rows ``filename,label``. Returns ``(images, names, labels)``.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory {directory} does not exist")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG images in {directory}")
    images = np.stack([load_png(p) for p in paths])
    names = [p.name for p in paths]
    labels = None
    if labels_csv is not None:
        table = {}
        with open(labels_csv, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0] == "filename":
                    continue
                table[row[0]] = int(row[1])
        missing = [nm for nm in names if nm not in table]
        if missing:
            raise ValueError(f"no label for {missing[0]} (and {len(missing) - 1} more)")
        labels = np.array([table[nm] for nm in names], dtype=np.int64)
    return images, names, labels


def save_image_grid(path, images, cols: int | None = None, pad: int = 1) -> None:
    """Tile ``(n, h, w, ch)`` images into one PNG."""
    images = np.asarray(images)
    n, h, w = images.shape[:3]
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, images.shape[3]))
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        grid[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = img
    save_png(path, grid)
