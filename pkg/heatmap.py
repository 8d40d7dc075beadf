"""
Saliency heatmaps on the patch grid.

Binary PPM (P6) is the canonical output; PNG is the same pixel buffer
encoded with Pillow.
"""

import io
import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from config import HeatmapSpec
from errors import InputShapeError, ParameterError
from storage import write_atomic

logger = logging.getLogger(__name__)


def normalize(saliency) -> np.ndarray:
    """Min-max scale to [0, 1]; constant saliency maps to 0.5."""
    saliency = np.asarray(saliency, dtype=np.float64)
    low, high = float(np.min(saliency)), float(np.max(saliency))
    if high == low:
        return np.full(saliency.shape, 0.5)
    return (saliency - low) / (high - low)


def _to_byte(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def colorize(values: np.ndarray, colormap: str) -> np.ndarray:
    """Map normalized values (k,) to RGB bytes (k, 3)."""
    if colormap == "grayscale":
        gray = _to_byte(values)
        return np.stack([gray, gray, gray], axis=1)
    if colormap == "diverging":
        # blue -> white -> red
        low = _to_byte(np.minimum(values, 0.5) * 2.0)
        high = _to_byte((1.0 - np.maximum(values, 0.5)) * 2.0)
        red = np.where(values < 0.5, low, 255).astype(np.uint8)
        green = np.where(values < 0.5, low, high).astype(np.uint8)
        blue = np.where(values < 0.5, 255, high).astype(np.uint8)
        return np.stack([red, green, blue], axis=1)
    raise ParameterError(f"unknown colormap {colormap!r}")


def heatmap_pixels(coords, saliency, spec: HeatmapSpec = HeatmapSpec()) -> np.ndarray:
    """
    Paint each patch's cell on the bounding grid of its coordinates.

    Returns:
        uint8 array of shape (height, width, 3)

    Raises:
        ParameterError: If there are no patches or saliency is not finite
        InputShapeError: If coords and saliency lengths differ
    """
    spec.validate()
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    saliency = np.asarray(saliency, dtype=np.float64).reshape(-1)
    if saliency.size == 0:
        raise ParameterError("cannot render an empty heatmap")
    if coords.shape[0] != saliency.size:
        raise InputShapeError(f"{coords.shape[0]} coordinates for {saliency.size} saliency values")
    if not np.all(np.isfinite(saliency)):
        raise ParameterError("saliency contains non-finite values")

    origin = coords.min(axis=0)
    cells = coords - origin
    grid_w, grid_h = cells.max(axis=0) + 1
    cell = spec.cell_size
    pixels = np.full((grid_h * cell, grid_w * cell, 3), spec.background, dtype=np.uint8)
    colors = colorize(normalize(saliency), spec.colormap)
    for (cx, cy), color in zip(cells, colors):
        pixels[cy * cell:(cy + 1) * cell, cx * cell:(cx + 1) * cell] = color
    return pixels


def encode_ppm(pixels: np.ndarray) -> bytes:
    height, width = pixels.shape[:2]
    return f"P6\n{width} {height}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def encode_png(pixels: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(buffer, format="PNG")
    return buffer.getvalue()


def render_heatmap(coords, saliency, spec: HeatmapSpec = HeatmapSpec(), path: Union[str, Path, None] = None,
                   png_path: Union[str, Path, None] = None) -> np.ndarray:
    """
    Render and optionally write a heatmap.

    Args:
        coords: n grid coordinate pairs (x, y)
        saliency: n patch scores
        spec: Colormap, cell size and background
        path: PPM output file (optional)
        png_path: PNG output file (optional)

    Returns:
        The pixel buffer
    """
    pixels = heatmap_pixels(coords, saliency, spec)
    if path is not None:
        write_atomic(path, encode_ppm(pixels))
        logger.debug(f"Heatmap written: {path} ({pixels.shape[1]}x{pixels.shape[0]})")
    if png_path is not None:
        write_atomic(png_path, encode_png(pixels))
    return pixels


def read_ppm(data: bytes) -> np.ndarray:
    """Parse a binary PPM written by encode_ppm."""
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ParameterError("not a binary PPM with maxval 255")
    width, height = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != width * height * 3:
        raise ParameterError(f"PPM body has {pixels.size} bytes, expected {width * height * 3}")
    return pixels.reshape(height, width, 3)
