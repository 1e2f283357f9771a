"""Token-map rendering: color every pixel by its final merged-cluster id."""

from __future__ import annotations

import colorsys

import numpy as np

from .data import write_ppm
from .model import Model


def cluster_color(cid: int) -> tuple[int, int, int]:
    """Deterministic palette: golden-angle hue walk keyed by cluster id."""
    hue = (cid * 0.6180339887498949) % 1.0
    value = 0.95 - 0.30 * ((cid * 0.3819660113) % 1.0)
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, value)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def token_map_image(model: Model, image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 map of the composed merge assignment for one image."""
    out = model.forward(image)
    total = out.record.compose()                       # grid cell -> final cluster
    hp, wp = out.low_level.grid
    p = model.cfg.patch_size
    cell_colors = np.array([cluster_color(int(c)) for c in total], dtype=np.uint8)
    grid_rgb = cell_colors.reshape(hp, wp, 3)
    return np.repeat(np.repeat(grid_rgb, p, axis=0), p, axis=1)


def viz_tokens(model: Model, image: np.ndarray, out_path) -> np.ndarray:
    """Render and write the token map; returns the rendered array."""
    rgb = token_map_image(model, image)
    write_ppm(out_path, rgb)
    return rgb


def distinct_cluster_count(model: Model, image: np.ndarray) -> int:
    out = model.forward(image)
    return len(set(out.record.compose().tolist()))
