"""Deterministic grayscale rendering of symbolic panels.

All geometry runs in integer arithmetic: coordinates are in 1/8-pixel
units, each pixel is sampled on a 4x4 grid, and polygon edge normals are
fixed-point integers taken from a whole-degree cosine table. Output bytes
therefore do not depend on platform floating-point behaviour.

A shape of size ``k`` has circumradius ``(0.30 + 0.10 k)`` times the slot's
half-width. The fill gray level for shade ``s`` is
``round(255 * (0.05 + 0.09 s))`` and the shape carries a 1-pixel black
outline. Polygons have a vertex on the main diagonal, so every shape is
symmetric under image transposition.
"""

from __future__ import annotations

import math
from functools import lru_cache
from pathlib import Path

import numpy as np

from .domain import LAYOUTS, SHAPE_SIDES, Panel, RPMProblem

RESOLUTIONS = (32, 64, 96, 224)
SUB = 8  # coordinate units per pixel
_Q = 1 << 12  # fixed-point scale of edge normals


@lru_cache(maxsize=None)
def _cosq(deg: int) -> int:
    return int(round(_Q * math.cos(math.radians(deg % 360))))


def shade_level(shade: int) -> int:
    return (255 * (5 + 9 * shade) + 50) // 100


def _radius_units(size: int, half_units: int) -> int:
    return (2 * (3 + size) * half_units + 10) // 20


def _inside(sides: int, radius: int, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Integer point-in-shape test for a shape centred at the origin."""
    if radius <= 0:
        return np.zeros(dx.shape, dtype=bool)
    if sides == 0:
        return dx * dx + dy * dy <= radius * radius
    apothem = radius * _cosq(180 // sides)
    ok = np.ones(dx.shape, dtype=bool)
    for i in range(sides):
        deg = 45 + 180 // sides + 360 * i // sides
        nx, ny = _cosq(deg), _cosq(90 - deg)
        ok &= nx * dx + ny * dy <= apothem
    return ok


def _shrink(sides: int, radius: int) -> int:
    """Circumradius of the same shape with its boundary moved in by one pixel."""
    if sides == 0:
        return radius - SUB
    # apothem - SUB, converted back to a circumradius
    c = _cosq(180 // sides)
    return (radius * c - SUB * _Q) // c


@lru_cache(maxsize=65536)
def _entity_patch(cx: int, cy: int, half: int, sides: int, size: int, shade: int,
                  resolution: int) -> tuple[int, int, int, int, np.ndarray]:
    radius = _radius_units(size, half)
    x0 = max((cx - radius) // SUB - 1, 0)
    y0 = max((cy - radius) // SUB - 1, 0)
    x1 = min((cx + radius) // SUB + 2, resolution)
    y1 = min((cy + radius) // SUB + 2, resolution)
    offs = 2 * np.arange(4, dtype=np.int64) + 1
    xs = (SUB * np.arange(x0, x1, dtype=np.int64)[:, None] + offs[None, :]).reshape(-1) - cx
    ys = (SUB * np.arange(y0, y1, dtype=np.int64)[:, None] + offs[None, :]).reshape(-1) - cy
    dy, dx = np.meshgrid(ys, xs, indexing="ij")
    outer = _inside(sides, radius, dx, dy)
    inner = _inside(sides, _shrink(sides, radius), dx, dy)
    h, w = y1 - y0, x1 - x0

    def coverage(mask):
        return mask.reshape(h, 4, w, 4).sum(axis=(1, 3), dtype=np.int64)

    c_out, c_in = coverage(outer), coverage(inner)
    fill = shade_level(shade)
    patch = (255 * (16 - c_out) + fill * c_in + 8) // 16
    patch = patch.astype(np.uint8)
    patch.flags.writeable = False
    return y0, y1, x0, x1, patch


def render_panel(p: Panel, resolution: int = 32) -> np.ndarray:
    """Render a panel to an H x W uint8 image (white background)."""
    if resolution < 8:
        raise ValueError(f"resolution {resolution} too small")
    img = np.full((resolution, resolution), 255, dtype=np.uint8)
    units = resolution * SUB
    layout = LAYOUTS[p.config]
    for comp, slots in zip(p.components, layout.components):
        for pos in comp.positions:
            slot = slots[pos]
            cx = int(round(slot.cx * units))
            cy = int(round(slot.cy * units))
            half = int(round(slot.half * units))
            y0, y1, x0, x1, patch = _entity_patch(
                cx, cy, half, SHAPE_SIDES[comp.type], comp.size, comp.shade, resolution)
            np.minimum(img[y0:y1, x0:x1], patch, out=img[y0:y1, x0:x1])
    return img


def render_row(panels, resolution: int = 32) -> np.ndarray:
    """Stack three panels into a (3, H, W) uint8 array, left to right."""
    return np.stack([render_panel(p, resolution) for p in panels])


def render_problem(p: RPMProblem, resolution: int = 32) -> np.ndarray:
    """(16, H, W) uint8: the eight context panels followed by the eight candidates."""
    return np.stack([render_panel(q, resolution) for q in p.panels])


def problem_images(p: RPMProblem, resolution: int = 32, dtype=np.float32) -> np.ndarray:
    """(16, H, W) images scaled to [0, 1]."""
    return render_problem(p, resolution).astype(dtype) / dtype(255)


def write_pgm(img: np.ndarray, path) -> None:
    """Binary PGM (P5) export of a uint8 image."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM file")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(pixels, dtype=np.uint8, count=w * h).reshape(h, w)
