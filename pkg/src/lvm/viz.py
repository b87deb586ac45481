"""Minimal deterministic image and plot writers (PNG and SVG, no dependencies)."""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write an 8-bit grayscale [H, W] or RGB [H, W, 3] PNG."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("write_png expects uint8 pixels")
    if img.ndim == 2:
        color_type = 0
    elif img.ndim == 3 and img.shape[2] == 3:
        color_type = 2
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    height, width = img.shape[:2]
    raw = b"".join(b"\x00" + np.ascontiguousarray(row).tobytes() for row in img)

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (struct.pack(">I", len(data)) + tag + data
                + struct.pack(">I", zlib.crc32(tag + data)))

    blob = (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw, 9))
            + chunk(b"IEND", b""))
    with open(path, "wb") as fh:
        fh.write(blob)


def image_grid(rows: list[np.ndarray], upscale: int = 4, pad: int = 2) -> np.ndarray:
    """Tile rows of [N, C, H, W] float frames in [0, 1] into one uint8 image.

    Grayscale frames (C=1) produce a 2-D image, RGB frames a 3-D one; frames
    are nearest-neighbor upscaled and separated by mid-gray gutters.
    """
    if not rows:
        raise ValueError("need at least one row of frames")
    n, channels, h, w = rows[0].shape
    for row in rows:
        if row.shape != rows[0].shape:
            raise ValueError("all rows must share one frame shape")
    cell_h, cell_w = h * upscale, w * upscale
    grid_h = len(rows) * cell_h + (len(rows) + 1) * pad
    grid_w = n * cell_w + (n + 1) * pad
    rgb = channels == 3
    canvas = np.full((grid_h, grid_w, 3) if rgb else (grid_h, grid_w), 128, dtype=np.uint8)
    for r, row in enumerate(rows):
        frames = np.clip(row, 0.0, 1.0)
        for i in range(n):
            frame = frames[i]
            cell = (frame.transpose(1, 2, 0) if rgb else frame[0])
            cell = np.round(cell * 255.0).astype(np.uint8)
            cell = np.repeat(np.repeat(cell, upscale, axis=0), upscale, axis=1)
            top = pad + r * (cell_h + pad)
            left = pad + i * (cell_w + pad)
            canvas[top:top + cell_h, left:left + cell_w] = cell
    return canvas


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def write_learning_curves_svg(path: str | os.PathLike,
                              groups: dict[str, list[tuple[np.ndarray, np.ndarray]]],
                              xlabel: str = "environment steps",
                              ylabel: str = "evaluation return") -> None:
    """Plot one curve per group; groups with several runs get a min-max band
    around the mean.

    Each run is a pair of equal-length arrays (x, y). Output is plain SVG with
    deterministic text, so identical inputs yield identical files.
    """
    width, height = 640, 420
    ml, mr, mt, mb = 64, 16, 20, 48
    all_x = np.concatenate([x for runs in groups.values() for x, _ in runs])
    all_y = np.concatenate([y for runs in groups.values() for _, y in runs])
    if all_x.size == 0:
        raise ValueError("nothing to plot")
    x_lo, x_hi = float(all_x.min()), float(all_x.max())
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    y_pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    def sx(x: float) -> float:
        return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def sy(y: float) -> float:
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    # axes and ticks
    parts.append(f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" '
                 'stroke="black"/>')
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>')
    for i in range(5):
        xv = x_lo + (x_hi - x_lo) * i / 4
        yv = y_lo + (y_hi - y_lo) * i / 4
        parts.append(f'<line x1="{_fmt(sx(xv))}" y1="{height - mb}" x2="{_fmt(sx(xv))}" '
                     f'y2="{height - mb + 5}" stroke="black"/>')
        parts.append(f'<text x="{_fmt(sx(xv))}" y="{height - mb + 18}" font-size="11" '
                     f'text-anchor="middle">{_fmt(xv)}</text>')
        parts.append(f'<line x1="{ml - 5}" y1="{_fmt(sy(yv))}" x2="{ml}" y2="{_fmt(sy(yv))}" '
                     'stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{_fmt(sy(yv) + 4)}" font-size="11" '
                     f'text-anchor="end">{_fmt(yv)}</text>')
    parts.append(f'<text x="{(ml + width - mr) / 2}" y="{height - 12}" font-size="12" '
                 f'text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="14" y="{(mt + height - mb) / 2}" font-size="12" '
                 f'text-anchor="middle" transform="rotate(-90 14 {(mt + height - mb) / 2})">'
                 f'{ylabel}</text>')

    for gi, (label, runs) in enumerate(groups.items()):
        color = _PALETTE[gi % len(_PALETTE)]
        if len(runs) > 1:
            grid = np.unique(np.concatenate([x for x, _ in runs]))
            stack = np.stack([np.interp(grid, x, y) for x, y in runs])
            lo, hi, mean = stack.min(0), stack.max(0), stack.mean(0)
            band = (" ".join(f"{_fmt(sx(x))},{_fmt(sy(v))}" for x, v in zip(grid, hi))
                    + " " + " ".join(f"{_fmt(sx(x))},{_fmt(sy(v))}"
                                     for x, v in zip(grid[::-1], lo[::-1])))
            parts.append(f'<polygon points="{band}" fill="{color}" opacity="0.25" '
                         'stroke="none"/>')
            pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(v))}" for x, v in zip(grid, mean))
        else:
            x, y = runs[0]
            pts = " ".join(f"{_fmt(sx(xi))},{_fmt(sy(yi))}" for xi, yi in zip(x, y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        parts.append(f'<text x="{width - mr - 8}" y="{mt + 16 + 16 * gi}" font-size="12" '
                     f'text-anchor="end" fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
