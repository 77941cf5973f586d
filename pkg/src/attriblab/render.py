"""Heatmap and chart rasterization with byte-stable PNG/PGM encoders."""
from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)


def encode_png(rgb: np.ndarray) -> bytes:
    """Non-interlaced 8-bit RGB PNG with a single IDAT chunk, filter type 0."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected (h, w, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    rows = np.concatenate([np.zeros((h, 1), np.uint8), rgb.reshape(h, w * 3)], axis=1)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (_PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(rows.tobytes(), 9))
            + _chunk(b"IEND", b""))


def decode_png(raw: bytes) -> np.ndarray:
    """Inverse of :func:`encode_png` (filter type 0 only)."""
    if raw[:8] != _PNG_SIGNATURE:
        raise ValueError("not a PNG file")
    pos, idat, w, h = 8, b"", 0, 0
    while pos < len(raw):
        (length,) = struct.unpack(">I", raw[pos:pos + 4])
        tag, body = raw[pos + 4:pos + 8], raw[pos + 8:pos + 8 + length]
        if tag == b"IHDR":
            w, h = struct.unpack(">II", body[:8])
        elif tag == b"IDAT":
            idat += body
        pos += 12 + length
    rows = np.frombuffer(zlib.decompress(idat), np.uint8).reshape(h, 1 + w * 3)
    if rows[:, 0].any():
        raise ValueError("unsupported PNG filter")
    return rows[:, 1:].reshape(h, w, 3)


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"expected (h, w) uint8, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def to_uint8(v: np.ndarray) -> np.ndarray:
    """[0, 1] -> 0..255 with round-half-to-even."""
    return np.rint(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8)


def bwr(v: np.ndarray) -> np.ndarray:
    """Diverging blue-white-red colormap: 0 -> blue, 0.5 -> white, 1 -> red."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    lower = np.minimum(v, 0.5) * 2.0  # 0 at blue, 1 at white
    upper = (np.maximum(v, 0.5) - 0.5) * 2.0  # 0 at white, 1 at red
    r = np.where(v <= 0.5, lower, 1.0)
    g = np.where(v <= 0.5, lower, 1.0 - upper)
    b = np.where(v <= 0.5, 1.0, 1.0 - upper)
    return to_uint8(np.stack([r, g, b], axis=-1))


def heatmap_rgb(values: np.ndarray, scale: int = 1) -> np.ndarray:
    vals = np.asarray(values, dtype=np.float64)
    if vals.size and (vals.min() < 0 or vals.max() > 1):
        raise ValueError("heatmap values must be normalized to [0, 1]")
    rgb = bwr(vals)
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    return rgb


def render_heatmap(values: np.ndarray, out, scale: int = 8) -> Path:
    """Write the bwr PNG at ``out`` and the raw grayscale PGM beside it."""
    out = Path(out)
    out.write_bytes(encode_png(heatmap_rgb(values, scale)))
    out.with_suffix(".pgm").write_bytes(encode_pgm(to_uint8(np.asarray(values))))
    return out


# ---------------------------------------------------------------------------
# charts: axis box plus markers, no text
# ---------------------------------------------------------------------------

PALETTE = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (255, 127, 14), (148, 103, 189),
           (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207)]


class Canvas:
    def __init__(self, width: int = 480, height: int = 360, margin: int = 24):
        self.w, self.h, self.m = width, height, margin
        self.px = np.full((height, width, 3), 255, np.uint8)
        self.px[margin, margin:width - margin] = 0
        self.px[height - margin, margin:width - margin + 1] = 0
        self.px[margin:height - margin, margin] = 0
        self.px[margin:height - margin + 1, width - margin] = 0

    def _map(self, x, y, xr, yr):
        def scale(v, lo, hi, a, b):
            return a + (v - lo) / (hi - lo) * (b - a) if hi > lo else np.full_like(v, (a + b) / 2)
        col = scale(np.asarray(x, float), *xr, self.m + 4, self.w - self.m - 4)
        row = scale(np.asarray(y, float), *yr, self.h - self.m - 4, self.m + 4)
        return np.rint(col).astype(int), np.rint(row).astype(int)

    def dot(self, c: int, r: int, color, radius: int = 1):
        r0, r1 = max(r - radius, 0), min(r + radius + 1, self.h)
        c0, c1 = max(c - radius, 0), min(c + radius + 1, self.w)
        self.px[r0:r1, c0:c1] = color

    def cross(self, c: int, r: int, color, size: int = 5):
        self.px[max(r - size, 0):r + size + 1, max(c - 1, 0):c + 2] = color
        self.px[max(r - 1, 0):r + 2, max(c - size, 0):c + size + 1] = color

    def line(self, c0, r0, c1, r1, color):
        steps = int(max(abs(c1 - c0), abs(r1 - r0))) + 1
        cs = np.rint(np.linspace(c0, c1, steps)).astype(int)
        rs = np.rint(np.linspace(r0, r1, steps)).astype(int)
        self.px[rs, cs] = color

    def png(self) -> bytes:
        return encode_png(self.px)


def _range(v: np.ndarray) -> tuple[float, float]:
    return float(np.min(v)), float(np.max(v))


def line_plot(x: Sequence[float], series: Sequence[Sequence[float]]) -> bytes:
    """Each series is rescaled to the full plot height; numerics live in the CSV."""
    canvas = Canvas()
    xr = _range(np.asarray(x))
    for k, ys in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        cols, rows = canvas._map(x, ys, xr, _range(np.asarray(ys)))
        for i in range(len(cols) - 1):
            canvas.line(cols[i], rows[i], cols[i + 1], rows[i + 1], color)
        for c, r in zip(cols, rows):
            canvas.dot(c, r, color, 2)
    return canvas.png()


def scatter_plot(points: np.ndarray, groups: Sequence[str], centroids: dict[str, np.ndarray] | None = None) -> bytes:
    canvas = Canvas(480, 480)
    pts = np.asarray(points, float)
    xr, yr = _range(pts[:, 0]), _range(pts[:, 1])
    order = list(dict.fromkeys(groups))
    cols, rows = canvas._map(pts[:, 0], pts[:, 1], xr, yr)
    for c, r, g in zip(cols, rows, groups):
        canvas.dot(c, r, PALETTE[order.index(g) % len(PALETTE)], 1)
    for g, ctr in (centroids or {}).items():
        c, r = canvas._map(ctr[0], ctr[1], xr, yr)
        canvas.cross(int(c), int(r), (0, 0, 0), 6)
        canvas.cross(int(c), int(r), PALETTE[order.index(g) % len(PALETTE)], 4)
    return canvas.png()
