"""Equirectangular panoramas to virtual pinhole views, plus center cropping.

Conventions: panorama column ``c`` sits at azimuth ``360 * c / W - 180``
degrees and row ``r`` at latitude ``90 - 180 * (r + 0.5) / H``. Camera axes
are x right, y down, z forward; azimuth grows to the right. A view is
rotated by yaw about world-up first, then by pitch about its own right axis
(positive pitch looks up).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import TargetLargerThanSource
from .synthworld import CameraIntrinsics


@dataclass
class Panorama:
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        H, W = self.pixels.shape[:2]
        if W != 2 * H:
            raise ValueError(f"equirectangular panorama needs width == 2*height, got {W}x{H}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class VirtualView:
    yaw: float = 0.0
    pitch: float = 0.0
    horizontal_fov: float = 90.0
    out_size: tuple = (640, 480)

    def __post_init__(self):
        if not 0 < self.horizontal_fov < 180:
            raise ValueError("horizontal_fov must lie in (0, 180)")
        if min(self.out_size) < 1:
            raise ValueError("out_size must be positive")

    @property
    def focal(self) -> float:
        return (self.out_size[0] / 2) / np.tan(np.radians(self.horizontal_fov) / 2)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        w, h = self.out_size
        return CameraIntrinsics(self.focal, (w - 1) / 2, (h - 1) / 2, w, h)

    def rotation(self) -> np.ndarray:
        """Camera-to-panorama rotation: yaw about up, then pitch about right."""
        y, p = np.radians(self.yaw), np.radians(self.pitch)
        Ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
        Rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
        return Ry @ Rx


def direction_to_lonlat(d):
    """Unit directions (..., 3) to azimuth/latitude in degrees."""
    d = np.asarray(d, dtype=float)
    lon = np.degrees(np.arctan2(d[..., 0], d[..., 2]))
    lat = np.degrees(np.arctan2(-d[..., 1], np.hypot(d[..., 0], d[..., 2])))
    return lon, lat


def lonlat_to_direction(lon, lat):
    lon, lat = np.radians(lon), np.radians(lat)
    return np.stack([np.cos(lat) * np.sin(lon), -np.sin(lat), np.cos(lat) * np.cos(lon)], axis=-1)


def pano_pixel_lonlat(height, width):
    """Azimuth/latitude of every panorama pixel center as (H, W) arrays."""
    c, r = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    return 360.0 * c / width - 180.0, 90.0 - 180.0 * (r + 0.5) / height


def sample_bilinear(pixels, col, row):
    """Bilinear lookup with horizontal wraparound and vertical clamping."""
    img = np.asarray(pixels, dtype=float)
    H, W = img.shape[:2]
    row = np.clip(row, 0.0, H - 1.0)
    c0 = np.floor(col)
    r0 = np.floor(row)
    fc, fr = col - c0, row - r0
    c0 = c0.astype(int) % W
    c1 = (c0 + 1) % W
    r0 = r0.astype(int)
    r1 = np.minimum(r0 + 1, H - 1)
    if img.ndim == 3:
        fc, fr = fc[..., None], fr[..., None]
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def pano_to_perspective(pano: Panorama, view: VirtualView):
    """Render ``view`` from ``pano``; returns ``(pixels, intrinsics)``.

    Integer inputs come back rounded to the same dtype.
    """
    intr = view.intrinsics
    u, v = intr.pixel_grid()
    rays = intr.rays(u, v)
    d = rays @ view.rotation().T
    lon, lat = direction_to_lonlat(d)
    col = (lon + 180.0) * pano.width / 360.0
    row = (90.0 - lat) * pano.height / 180.0 - 0.5
    out = sample_bilinear(pano.pixels, col, row)
    if np.issubdtype(pano.pixels.dtype, np.integer):
        info = np.iinfo(pano.pixels.dtype)
        out = np.clip(np.rint(out), info.min, info.max).astype(pano.pixels.dtype)
    return out, intr


def center_crop(pixels, target):
    """Centered ``(width, height)`` window; odd leftovers go to the bottom-right."""
    pixels = np.asarray(pixels)
    w, h = target
    H, W = pixels.shape[:2]
    if w > W or h > H:
        raise TargetLargerThanSource(f"target {w}x{h} exceeds source {W}x{H}")
    x0, y0 = (W - w) // 2, (H - h) // 2
    return pixels[y0:y0 + h, x0:x0 + w]


# -- PPM ------------------------------------------------------------------------------

def write_ppm(path, pixels):
    """Binary PPM (P6), 8-bit RGB."""
    img = np.asarray(pixels)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) array")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _ppm_tokens(data, count, pos):
    out = []
    while len(out) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        out.append(data[start:pos])
    return out, pos + 1


def read_ppm(path):
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(data, 4, 0)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    body = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return body.reshape(h, w, 3).copy()
