"""Equirectangular panorama slicing into perspective views.

A full equirectangular frame (width = 2 x height) is sampled through a
virtual pinhole camera: each output pixel defines a 3D ray, the ray is
rotated by (yaw, pitch), converted to longitude/latitude, and the
panorama is sampled bilinearly with wrap-around at the longitudinal
seam.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class SliceSpec:
    """Uniform horizontal slicing: view k looks at yaw k * 360/num_views."""

    num_views: int
    fov_deg: float = 90.0
    out_width: int = 1440
    out_height: int = 810
    pitch_deg: float = 0.0

    def __post_init__(self):
        if self.num_views < 1:
            raise ValidationError("num_views must be positive")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValidationError(f"fov {self.fov_deg} outside (0, 180)")
        if self.out_width < 1 or self.out_height < 1:
            raise ValidationError("output dimensions must be positive")

    @property
    def yaw_step_deg(self) -> float:
        return 360.0 / self.num_views

    def yaws(self) -> list[float]:
        return [k * self.yaw_step_deg for k in range(self.num_views)]


def _check_pano(pano: np.ndarray) -> np.ndarray:
    pano = np.asarray(pano)
    if pano.ndim not in (2, 3):
        raise ValidationError("panorama must be a 2D or 3D raster")
    h, w = pano.shape[:2]
    if w != 2 * h:
        raise ValidationError(f"panorama {w}x{h} is not equirectangular (need W = 2H)")
    return pano


def _projection_maps(pano_w, pano_h, yaw_deg, pitch_deg, fov_deg, out_w, out_h):
    yaw = np.deg2rad(yaw_deg)
    pitch = np.deg2rad(pitch_deg)
    fov = np.deg2rad(fov_deg)

    f = 0.5 * out_w / np.tan(fov / 2.0)
    # pixel-center ray grid through the virtual camera
    xs = np.arange(out_w, dtype=np.float64) - (out_w - 1) / 2.0
    ys = np.arange(out_h, dtype=np.float64) - (out_h - 1) / 2.0
    xx, yy = np.meshgrid(xs, ys)
    zz = np.full_like(xx, f)

    # pitch about x, then yaw about y
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    x1 = xx
    y1 = yy * cp - zz * sp
    z1 = yy * sp + zz * cp
    x2 = x1 * cy + z1 * sy
    z2 = -x1 * sy + z1 * cy

    lon = np.arctan2(x2, z2)
    lat = np.arcsin(y1 / np.sqrt(x2 * x2 + y1 * y1 + z2 * z2))

    map_x = (lon / (2.0 * np.pi) + 0.5) * pano_w - 0.5
    map_y = (lat / np.pi + 0.5) * pano_h - 0.5
    return map_x.astype(np.float32), map_y.astype(np.float32)


def equirect_to_perspective(pano: np.ndarray, yaw_deg: float, pitch_deg: float,
                            fov_deg: float, out_w: int, out_h: int) -> np.ndarray:
    """Render one perspective view from an equirectangular panorama."""
    pano = _check_pano(pano)
    if not 0.0 < fov_deg < 180.0:
        raise ValidationError(f"fov {fov_deg} outside (0, 180)")
    if out_w < 1 or out_h < 1:
        raise ValidationError("output dimensions must be positive")
    h, w = pano.shape[:2]
    map_x, map_y = _projection_maps(w, h, yaw_deg, pitch_deg, fov_deg, out_w, out_h)
    # wrap the seam horizontally; latitudes stay in range for fov < 180
    map_x = np.mod(map_x, w).astype(np.float32)
    return cv2.remap(pano, map_x, map_y, interpolation=cv2.INTER_LINEAR,
                     borderMode=cv2.BORDER_WRAP)


def slice_panorama_video(frames, spec: SliceSpec):
    """Slice each panoramic frame into spec.num_views perspective views.

    Returns a list of num_views frame sequences; sequence k holds every
    input frame rendered at yaw k * 360/num_views, in temporal order.
    """
    frames = [_check_pano(f) for f in frames]
    dims = {f.shape for f in frames}
    if len(dims) > 1:
        raise ValidationError(f"mixed panorama dimensions: {sorted(dims)}")
    views = [[] for _ in range(spec.num_views)]
    for frame in frames:
        h, w = frame.shape[:2]
        for k, yaw in enumerate(spec.yaws()):
            views[k].append(equirect_to_perspective(
                frame, yaw, spec.pitch_deg, spec.fov_deg,
                spec.out_width, spec.out_height))
    return views


def yaw_coverage_complete(spec: SliceSpec) -> bool:
    """True when adjacent views' horizontal FOVs leave no yaw uncovered."""
    return spec.fov_deg >= spec.yaw_step_deg
