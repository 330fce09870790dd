"""Activation maps for qualitative inspection of student encoders:
channel-mean, cluster-weighted, and occlusion-sensitivity strategies.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
import torch

from .errors import ValidationError
from .modeladapter import ExtractorHandle

SOURCES = ("channel_mean", "cluster_weighted", "occlusion")


@dataclass(frozen=True)
class ActivationMap:
    data: np.ndarray   # 2D, min-max normalized to [0, 1]
    source: str
    image_id: str = ""

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"unknown map source {self.source!r}")
        d = self.data
        if d.ndim != 2 or not np.isfinite(d).all():
            raise ValidationError("activation map must be a finite 2D array")


def _normalize(raw: np.ndarray) -> np.ndarray:
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < 1e-12:
        return np.zeros_like(raw, dtype=np.float64)
    return (raw.astype(np.float64) - lo) / (hi - lo)


def _latent_array(z) -> np.ndarray:
    arr = np.asarray(z.detach().cpu().numpy() if isinstance(z, torch.Tensor) else z,
                     dtype=np.float64)
    if arr.ndim != 3:
        raise ValidationError("latent code must be 3D (c, w, h)")
    return arr


def channel_mean_map(z, image_id: str = "") -> ActivationMap:
    """Per-position mean over channels, min-max normalized."""
    arr = _latent_array(z)
    return ActivationMap(data=_normalize(arr.mean(axis=0)),
                         source="channel_mean", image_id=image_id)


def cluster_weighted_map(z, assignments, image_id: str = "") -> ActivationMap:
    """Per-position weighted channel sum using soft cluster assignments.

    assignments has shape (c, w, h); weights at each position must sum
    to 1 within 1e-5.
    """
    arr = _latent_array(z)
    w = np.asarray(assignments, dtype=np.float64)
    if w.shape != arr.shape:
        raise ValidationError(
            f"assignment shape {w.shape} does not match latent {arr.shape}")
    sums = w.sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ValidationError("assignment weights must sum to 1 at every position")
    return ActivationMap(data=_normalize((arr * w).sum(axis=0)),
                         source="cluster_weighted", image_id=image_id)


def occlusion_map(handle: ExtractorHandle, image: np.ndarray,
                  patch_size: int = 32, stride: int = 32,
                  image_id: str = "") -> ActivationMap:
    """Descriptor sensitivity to masking each patch with the image mean.

    Cell (i, j) holds the L2 change of the descriptor when the patch at
    (i * stride, j * stride) is filled with the image's mean color.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    if patch_size < 1 or patch_size > h or patch_size > w:
        raise ValidationError(
            f"patch size {patch_size} does not fit image {w}x{h}")
    rows = (h - patch_size) // stride + 1
    cols = (w - patch_size) // stride + 1
    fill = img.reshape(-1, img.shape[-1]).mean(axis=0)
    with torch.no_grad():
        base = handle.describe(img).cpu().numpy()
        raw = np.zeros((rows, cols))
        for i in range(rows):
            for j in range(cols):
                masked = img.copy()
                y, x = i * stride, j * stride
                masked[y:y + patch_size, x:x + patch_size] = fill
                changed = handle.describe(masked).cpu().numpy()
                raw[i, j] = float(np.linalg.norm(changed - base))
    return ActivationMap(data=_normalize(raw), source="occlusion", image_id=image_id)


def render_overlay(amap: ActivationMap, image: np.ndarray,
                   alpha: float = 0.5) -> np.ndarray:
    """Blend the map over the image with a perceptual colormap."""
    img = np.asarray(image)
    heat = cv2.resize((amap.data * 255).astype(np.uint8),
                      (img.shape[1], img.shape[0]),
                      interpolation=cv2.INTER_NEAREST)
    colored = cv2.applyColorMap(heat, cv2.COLORMAP_VIRIDIS)
    return cv2.addWeighted(img, 1.0 - alpha, colored, alpha, 0.0)
