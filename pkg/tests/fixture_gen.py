"""Procedural synthetic fixtures: tiny place-recognition datasets with
known geometry, written to disk as PNGs plus manifests.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from loqi.datamodel import DatasetManifest, GeoPose, ImageRecord, save_manifest

PLACE_SPACING_M = 1000.0


def place_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """One place's base scene: smooth structure plus fine identity texture."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    # low-frequency structure shared shapes, random phase per place
    for ch in range(3):
        fx, fy = rng.uniform(1.0, 3.0, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        img[..., ch] = 0.5 + 0.25 * np.sin(2 * np.pi * fx * xs + px) \
            * np.cos(2 * np.pi * fy * ys + py)
    # fine texture carrying most of the place identity
    fine = rng.normal(0.0, 1.0, (size // 4, size // 4))
    fine = cv2.resize(fine, (size, size), interpolation=cv2.INTER_CUBIC)
    img += 0.22 * fine[..., None]
    return (np.clip(img, 0, 1) * 255).astype(np.uint8)


def view_of(base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A same-place view: small shift, brightness jitter, pixel noise."""
    size = base.shape[0]
    dx, dy = rng.integers(-2, 3, size=2)
    m = np.float32([[1, 0, dx], [0, 1, dy]])
    v = cv2.warpAffine(base, m, (size, size), borderMode=cv2.BORDER_REFLECT)
    gain = rng.uniform(0.92, 1.08)
    noise = rng.normal(0, 4, v.shape)
    return np.clip(v.astype(np.float64) * gain + noise, 0, 255).astype(np.uint8)


def make_places_dataset(root, n_places: int = 64, views_per_place: int = 2,
                        size: int = 64, seed: int = 0,
                        split_name: str = "train") -> DatasetManifest:
    """Grid of places 1 km apart; views of one place within 5 m."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    side = int(np.ceil(np.sqrt(n_places)))
    for p in range(n_places):
        base = place_image(rng, size)
        east = (p % side) * PLACE_SPACING_M
        north = (p // side) * PLACE_SPACING_M
        for v in range(views_per_place):
            img = base if v == 0 else view_of(base, rng)
            rid = f"p{p:03d}v{v}"
            path = root / f"{rid}.png"
            cv2.imwrite(str(path), img)
            records.append(ImageRecord(
                id=rid, path=str(path),
                pose=GeoPose.utm(east + v * 2.0, north, zone="18N"),
                place_id=f"p{p:03d}"))
    manifest = DatasetManifest(name=root.name, split=split_name,
                               records=tuple(records), gt_mode="metric",
                               gt_threshold=25.0)
    save_manifest(manifest, root / "manifest.csv")
    return manifest


def split_database_query(manifest: DatasetManifest):
    """View 0 of each place as database, remaining views as queries."""
    db = [r for r in manifest.records if r.id.endswith("v0")]
    q = [r for r in manifest.records if not r.id.endswith("v0")]
    dbm = DatasetManifest(name=manifest.name + "-db", split="database",
                          records=tuple(db), gt_mode=manifest.gt_mode,
                          gt_threshold=manifest.gt_threshold)
    qm = DatasetManifest(name=manifest.name + "-q", split="query",
                         records=tuple(q), gt_mode=manifest.gt_mode,
                         gt_threshold=manifest.gt_threshold)
    return dbm, qm


def carrier_pattern(size: int, amp: float) -> np.ndarray:
    """Fixed high-frequency checkerboard shared by every image.

    JPEG at low quality removes it almost entirely, so its descriptor
    footprint is a systematic offset a student can learn to undo.
    """
    ys, xs = np.mgrid[0:size, 0:size]
    return amp * np.sign(np.sin(2 * np.pi * xs / 4) * np.sin(2 * np.pi * ys / 4))


def offset_place_image(rng: np.random.Generator, size: int,
                       carrier_amp: float) -> np.ndarray:
    """Place identity in smooth per-channel color fields plus the carrier.

    The color statistics survive both mean pooling and heavy JPEG, while
    the carrier is destroyed by it; degradation therefore costs retrieval
    accuracy through a recoverable descriptor offset.
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    for ch in range(3):
        base = rng.uniform(70, 190)
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        img[..., ch] = base + 30 * np.sin(2 * np.pi * fx * xs + px) \
            * np.cos(2 * np.pi * fy * ys + py)
    img += carrier_pattern(size, carrier_amp)[..., None]
    return np.clip(img, 0, 255).astype(np.uint8)


def gentle_view_of(base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gain = rng.uniform(0.97, 1.03)
    noise = rng.normal(0, 2, base.shape)
    return np.clip(base.astype(np.float64) * gain + noise, 0, 255).astype(np.uint8)


def make_offset_places_dataset(root, n_places: int = 64,
                               views_per_place: int = 3, size: int = 64,
                               seed: int = 42,
                               carrier_amp: float = 45.0) -> DatasetManifest:
    """Place grid whose degradation damage is a learnable common offset."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n_places)))
    records = []
    for p in range(n_places):
        base = offset_place_image(rng, size, carrier_amp)
        for v in range(views_per_place):
            img = base if v == 0 else gentle_view_of(base, rng)
            rid = f"p{p:03d}v{v}"
            path = root / f"{rid}.png"
            cv2.imwrite(str(path), img)
            records.append(ImageRecord(
                id=rid, path=str(path),
                pose=GeoPose.utm((p % side) * PLACE_SPACING_M + v * 2.0,
                                 (p // side) * PLACE_SPACING_M, zone="18N"),
                place_id=f"p{p:03d}"))
    manifest = DatasetManifest(name=root.name, split="train",
                               records=tuple(records), gt_mode="metric",
                               gt_threshold=25.0)
    save_manifest(manifest, root / "manifest.csv")
    return manifest


def textured_clip(n_frames: int = 12, width: int = 160, height: int = 120,
                  seed: int = 0):
    """Moving-texture frames for codec tests."""
    rng = np.random.default_rng(seed)
    tex = rng.integers(0, 255, (height * 2, width * 2, 3)).astype(np.uint8)
    tex = cv2.GaussianBlur(tex, (5, 5), 0)
    frames = []
    for t in range(n_frames):
        x = (t * 3) % width
        y = (t * 2) % height
        frames.append(tex[y:y + height, x:x + width].copy())
    return frames


def hue_gradient_pano(width: int = 1024, height: int = 512) -> np.ndarray:
    """Equirectangular pano whose hue advances linearly with yaw."""
    hue = np.linspace(0, 179, width, endpoint=False).astype(np.uint8)
    hsv = np.zeros((height, width, 3), dtype=np.uint8)
    hsv[..., 0] = hue[None, :]
    hsv[..., 1] = 255
    hsv[..., 2] = 200
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2BGR)
