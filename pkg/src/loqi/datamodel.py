"""Dataset manifests, geographic poses, and persistent descriptor databases.

Manifest format: a small comment header followed by CSV. Example::

    # loqi-manifest v1
    # name=lobby split=database gt_mode=metric:25
    id,path,pose_mode,lat,lon,frame,place_id,quality_tag,degradation_spec
    q001,img/q001.jpg,latlon,40.7433,-73.9845,,p1,high,

pose_mode is ``latlon``, ``utm:<zone>`` or ``frame``. For utm the
lat/lon columns carry easting/northing in meters. quality_tag is
``high`` or ``degraded``; degraded rows carry the serialized
degradation spec (see loqi.degrade) in the last column.

DescriptorDB binary layout (little-endian), documented here and in the
README: magic ``LQDB``, u16 version, u8 normalized flag, u32 dim,
u32 count, then count entries of (u16 id length, utf-8 id), then
count * dim float32 values, vectors in id-sorted order.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

EARTH_RADIUS_M = 6_371_000.0

POSE_MODES = ("latlon", "utm", "frame")
SPLITS = ("database", "query", "train")

_MAGIC = b"LQDB"
_DB_VERSION = 1

_COLUMNS = [
    "id", "path", "pose_mode", "lat", "lon", "frame",
    "place_id", "quality_tag", "degradation_spec",
]


@dataclass(frozen=True)
class GeoPose:
    """A pose in one of three modes: latlon degrees, utm meters, or frame index."""

    mode: str
    x: float = 0.0   # latitude or easting
    y: float = 0.0   # longitude or northing
    zone: str = ""   # utm zone label, empty otherwise
    frame: int = 0

    def __post_init__(self):
        if self.mode not in POSE_MODES:
            raise ValidationError(f"unknown pose mode {self.mode!r}")
        if self.mode == "latlon":
            if not -90.0 <= self.x <= 90.0:
                raise ValidationError(f"latitude {self.x} outside [-90, 90]")
            if not -180.0 <= self.y <= 180.0:
                raise ValidationError(f"longitude {self.y} outside [-180, 180]")
        if self.mode == "frame" and self.frame < 0:
            raise ValidationError(f"frame index {self.frame} must be >= 0")

    @classmethod
    def latlon(cls, lat: float, lon: float) -> "GeoPose":
        return cls(mode="latlon", x=float(lat), y=float(lon))

    @classmethod
    def utm(cls, easting: float, northing: float, zone: str = "") -> "GeoPose":
        return cls(mode="utm", x=float(easting), y=float(northing), zone=zone)

    @classmethod
    def frame_index(cls, index: int) -> "GeoPose":
        return cls(mode="frame", frame=int(index))


def geodesic_distance(a: GeoPose, b: GeoPose) -> float:
    """Distance between two poses: meters for latlon/utm, frames for frame mode.

    latlon uses the haversine great-circle distance on a sphere of
    radius 6,371,000 m; utm is planar Euclidean; frame is absolute
    index difference.
    """
    if a.mode != b.mode:
        raise ValidationError(f"pose mode mismatch: {a.mode} vs {b.mode}")
    if a.mode == "latlon":
        lat1, lon1, lat2, lon2 = map(math.radians, (a.x, a.y, b.x, b.y))
        s = (math.sin((lat2 - lat1) / 2.0) ** 2
             + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2)
        return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))
    if a.mode == "utm":
        return math.hypot(a.x - b.x, a.y - b.y)
    return float(abs(a.frame - b.frame))


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    pose: GeoPose
    place_id: str | None = None
    quality_tag: str = "high"          # "high" or "degraded"
    degradation: str | None = None     # serialized DegradationSpec when degraded

    def __post_init__(self):
        if self.quality_tag not in ("high", "degraded"):
            raise ValidationError(f"bad quality_tag {self.quality_tag!r}")
        if self.quality_tag == "degraded" and not self.degradation:
            raise ValidationError(f"record {self.id}: degraded without a spec")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: str
    records: tuple[ImageRecord, ...]
    gt_mode: str = "metric"        # "metric" or "index"
    gt_threshold: float = 25.0     # meters or frames
    encoder_id: str = ""           # identity of the encoder that degraded these images

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        if self.gt_mode not in ("metric", "index"):
            raise ValidationError(f"unknown gt_mode {self.gt_mode!r}")
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ValidationError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
        modes = {r.pose.mode for r in self.records}
        if len(modes) > 1:
            raise ValidationError(f"mixed pose modes in manifest: {sorted(modes)}")
        if modes:
            mode = modes.pop()
            if self.gt_mode == "index" and mode != "frame":
                raise ValidationError("gt_mode index requires frame poses")
            if self.gt_mode == "metric" and mode == "frame":
                raise ValidationError("gt_mode metric requires latlon or utm poses")

    def __len__(self):
        return len(self.records)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def with_records(self, records) -> "DatasetManifest":
        return replace(self, records=tuple(records))


def _pose_to_row(pose: GeoPose) -> tuple[str, str, str, str]:
    if pose.mode == "latlon":
        return "latlon", repr(pose.x), repr(pose.y), ""
    if pose.mode == "utm":
        mode = f"utm:{pose.zone}" if pose.zone else "utm"
        return mode, repr(pose.x), repr(pose.y), ""
    return "frame", "", "", str(pose.frame)


def _pose_from_row(mode_s: str, lat_s: str, lon_s: str, frame_s: str, line: int) -> GeoPose:
    if mode_s == "latlon":
        return GeoPose.latlon(float(lat_s), float(lon_s))
    if mode_s == "utm" or mode_s.startswith("utm:"):
        zone = mode_s.partition(":")[2]
        return GeoPose.utm(float(lat_s), float(lon_s), zone)
    if mode_s == "frame":
        return GeoPose.frame_index(int(frame_s))
    raise FormatError(f"unknown pose_mode {mode_s!r}", line=line)


def save_manifest(manifest: DatasetManifest, path) -> None:
    buf = io.StringIO()
    buf.write("# loqi-manifest v1\n")
    buf.write(f"# name={manifest.name} split={manifest.split} "
              f"gt_mode={manifest.gt_mode}:{manifest.gt_threshold:g}")
    if manifest.encoder_id:
        buf.write(f" encoder={manifest.encoder_id}")
    buf.write("\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_COLUMNS)
    for r in manifest.records:
        mode_s, lat_s, lon_s, frame_s = _pose_to_row(r.pose)
        writer.writerow([r.id, r.path, mode_s, lat_s, lon_s, frame_s,
                         r.place_id or "", r.quality_tag, r.degradation or ""])
    Path(path).write_text(buf.getvalue())


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    meta = {"name": path.stem, "split": "database", "gt_mode": "metric:25"}
    body_start = 0
    for i, line in enumerate(lines):
        if not line.startswith("#"):
            body_start = i
            break
        for tok in line.lstrip("# ").split():
            if "=" in tok:
                k, _, v = tok.partition("=")
                meta[k] = v
    else:
        raise FormatError("manifest has no header row", line=len(lines))
    reader = csv.reader(lines[body_start:])
    header = next(reader, None)
    if header != _COLUMNS:
        raise FormatError(f"bad column header {header!r}", line=body_start + 1)
    records = []
    for offset, row in enumerate(reader):
        line = body_start + 2 + offset
        if not row:
            continue
        if len(row) != len(_COLUMNS):
            raise FormatError(f"expected {len(_COLUMNS)} columns, got {len(row)}", line=line)
        rid, rpath, mode_s, lat_s, lon_s, frame_s, place, tag, degr = row
        try:
            pose = _pose_from_row(mode_s, lat_s, lon_s, frame_s, line)
        except ValueError as e:
            raise FormatError(str(e), line=line) from e
        records.append(ImageRecord(
            id=rid, path=rpath, pose=pose, place_id=place or None,
            quality_tag=tag, degradation=degr or None))
    gt_mode, _, thr = meta["gt_mode"].partition(":")
    return DatasetManifest(
        name=meta["name"], split=meta["split"], records=tuple(records),
        gt_mode=gt_mode, gt_threshold=float(thr or 25.0),
        encoder_id=meta.get("encoder", ""))


@dataclass
class DescriptorDB:
    """In-memory descriptor store keyed by record id."""

    manifest_ref: str
    dim: int
    normalized: bool = True
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("descriptor dim must be positive")

    def add(self, record_id: str, vector: np.ndarray) -> None:
        v = np.asarray(vector, dtype=np.float32)
        if v.shape != (self.dim,):
            raise ValidationError(
                f"descriptor for {record_id!r} has shape {v.shape}, expected ({self.dim},)")
        if self.normalized and abs(float(np.linalg.norm(v)) - 1.0) > 1e-6:
            raise ValidationError(f"descriptor for {record_id!r} is not unit-norm")
        self.entries[record_id] = v

    def __len__(self):
        return len(self.entries)

    def matrix(self) -> tuple[list[str], np.ndarray]:
        """All vectors stacked in id-sorted order."""
        ids = sorted(self.entries)
        if not ids:
            return ids, np.zeros((0, self.dim), dtype=np.float32)
        return ids, np.stack([self.entries[i] for i in ids])


def save_db(db: DescriptorDB, path) -> None:
    ids, mat = db.matrix()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HBII", _DB_VERSION, int(db.normalized), db.dim, len(ids)))
        ref = db.manifest_ref.encode()
        f.write(struct.pack("<H", len(ref)))
        f.write(ref)
        for i in ids:
            b = i.encode()
            f.write(struct.pack("<H", len(b)))
            f.write(b)
        f.write(mat.astype("<f4").tobytes())


def load_db(path) -> DescriptorDB:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a descriptor database (bad magic)")
    try:
        version, normalized, dim, count = struct.unpack_from("<HBII", data, 4)
        off = 4 + struct.calcsize("<HBII")
        (ref_len,) = struct.unpack_from("<H", data, off)
        off += 2
        manifest_ref = data[off:off + ref_len].decode()
        off += ref_len
        ids = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            ids.append(data[off:off + n].decode())
            off += n
        need = count * dim * 4
        if len(data) - off < need:
            raise FormatError(f"{path}: truncated descriptor data")
        mat = np.frombuffer(data[off:off + need], dtype="<f4").reshape(count, dim)
    except struct.error as e:
        raise FormatError(f"{path}: truncated header") from e
    if version != _DB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    db = DescriptorDB(manifest_ref=manifest_ref, dim=dim, normalized=bool(normalized))
    for i, row in zip(ids, mat):
        db.entries[i] = row.copy()
    return db
