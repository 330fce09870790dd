"""Quality degradation: JPEG compression, resizing, and constant-QP video
round-trips, with bitrate measurement.

Two video backends implement the same encode/decode round-trip:

* ``FfmpegH264Codec`` shells out to an ``ffmpeg`` binary (``LOQI_FFMPEG``
  env var or PATH) and encodes H.264 in constant-QP mode, 4:2:0.
* ``MotionJpegCodec`` is a built-in, dependency-free intra-only codec
  (per-frame JPEG in a tiny container) used when no ffmpeg is
  available. The QP knob maps monotonically onto JPEG quality so the
  bitrate/quality tradeoff behaves like a quantizer sweep.

``default_video_codec`` picks ffmpeg when present, else the built-in.
"""

from __future__ import annotations

import os
import shutil
import struct
import subprocess
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import cv2
import numpy as np

from .datamodel import DatasetManifest, ImageRecord
from .errors import EnvironmentalError, FormatError, ValidationError

JPEG_ENCODER_ID = f"opencv-jpeg/{cv2.__version__}"

_MJ_MAGIC = b"LQMJ"


@dataclass(frozen=True)
class DegradationSpec:
    """One of jpeg:<quality>, resize:<w>x<h>, videoqp:<qp>[:<profile>]."""

    kind: str
    quality: int = 0
    width: int = 0
    height: int = 0
    qp: int = 0
    codec_profile: str = "h264"

    def __post_init__(self):
        if self.kind == "jpeg":
            if not 1 <= self.quality <= 100:
                raise ValidationError(f"jpeg quality {self.quality} outside [1, 100]")
        elif self.kind == "resize":
            if self.width < 8 or self.height < 8:
                raise ValidationError(f"resize target {self.width}x{self.height} below 8x8")
        elif self.kind == "videoqp":
            if not 0 <= self.qp <= 51:
                raise ValidationError(f"qp {self.qp} outside [0, 51]")
        else:
            raise ValidationError(f"unknown degradation kind {self.kind!r}")

    @classmethod
    def jpeg(cls, quality: int) -> "DegradationSpec":
        return cls(kind="jpeg", quality=quality)

    @classmethod
    def resize(cls, width: int, height: int) -> "DegradationSpec":
        return cls(kind="resize", width=width, height=height)

    @classmethod
    def videoqp(cls, qp: int, codec_profile: str = "h264") -> "DegradationSpec":
        return cls(kind="videoqp", qp=qp, codec_profile=codec_profile)

    def format(self) -> str:
        if self.kind == "jpeg":
            return f"jpeg:{self.quality}"
        if self.kind == "resize":
            return f"resize:{self.width}x{self.height}"
        return f"videoqp:{self.qp}:{self.codec_profile}"

    @classmethod
    def parse(cls, text: str) -> "DegradationSpec":
        kind, _, rest = text.partition(":")
        try:
            if kind == "jpeg":
                return cls.jpeg(int(rest))
            if kind == "resize":
                w, _, h = rest.partition("x")
                return cls.resize(int(w), int(h))
            if kind == "videoqp":
                qp, _, profile = rest.partition(":")
                return cls.videoqp(int(qp), profile or "h264")
        except ValueError as e:
            raise ValidationError(f"cannot parse degradation spec {text!r}") from e
        raise ValidationError(f"cannot parse degradation spec {text!r}")


@dataclass(frozen=True)
class BitrateRecord:
    spec: DegradationSpec
    total_bytes: int
    duration_s: float
    bitrate_bps: float

    def __post_init__(self):
        expected = self.total_bytes * 8.0 / self.duration_s
        if abs(self.bitrate_bps - expected) > 1e-3 * expected:
            raise ValidationError(
                f"bitrate {self.bitrate_bps} inconsistent with "
                f"{self.total_bytes} bytes over {self.duration_s}s")

    @classmethod
    def measure(cls, spec: DegradationSpec, total_bytes: int, duration_s: float) -> "BitrateRecord":
        return cls(spec=spec, total_bytes=total_bytes, duration_s=duration_s,
                   bitrate_bps=total_bytes * 8.0 / duration_s)


def _check_raster(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValidationError("expected an HxWx3 uint8 raster")
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise ValidationError("raster smaller than 8x8")
    return img


def jpeg_degrade(image: np.ndarray, quality: int) -> tuple[np.ndarray, int]:
    """JPEG encode/decode round-trip. Returns (raster, encoded byte size)."""
    img = _check_raster(image)
    if not 1 <= quality <= 100:
        raise ValidationError(f"jpeg quality {quality} outside [1, 100]")
    ok, buf = cv2.imencode(".jpg", img, [cv2.IMWRITE_JPEG_QUALITY, quality])
    if not ok:
        raise EnvironmentalError("JPEG encoder unavailable in this OpenCV build")
    out = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    return out, int(buf.size)


def resize_degrade(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize to exactly width x height (aspect distortion allowed)."""
    img = _check_raster(image)
    if width < 1 or height < 1:
        raise ValidationError(f"resize target {width}x{height} must be positive")
    if (img.shape[1], img.shape[0]) == (width, height):
        return img.copy()
    return cv2.resize(img, (width, height), interpolation=cv2.INTER_LINEAR)


def _jpeg_quality_for_qp(qp: int) -> int:
    # 0 -> 98, 51 -> 2; strictly monotone over the whole qp range
    return int(round(98 - qp * 96 / 51))


class MotionJpegCodec:
    """Built-in intra-only codec: per-frame JPEG inside a small container.

    Container layout: magic ``LQMJ``, u16 version, u32 frame count,
    u32 width, u32 height, u32 fps numerator, u32 fps denominator,
    u8 qp, then per frame a u32 size followed by the JPEG payload.
    """

    identity = f"loqi-mjpeg/1 ({JPEG_ENCODER_ID})"

    def encode(self, frames, qp: int, fps: Fraction) -> bytes:
        h, w = frames[0].shape[:2]
        quality = _jpeg_quality_for_qp(qp)
        parts = [_MJ_MAGIC,
                 struct.pack("<HIIIIIB", 1, len(frames), w, h,
                             fps.numerator, fps.denominator, qp)]
        for f in frames:
            ok, buf = cv2.imencode(".jpg", f, [cv2.IMWRITE_JPEG_QUALITY, quality])
            if not ok:
                raise EnvironmentalError("JPEG encoder unavailable in this OpenCV build")
            parts.append(struct.pack("<I", buf.size))
            parts.append(buf.tobytes())
        return b"".join(parts)

    def decode(self, data: bytes):
        if data[:4] != _MJ_MAGIC:
            raise FormatError("not a loqi-mjpeg container (bad magic)")
        _, count, w, h, _, _, _ = struct.unpack_from("<HIIIIIB", data, 4)
        off = 4 + struct.calcsize("<HIIIIIB")
        frames = []
        for _ in range(count):
            (size,) = struct.unpack_from("<I", data, off)
            off += 4
            frame = cv2.imdecode(np.frombuffer(data[off:off + size], np.uint8),
                                 cv2.IMREAD_COLOR)
            if frame is None or frame.shape[:2] != (h, w):
                raise FormatError("corrupt frame payload in loqi-mjpeg container")
            frames.append(frame)
            off += size
        return frames


class FfmpegH264Codec:
    """Constant-QP H.264 via an external ffmpeg subprocess.

    Frames are piped as raw BGR24 video; the encoded container is an
    mp4 with yuv420p pixel format and the encoder's default GOP. The
    command templates can be overridden for nonstandard encoders;
    placeholders: {exe} {w} {h} {fps} {qp} {input} {output}.
    """

    ENCODE_TEMPLATE = [
        "{exe}", "-y", "-f", "rawvideo", "-pix_fmt", "bgr24",
        "-s", "{w}x{h}", "-r", "{fps}", "-i", "{input}",
        "-c:v", "libx264", "-qp", "{qp}", "-pix_fmt", "yuv420p", "{output}",
    ]
    DECODE_TEMPLATE = [
        "{exe}", "-i", "{input}", "-f", "rawvideo", "-pix_fmt", "bgr24", "{output}",
    ]

    def __init__(self, executable: str | None = None,
                 encode_template=None, decode_template=None):
        self.executable = executable or os.environ.get("LOQI_FFMPEG") or shutil.which("ffmpeg")
        if not self.executable or not shutil.which(self.executable):
            raise EnvironmentalError(
                "no ffmpeg binary found; install ffmpeg and put it on PATH or "
                "point LOQI_FFMPEG at it, or use the built-in MotionJpegCodec")
        self.encode_template = encode_template or self.ENCODE_TEMPLATE
        self.decode_template = decode_template or self.DECODE_TEMPLATE
        self.identity = f"ffmpeg-h264/{self.version()}"

    def version(self) -> str:
        out = subprocess.run([self.executable, "-version"],
                             capture_output=True, text=True, check=False)
        first = (out.stdout or out.stderr).splitlines()
        return first[0].strip() if first else "unknown"

    def _run(self, template, **fields):
        cmd = [part.format(**fields) for part in template]
        proc = subprocess.run(cmd, capture_output=True)
        if proc.returncode != 0:
            raise EnvironmentalError(
                f"encoder exited with {proc.returncode}: "
                f"{proc.stderr.decode(errors='replace')[-500:]}")
        return proc

    def encode(self, frames, qp: int, fps: Fraction) -> bytes:
        import tempfile
        h, w = frames[0].shape[:2]
        with tempfile.TemporaryDirectory() as td:
            raw = Path(td) / "in.bgr"
            out = Path(td) / "out.mp4"
            raw.write_bytes(b"".join(np.ascontiguousarray(f).tobytes() for f in frames))
            self._run(self.encode_template, exe=self.executable, w=w, h=h,
                      fps=str(float(fps)), qp=qp, input=str(raw), output=str(out))
            return out.read_bytes()

    def decode(self, data: bytes):
        import tempfile
        with tempfile.TemporaryDirectory() as td:
            src = Path(td) / "in.mp4"
            dst = Path(td) / "out.bgr"
            src.write_bytes(data)
            self._run(self.decode_template, exe=self.executable, w=0, h=0,
                      fps="0", qp=0, input=str(src), output=str(dst))
            cap = cv2.VideoCapture(str(src))
            w = int(cap.get(cv2.CAP_PROP_FRAME_WIDTH))
            h = int(cap.get(cv2.CAP_PROP_FRAME_HEIGHT))
            cap.release()
            raw = np.fromfile(dst, dtype=np.uint8)
            return list(raw.reshape(-1, h, w, 3))


def default_video_codec():
    try:
        return FfmpegH264Codec()
    except EnvironmentalError:
        return MotionJpegCodec()


def video_quantize_roundtrip(frames, qp: int, fps=Fraction(30), codec=None):
    """Encode frames at constant QP, decode them back, and measure bitrate.

    Returns (decoded frames, BitrateRecord). Frame count and dimensions
    are preserved.
    """
    frames = [_check_raster(f) for f in frames]
    if not frames:
        raise ValidationError("need at least one frame")
    dims = {f.shape for f in frames}
    if len(dims) > 1:
        raise ValidationError(f"mixed frame dimensions: {sorted(dims)}")
    if not 0 <= qp <= 51:
        raise ValidationError(f"qp {qp} outside [0, 51]")
    fps = Fraction(fps)
    codec = codec or default_video_codec()
    data = codec.encode(frames, qp, fps)
    decoded = codec.decode(data)
    if len(decoded) != len(frames):
        raise EnvironmentalError(
            f"codec returned {len(decoded)} frames for {len(frames)} input frames")
    spec = DegradationSpec.videoqp(qp, getattr(codec, "identity", "unknown"))
    record = BitrateRecord.measure(spec, len(data), float(len(frames) / fps))
    return decoded, record


def degrade_manifest(manifest: DatasetManifest, spec: DegradationSpec,
                     out_dir, codec=None) -> DatasetManifest:
    """Produce the degraded counterpart of every record in a manifest.

    Record ids, poses, and ordering are preserved; only paths, the
    quality tag, and the degradation spec change. On any failure no
    partial manifest is produced.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    images = {}
    for r in manifest.records:
        img = cv2.imread(r.path, cv2.IMREAD_COLOR)
        if img is None:
            failures.append(r.id)
        else:
            images[r.id] = img
    if failures:
        raise ValidationError(f"unreadable source images: {', '.join(failures)}")

    outputs = {}
    encoder_id = JPEG_ENCODER_ID
    if spec.kind == "videoqp":
        codec = codec or default_video_codec()
        encoder_id = codec.identity
        frames = [images[r.id] for r in manifest.records]
        if frames:
            decoded, _ = video_quantize_roundtrip(frames, spec.qp, codec=codec)
            for r, frame in zip(manifest.records, decoded):
                outputs[r.id] = (frame, ".png")
    else:
        for r in manifest.records:
            if spec.kind == "jpeg":
                # store the encoded bytes directly; the file is the degradation
                ok, buf = cv2.imencode(".jpg", images[r.id],
                                       [cv2.IMWRITE_JPEG_QUALITY, spec.quality])
                if not ok:
                    raise EnvironmentalError("JPEG encoder unavailable")
                outputs[r.id] = (buf, ".jpg")
            else:
                outputs[r.id] = (resize_degrade(images[r.id], spec.width, spec.height), ".png")

    records = []
    for r in manifest.records:
        payload, ext = outputs[r.id]
        path = out_dir / f"{r.id}{ext}"
        if ext == ".jpg":
            path.write_bytes(payload.tobytes())
        else:
            cv2.imwrite(str(path), payload)
        records.append(ImageRecord(
            id=r.id, path=str(path), pose=r.pose, place_id=r.place_id,
            quality_tag="degraded", degradation=spec.format()))
    return DatasetManifest(
        name=f"{manifest.name}-{spec.format()}", split=manifest.split,
        records=tuple(records), gt_mode=manifest.gt_mode,
        gt_threshold=manifest.gt_threshold, encoder_id=encoder_id)
