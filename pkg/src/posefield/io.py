"""File formats: checkpoints, PPM images, float dumps and scene manifests."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .body import Pose
from .camera import Camera, Extrinsics, Intrinsics

CHECKPOINT_MAGIC = b"HMRF"
CHECKPOINT_VERSION = 1
DUMP_MAGIC = b"FDMP"


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def save_checkpoint(path, tensors: Dict[str, np.ndarray], iteration: int = 0, config: Optional[dict] = None) -> None:
    """Layout: magic, u32 version, u64 iteration, u32 + JSON config, u32 tensor
    count, then per tensor u16 + UTF-8 name, u8 rank, u32 extents and
    little-endian float32 data."""
    cfg = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQI", CHECKPOINT_VERSION, int(iteration), len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], int, dict]:
    """Returns (tensors, iteration, config)."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, iteration, n_cfg = struct.unpack_from("<IQI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + 16
    config = json.loads(buf[off:off + n_cfg].decode("utf-8"))
    off += n_cfg
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = data.astype(np.float32)
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return tensors, iteration, config


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------
def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6. Float input in [0, 1] is quantised to 8 bits."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())


def _ppm_tokens(buf: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """Returns a uint8 (H, W, 3) array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    (w, h, maxval), pos = _ppm_tokens(buf, 3)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    """PPM as float64 in [0, 1]."""
    return read_ppm(path).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# float dumps
# ---------------------------------------------------------------------------
def write_float_dump(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")
    header = DUMP_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_float_dump(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != DUMP_MAGIC:
        raise FormatError(f"{path}: not a float dump")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    return np.frombuffer(buf, dtype="<f4", offset=8 + 4 * rank).reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# scene manifests
# ---------------------------------------------------------------------------
@dataclass
class FrameRecord:
    index: int
    camera: int
    image: str
    pose: Pose
    estimated: bool = False


@dataclass
class SceneManifest:
    """One subject: skeleton file, cameras, frames and free-form header fields."""

    skeleton: str
    cameras: Dict[int, Camera]
    frames: List[FrameRecord]
    header: Dict[str, str] = field(default_factory=dict)
    root: Optional[Path] = None

    def frame(self, index: int, camera: int) -> FrameRecord:
        for f in self.frames:
            if f.index == index and f.camera == camera:
                return f
        raise KeyError(f"no frame {index} for camera {camera}")

    @property
    def frame_count(self) -> int:
        return len({f.index for f in self.frames})

    def path(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel


def _floats(values) -> str:
    return ",".join(f"{float(v):.17g}" for v in np.ravel(values))


def _parse_floats(s: str) -> np.ndarray:
    return np.array([float(v) for v in s.split(",")]) if s else np.zeros(0)


def format_manifest(m: SceneManifest) -> str:
    lines = ["# posefield scene manifest v1", f"skeleton = {m.skeleton}"]
    for k in sorted(m.header):
        lines.append(f"{k} = {m.header[k]}")
    for cid in sorted(m.cameras):
        c = m.cameras[cid]
        i = c.intr
        lines.append(f"camera id={cid} fx={i.fx!r} fy={i.fy!r} cx={i.cx!r} cy={i.cy!r} width={i.width} "
                     f"height={i.height} R={_floats(c.extr.R)} t={_floats(c.extr.t)}")
    for f in sorted(m.frames, key=lambda r: (r.index, r.camera)):
        lines.append(f"frame index={f.index} camera={f.camera} image={f.image} "
                     f"quat={_floats(f.pose.local_rotations)} root={_floats(f.pose.root_translation)} "
                     f"estimated={int(f.estimated)}")
    return "\n".join(lines) + "\n"


def write_manifest(path, m: SceneManifest) -> None:
    Path(path).write_text(format_manifest(m), encoding="utf-8")


def _record(parts: List[str], lineno: int, path) -> Dict[str, str]:
    out = {}
    for p in parts:
        if "=" not in p:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k] = v
    return out


def read_manifest(path, check_files: bool = True) -> SceneManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    skeleton, header, cameras, frames = None, {}, {}, []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head = line.split(None, 1)[0]
        if head == "camera":
            r = _record(line.split()[1:], lineno, path)
            intr = Intrinsics(float(r["fx"]), float(r["fy"]), float(r["cx"]), float(r["cy"]),
                              int(r["width"]), int(r["height"]))
            cameras[int(r["id"])] = Camera(intr, Extrinsics(_parse_floats(r["R"]).reshape(3, 3),
                                                            _parse_floats(r["t"])))
        elif head == "frame":
            r = _record(line.split()[1:], lineno, path)
            q = _parse_floats(r["quat"]).reshape(-1, 4)
            frames.append(FrameRecord(int(r["index"]), int(r["camera"]), r["image"],
                                      Pose(q, _parse_floats(r["root"])), bool(int(r.get("estimated", "0")))))
        elif "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            if k == "skeleton":
                skeleton = v
            else:
                header[k] = v
        else:
            raise FormatError(f"{path}:{lineno}: unrecognised line")
    if skeleton is None:
        raise FormatError(f"{path}: missing skeleton entry")
    keys = [(f.index, f.camera) for f in frames]
    if len(set(keys)) != len(keys):
        raise FormatError(f"{path}: duplicate frame records")
    for f in frames:
        if f.camera not in cameras:
            raise FormatError(f"{path}: frame {f.index} references unknown camera {f.camera}")
    m = SceneManifest(skeleton, cameras, frames, header, path.parent)
    if check_files:
        for rel in [skeleton] + [f.image for f in frames]:
            if not m.path(rel).exists():
                raise FileNotFoundError(f"{path}: referenced file missing: {m.path(rel)}")
    return m
