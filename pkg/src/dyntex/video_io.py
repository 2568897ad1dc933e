"""Frame-sequence and weight-file I/O plus synthetic exemplar generators.

Frames are binary PPM (P6, maxval 255) named ``frame_0000.ppm`` upward so
round trips are bit-exact on 8-bit-representable values. Weight files use
a small tagged binary format (magic "DTSW") storing float32 tensors
little-endian; values widen to float64 on load.
"""

import re
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeMismatchError, VideoFormatError, WeightFileError
from .networks import WeightStore

PPM_MAXVAL = 255
WEIGHT_MAGIC = b"DTSW"
WEIGHT_VERSION = 1

EXEMPLAR_KINDS = ("drifting-grating", "translating-checkerboard",
                  "flag-boundary", "period2-flicker")

_FRAME_RE = re.compile(r"^frame_(\d{4,})\.ppm$")


# ---------------------------------------------------------------------------
# PPM frame sequences


def frame_to_bytes(frame):
    """Quantize one (H, W, 3) float frame to PPM bytes."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ShapeMismatchError("frame must be (height, width, 3)",
                                 dimension="shape", expected="(H, W, 3)",
                                 actual=frame.shape)
    h, w = frame.shape[:2]
    data = np.rint(np.clip(frame, 0.0, 1.0) * PPM_MAXVAL).astype(np.uint8)
    header = f"P6\n{w} {h}\n{PPM_MAXVAL}\n".encode("ascii")
    return header + data.tobytes()


def write_ppm(path, frame):
    Path(path).write_bytes(frame_to_bytes(frame))


class _PpmParser:
    def __init__(self, data, name):
        self.data = data
        self.pos = 0
        self.name = name

    def fail(self, why):
        raise VideoFormatError(f"{self.name}: {why}")

    def _skip_separators(self):
        n = len(self.data)
        while self.pos < n:
            c = self.data[self.pos]
            if c in b" \t\r\n\x0b\x0c":
                self.pos += 1
            elif c == ord("#"):
                while self.pos < n and self.data[self.pos] not in b"\r\n":
                    self.pos += 1
            else:
                return

    def read_int(self, what):
        self._skip_separators()
        start = self.pos
        n = len(self.data)
        while self.pos < n and ord("0") <= self.data[self.pos] <= ord("9"):
            self.pos += 1
        if self.pos == start:
            self.fail(f"expected integer for {what}")
        return int(self.data[start:self.pos])


def parse_ppm(data, name="<ppm>"):
    """Decode P6 bytes to a (H, W, 3) float64 array in [0, 1]."""
    p = _PpmParser(data, name)
    if not data.startswith(b"P6"):
        p.fail("not a binary PPM (missing P6 magic)")
    p.pos = 2
    width = p.read_int("width")
    height = p.read_int("height")
    maxval = p.read_int("maxval")
    if width < 1 or height < 1:
        p.fail(f"invalid extents {width}x{height}")
    if maxval != PPM_MAXVAL:
        p.fail(f"unsupported maxval {maxval} (need {PPM_MAXVAL})")
    if p.pos >= len(data) or data[p.pos] not in b" \t\r\n\x0b\x0c":
        p.fail("missing whitespace after maxval")
    p.pos += 1
    expected = width * height * 3
    payload = data[p.pos:]
    if len(payload) < expected:
        p.fail(f"truncated pixel data ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        p.fail(f"{len(payload) - expected} trailing bytes after pixel data")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / PPM_MAXVAL


def read_ppm(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise VideoFormatError(f"{path}: cannot read ({err})") from err
    return parse_ppm(data, name=str(path))


def write_frames(video, directory):
    """Write a video as frame_0000.ppm, frame_0001.ppm, ..."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise ShapeMismatchError("video must be (frames, height, width, 3)",
                                 dimension="shape", expected="(F, H, W, 3)",
                                 actual=video.shape)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video):
        write_ppm(directory / f"frame_{i:04d}.ppm", frame)


def read_frames(directory):
    """Read a frame_NNNN.ppm sequence back into a (F, H, W, 3) array."""
    directory = Path(directory)
    if not directory.is_dir():
        raise VideoFormatError(f"{directory}: not a directory")
    indices = {}
    for entry in directory.iterdir():
        match = _FRAME_RE.match(entry.name)
        if match:
            indices[int(match.group(1))] = entry
    if not indices:
        raise VideoFormatError(f"{directory}: no frame_NNNN.ppm files found")
    count = max(indices) + 1
    missing = sorted(set(range(count)) - set(indices))
    if missing:
        raise VideoFormatError(
            f"{directory}: missing frame indices {missing[:8]}")
    frames = []
    for i in range(count):
        frames.append(read_ppm(indices[i]))
        if frames[-1].shape != frames[0].shape:
            raise VideoFormatError(
                f"{indices[i]}: geometry {frames[-1].shape[:2]} differs from "
                f"frame 0 geometry {frames[0].shape[:2]}")
    return np.stack(frames)


# ---------------------------------------------------------------------------
# Weight files


def write_weight_file(path, store):
    """Serialize a WeightStore (or name->array mapping) to a DTSW file."""
    tensors = store.tensors if isinstance(store, WeightStore) else dict(store)
    buf = bytearray()
    buf += WEIGHT_MAGIC
    buf += struct.pack("<II", WEIGHT_VERSION, len(tensors))
    for name, arr in tensors.items():
        nameb = name.encode("utf-8")
        if len(nameb) > 0xFFFF:
            raise WeightFileError(f"entry name too long ({len(nameb)} bytes)")
        arr = np.ascontiguousarray(arr)
        if arr.ndim > 0xFF:
            raise WeightFileError(f"{name}: rank {arr.ndim} exceeds format limit")
        buf += struct.pack("<H", len(nameb))
        buf += nameb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data, name):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise WeightFileError(
                f"{self.name}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def read_weight_file(path):
    """Read a DTSW file; tensors come back as float64."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise WeightFileError(f"{path}: cannot read ({err})") from err
    r = _Reader(data, str(path))
    if r.take(4, "magic") != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic (not a DTSW weight file)")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(name_len, "name").decode("utf-8")
        if name in tensors:
            raise WeightFileError(f"{path}: duplicate entry name {name!r}")
        (rank,) = struct.unpack("<B", r.take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents"))
        if any(e < 1 for e in shape):
            raise WeightFileError(f"{path}: {name!r} has a zero extent")
        elems = 1
        for e in shape:
            elems *= e
        raw = r.take(4 * elems, f"data of {name!r}")
        values = np.frombuffer(raw, dtype="<f4").reshape(shape)
        tensors[name] = values.astype(np.float64)
    if r.pos != len(data):
        raise WeightFileError(
            f"{path}: {len(data) - r.pos} trailing bytes after last entry")
    return WeightStore(tensors, provenance="loaded")


# ---------------------------------------------------------------------------
# Synthetic exemplars


def _check_exemplar_args(kind, size, frames):
    if kind not in EXEMPLAR_KINDS:
        raise ConfigError(
            f"unknown exemplar kind {kind!r}; choose from {EXEMPLAR_KINDS}",
            key="kind")
    if size < 16:
        raise ConfigError(f"size must be >= 16, got {size}", key="size")
    if frames < 2:
        raise ConfigError(f"frames must be >= 2, got {frames}", key="frames")


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y, x


def _drifting_grating(size, frames, rng):
    theta = rng.uniform(0.0, np.pi)
    cycles = rng.uniform(2.0, 5.0)
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    dphase = rng.uniform(0.3, 1.2)
    gains = rng.uniform(0.6, 1.0, size=3)
    y, x = _grid(size)
    u = 2.0 * np.pi * cycles * (x * np.cos(theta) + y * np.sin(theta)) / size
    out = np.empty((frames, size, size, 3))
    for t in range(frames):
        wave = np.sin(u + phase0 + t * dphase)
        out[t] = 0.5 + 0.45 * wave[:, :, None] * gains
    return out


def _translating_checkerboard(size, frames, rng):
    cell = int(rng.integers(4, 9))
    vx = int(rng.integers(1, 3))
    vy = int(rng.integers(0, 2))
    c1 = rng.uniform(0.05, 0.45, size=3)
    c2 = rng.uniform(0.55, 0.95, size=3)
    y, x = _grid(size)
    board = ((x // cell + y // cell) % 2).astype(bool)
    frame0 = np.where(board[:, :, None], c1, c2)
    out = np.empty((frames, size, size, 3))
    for t in range(frames):
        out[t] = np.roll(frame0, shift=(t * vy, t * vx), axis=(0, 1))
    return out


def _flag_boundary(size, frames, rng):
    c1 = rng.uniform(0.05, 0.45, size=3)
    c2 = rng.uniform(0.55, 0.95, size=3)
    amp = size / 6.0
    y = np.arange(size, dtype=np.float64)
    x = np.arange(size, dtype=np.float64)
    out = np.empty((frames, size, size, 3))
    for t in range(frames):
        boundary = size / 2.0 + amp * np.sin(2.0 * np.pi * (y / size + t / frames))
        left = x[None, :] < boundary[:, None]
        out[t] = np.where(left[:, :, None], c1, c2)
    return out


def _smooth_field(size, rng):
    y, x = _grid(size)
    field = np.zeros((size, size, 3))
    for _ in range(3):
        fx = int(rng.integers(1, 5))
        fy = int(rng.integers(1, 5))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        gains = rng.uniform(0.3, 1.0, size=3)
        wave = np.sin(2.0 * np.pi * (fx * x + fy * y) / size + phase)
        field += wave[:, :, None] * gains
    peak = np.max(np.abs(field))
    return 0.5 + 0.4 * field / peak


def _period2_flicker(size, frames, rng):
    a = _smooth_field(size, rng)
    b = _smooth_field(size, rng)
    out = np.empty((frames, size, size, 3))
    out[0::2] = a
    out[1::2] = b
    return out


_GENERATORS = {
    "drifting-grating": _drifting_grating,
    "translating-checkerboard": _translating_checkerboard,
    "flag-boundary": _flag_boundary,
    "period2-flicker": _period2_flicker,
}


def make_exemplar(kind, size, frames, seed=0):
    """Deterministic synthetic exemplar video of the requested kind.

    Kinds: drifting-grating (sinusoid advancing by a fixed phase per
    frame), translating-checkerboard (cyclic integer shift per frame),
    flag-boundary (two flat colors split by a waving boundary), and
    period2-flicker (two fixed frames alternating).
    """
    _check_exemplar_args(kind, size, frames)
    rng = np.random.default_rng(int(seed) & (2**64 - 1))
    video = _GENERATORS[kind](size, frames, rng)
    return np.clip(video, 0.0, 1.0)
