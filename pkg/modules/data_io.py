"""
Data I/O Module
Graymap images, FTNS tensor/checkpoint containers, normalisation, the
procedural paired-contrast phantom, LR construction and noise simulation
"""

import io
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple, Union

import numpy as np
from PIL import Image

from . import numerics as K
from .errors import DimensionError, FormatError, ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TENSOR_MAGIC = b"FTNS"
TENSOR_VERSION = 1
CHECKPOINT_VERSION = 2
MAX_RANK = 4


def _atomic_write(path: PathLike, data: bytes):
    """Write to a temporary file first, then rename over the destination"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = f"{path}.tmp"
    try:
        with open(temp_path, "wb") as f:
            f.write(data)
        os.replace(temp_path, path)
    except Exception:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


# --------------------------------------------------------------------------
# Normalisation
# --------------------------------------------------------------------------

class Normalized(NamedTuple):
    image: np.ndarray
    clamped: int  # number of input values outside [0, 1]


def normalize(raw) -> Normalized:
    """Map [0, 1] intensities to [-1, 1], clamping out-of-range input"""
    raw = np.asarray(raw, dtype=np.float64)
    clamped = int(np.count_nonzero((raw < 0.0) | (raw > 1.0)))
    if clamped:
        logger.warning(f"normalize: clamped {clamped} values outside [0, 1]")
    return Normalized(np.clip(raw, 0.0, 1.0) * 2.0 - 1.0, clamped)


def denormalize(img) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


# --------------------------------------------------------------------------
# Graymap images
# --------------------------------------------------------------------------

_WHITESPACE = b" \t\r\n"


def _read_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    while pos < len(data):
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif data[pos] in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", start)
    return data[start:pos], pos


def _read_int(data: bytes, pos: int, what: str) -> Tuple[int, int]:
    token, end = _read_token(data, pos)
    if not token.isdigit():
        raise ParseError(f"invalid {what} {token!r}", end - len(token))
    return int(token), end


def _check_pnm_header(data: bytes):
    """Validate the header and pixel payload length; Pillow decodes the pixels"""
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise ParseError("not a binary graymap/pixmap", 0)
    channels = 1 if data[:2] == b"P5" else 3
    width, pos = _read_int(data, 2, "width")
    height, pos = _read_int(data, pos, "height")
    maxval, pos = _read_int(data, pos, "maxval")
    if width < 1 or height < 1:
        raise ParseError(f"invalid dimensions {width}x{height}", pos)
    if not 0 < maxval < 65536:
        raise ParseError(f"invalid maxval {maxval}", pos)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ParseError("missing whitespace after header", pos)
    pos += 1
    needed = width * height * channels * (2 if maxval > 255 else 1)
    if len(data) - pos < needed:
        raise ParseError(f"truncated pixel data: need {needed} bytes, have {len(data) - pos}", len(data))


def decode_image(data: bytes) -> np.ndarray:
    """Decode binary P5 (gray) or P6 (colour, averaged) bytes to [1, H, W] in [-1, 1]"""
    _check_pnm_header(data)
    try:
        with Image.open(io.BytesIO(data), formats=["PPM"]) as image:
            image.load()
            # Pillow rescales other maxvals to 255, or to 65535 for 16-bit graymaps
            full_scale = 65535.0 if image.mode == "I" else 255.0
            pixels = np.asarray(image, dtype=np.float64)
    except (OSError, ValueError, SyntaxError) as e:
        raise ParseError(f"undecodable pixel data: {e}", 0) from e
    if pixels.ndim == 3:
        pixels = pixels.mean(axis=2)
    return normalize(pixels[None] / full_scale).image


def encode_image(img) -> bytes:
    """Encode [C, H, W] in [-1, 1] as an 8-bit P5 graymap (channels averaged)"""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise DimensionError(f"image must be [C, H, W], got {img.shape}")
    gray = np.clip(denormalize(img.mean(axis=0)), 0.0, 1.0)
    buffer = io.BytesIO()
    Image.fromarray(np.rint(gray * 255.0).astype(np.uint8)).save(buffer, format="PPM")
    return buffer.getvalue()


def load_image(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_image(f.read())


def save_image(img, path: PathLike):
    _atomic_write(path, encode_image(img))
    logger.debug(f"Image written: {path}")


# --------------------------------------------------------------------------
# FTNS tensor container
# --------------------------------------------------------------------------

def _encode_tensor_body(t) -> bytes:
    arr = np.asarray(t)
    if arr.ndim > MAX_RANK:
        raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    return struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape) + payload.tobytes()


def _decode_tensor_body(data: bytes, pos: int) -> Tuple[np.ndarray, int]:
    if pos >= len(data):
        raise ParseError("missing tensor rank", pos)
    rank = data[pos]
    pos += 1
    if rank > MAX_RANK:
        raise FormatError(f"tensor rank {rank} exceeds {MAX_RANK}")
    if len(data) < pos + 4 * rank:
        raise ParseError("truncated tensor extents", len(data))
    shape = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(data) < pos + 4 * count:
        raise ParseError(f"truncated tensor payload: need {4 * count} bytes", len(data))
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
    return arr, pos + 4 * count


def _check_header(data: bytes, version: int):
    if data[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(data) < 5:
        raise ParseError("missing version byte", len(data))
    if data[4] != version:
        raise FormatError(f"unsupported container version {data[4]} (expected {version})")


def encode_tensor(t) -> bytes:
    return TENSOR_MAGIC + bytes([TENSOR_VERSION]) + _encode_tensor_body(t)


def decode_tensor(data: bytes) -> np.ndarray:
    _check_header(data, TENSOR_VERSION)
    arr, pos = _decode_tensor_body(data, 5)
    if pos != len(data):
        raise ParseError("trailing bytes after tensor", pos)
    return arr


def save_tensor(t, path: PathLike):
    _atomic_write(path, encode_tensor(t))


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def encode_checkpoint(records: Dict[str, np.ndarray]) -> bytes:
    parts = [TENSOR_MAGIC, bytes([CHECKPOINT_VERSION]), struct.pack("<I", len(records))]
    for name, t in records.items():
        encoded = name.encode("utf-8")
        if not encoded:
            raise FormatError("checkpoint record with an empty name")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"record name too long: {name[:32]}...")
        parts.append(struct.pack("<H", len(encoded)) + encoded + _encode_tensor_body(t))
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    _check_header(data, CHECKPOINT_VERSION)
    if len(data) < 9:
        raise ParseError("missing record count", len(data))
    (count,) = struct.unpack_from("<I", data, 5)
    pos = 9
    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(data) < pos + 2:
            raise ParseError("truncated record name length", len(data))
        (length,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if length == 0:
            raise FormatError("checkpoint record with an empty name")
        if len(data) < pos + length:
            raise ParseError("truncated record name", len(data))
        try:
            name = data[pos:pos + length].decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"record name is not UTF-8: {e}", pos)
        pos += length
        if name in records:
            raise FormatError(f"duplicate record '{name}'")
        records[name], pos = _decode_tensor_body(data, pos)
    if pos != len(data):
        raise ParseError("trailing bytes after checkpoint", pos)
    return records


def save_checkpoint(records: Dict[str, np.ndarray], path: PathLike):
    _atomic_write(path, encode_checkpoint(records))
    logger.info(f"Checkpoint written: {path} ({len(records)} tensors)")


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        records = decode_checkpoint(f.read())
    logger.info(f"Checkpoint loaded: {path} ({len(records)} tensors)")
    return records


# --------------------------------------------------------------------------
# Noise simulation
# --------------------------------------------------------------------------

@dataclass
class NoiseSpec:
    """none | motion (length, angle in degrees) | rf (frequency in cycles/width, amplitude, row band)"""
    kind: str = "none"
    length: int = 0
    angle: float = 0.0
    frequency: int = 0
    amplitude: float = 0.0
    band: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.kind not in ("none", "motion", "rf"):
            raise ValueError(f"Unsupported noise kind: {self.kind}")
        if self.length < 0:
            raise ValueError(f"motion length must be >= 0, got {self.length}")
        if self.band is not None and not 0.0 <= self.band[0] < self.band[1] <= 1.0:
            raise ValueError(f"rf band must satisfy 0 <= lo < hi <= 1, got {self.band}")

    @classmethod
    def parse(cls, text: Optional[str]) -> "NoiseSpec":
        """Parse 'motion:length=5,angle=30' or 'rf:frequency=8,amplitude=0.1,band=0.25-0.75'"""
        if not text or text == "none":
            return cls()
        kind, _, rest = text.partition(":")
        fields = {}
        for item in filter(None, rest.split(",")):
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"noise parameter '{item}' is not key=value")
            key = key.strip()
            if key == "band":
                lo, _, hi = value.partition("-")
                fields["band"] = (float(lo), float(hi))
            elif key in ("length", "frequency"):
                fields[key] = int(value)
            elif key in ("angle", "amplitude"):
                fields[key] = float(value)
            else:
                raise ValueError(f"unknown noise parameter '{key}'")
        return cls(kind=kind.strip(), **fields)


def apply_noise(img, spec: Optional[NoiseSpec]) -> np.ndarray:
    """
    Simulate acquisition artefacts

    motion: average of `length` circular shifts along the blur direction
    rf: additive cosine stripes along x with an integer number of cycles,
        optionally confined to a band of rows
    """
    img = np.asarray(img, dtype=np.float64)
    if spec is None or spec.kind == "none":
        return img.copy()
    if img.ndim != 3:
        raise DimensionError(f"image must be [C, H, W], got {img.shape}")

    if spec.kind == "motion":
        if spec.length <= 1:
            return img.copy()
        theta = np.deg2rad(spec.angle)
        offsets = np.arange(spec.length) - (spec.length - 1) / 2.0
        out = np.zeros_like(img)
        for t in offsets:
            dy, dx = int(np.rint(t * np.sin(theta))), int(np.rint(t * np.cos(theta)))
            out += np.roll(img, (dy, dx), axis=(1, 2))
        return out / spec.length

    _, h, w = img.shape
    if spec.amplitude == 0.0:
        return img.copy()
    stripes = spec.amplitude * np.cos(2.0 * np.pi * spec.frequency * np.arange(w) / w)
    rows = np.ones(h)
    if spec.band is not None:
        y = (np.arange(h) + 0.5) / h
        rows = ((y >= spec.band[0]) & (y < spec.band[1])).astype(np.float64)
    return img + rows[None, :, None] * stripes[None, None, :]


# --------------------------------------------------------------------------
# Synthetic paired contrasts
# --------------------------------------------------------------------------

@dataclass
class SynthPairSpec:
    """
    Procedural two-contrast phantom

    t2_scale / pd_scale set how large the anatomy appears in each
    rendering (1.0 fills most of the field of view).
    """
    seed: int = 0
    size: int = 64
    t2_scale: float = 1.0
    pd_scale: float = 1.0
    texture_freq: float = 4.0
    clutter: float = 0.0
    noise: Optional[NoiseSpec] = None

    def __post_init__(self):
        if self.t2_scale <= 0 or self.pd_scale <= 0:
            raise ValueError("foreground scale factors must be > 0")
        if self.size < 4 or self.size % 4:
            raise ValueError(f"size must be a positive multiple of 4, got {self.size}")


class SynthPair(NamedTuple):
    t2: np.ndarray  # [1, H, W] in [-1, 1]
    pd: np.ndarray
    correspondence: np.ndarray  # [2, H, W] pd (row, col) for every t2 pixel
    foreground: np.ndarray  # [H, W] bool, t2 pixels inside the anatomy with an in-image correspondent


@dataclass
class _Anatomy:
    angle: float
    axes: Tuple[float, float]
    stripe_dir: Tuple[float, float]
    phase: float
    blobs: np.ndarray  # [n, 3] centre u, centre v, radius

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "_Anatomy":
        stripe = rng.uniform(0.0, np.pi)
        centres = rng.uniform(-0.35, 0.35, size=(3, 2))
        radii = rng.uniform(0.08, 0.16, size=(3, 1))
        return cls(
            angle=float(rng.uniform(0.0, np.pi)),
            axes=(float(rng.uniform(0.7, 0.85)), float(rng.uniform(0.5, 0.65))),
            stripe_dir=(float(np.cos(stripe)), float(np.sin(stripe))),
            phase=float(rng.uniform(0.0, 2.0 * np.pi)),
            blobs=np.hstack([centres, radii]),
        )

    def inside(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        ru, rv = c * u + s * v, -s * u + c * v
        return (ru / self.axes[0]) ** 2 + (rv / self.axes[1]) ** 2 <= 1.0

    def tissue(self, u: np.ndarray, v: np.ndarray, freq: float) -> np.ndarray:
        """Tissue parameter in [0, 1] inside the anatomy, 0 outside"""
        proj = u * self.stripe_dir[0] + v * self.stripe_dir[1]
        t = 0.55 + 0.25 * np.cos(2.0 * np.pi * freq * proj + self.phase)
        for bu, bv, r in self.blobs:
            t = np.where((u - bu) ** 2 + (v - bv) ** 2 <= r * r, 1.0, t)
        return np.where(self.inside(u, v), t, 0.0)


def _anatomy_coords(size: int, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    centre = (size - 1) / 2.0
    p = (np.arange(size) - centre) / (scale * size / 2.0)
    return np.meshgrid(p, p, indexing="ij")


def _clutter(rng: np.random.Generator, size: int, level: float) -> np.ndarray:
    if level <= 0:
        return np.zeros((size, size))
    coarse = rng.standard_normal((1, max(size // 8, 1), max(size // 8, 1)))
    return level * K.resize(coarse, size, size, "bicubic")[0]


def synth_pair(spec: SynthPairSpec) -> SynthPair:
    """
    Render one anatomy at two foreground scales with T2-like and PD-like contrast

    Returns:
        SynthPair with the exact pixel correspondence used for rendering
    """
    rng = np.random.default_rng(spec.seed)
    anatomy = _Anatomy.sample(rng)
    n = spec.size

    u_t, v_t = _anatomy_coords(n, spec.t2_scale)
    u_p, v_p = _anatomy_coords(n, spec.pd_scale)
    tissue_t2 = anatomy.tissue(u_t, v_t, spec.texture_freq)
    tissue_pd = anatomy.tissue(u_p, v_p, spec.texture_freq)

    # T2: fluid-like blobs bright; PD: flatter, inverted tissue curve
    t2 = np.where(anatomy.inside(u_t, v_t), 0.15 + 0.8 * tissue_t2 ** 1.5, 0.0)
    pd = np.where(anatomy.inside(u_p, v_p), 0.9 - 0.5 * tissue_pd, 0.0)
    t2 = t2 + _clutter(rng, n, spec.clutter)
    pd = pd + _clutter(rng, n, spec.clutter)

    centre = (n - 1) / 2.0
    ratio = spec.pd_scale / spec.t2_scale
    rows = np.rint(centre + (np.arange(n) - centre) * ratio).astype(np.int64)
    corr = np.stack(np.meshgrid(rows, rows, indexing="ij"))
    in_image = (corr >= 0) & (corr < n)
    foreground = anatomy.inside(u_t, v_t) & in_image[0] & in_image[1]

    t2_img = normalize(np.clip(t2, 0.0, 1.0)[None]).image
    pd_img = normalize(np.clip(pd, 0.0, 1.0)[None]).image
    if spec.noise is not None:
        t2_img = apply_noise(t2_img, spec.noise)
        pd_img = apply_noise(pd_img, spec.noise)
    return SynthPair(t2_img, pd_img, np.clip(corr, 0, n - 1), foreground)


def make_lr(hr, factor: int = 4) -> np.ndarray:
    """Bicubic downsample by an integer factor"""
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim != 3 or hr.shape[1] % factor or hr.shape[2] % factor:
        raise DimensionError(f"image {hr.shape} is not divisible by {factor}")
    return K.resize(hr, hr.shape[1] // factor, hr.shape[2] // factor, "bicubic")
