"""Dot annotations, Gaussian density maps, and the on-disk formats.

A scene's ground truth is a list of object-center coordinates (a dot map).
Rendering convolves the dots with an isotropic Gaussian kernel so the
resulting grid integrates to the object count; that grid conditions the
generative model and serves as the counting target.

File formats (consumed by every other module):
  - dot annotation: UTF-8 text, line 1 "W,H", then one "x,y" pair per line.
  - density map:    magic "DMAP1", u32-LE width, u32-LE height,
                    H*W float32-LE values, row-major, top-left origin.
  - image:          8-bit grayscale PGM (P5), byte b <-> value 2*(b/255) - 1.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, FormatError, ParseError

DEFAULT_KERNEL_VARIANCE = 4.0

# Kernel samples are rounded to this binary grid so that superposing dots is
# exact in float64 regardless of accumulation order (sums of a few thousand
# quantized kernel values never exceed 53 significant bits).
_QUANTUM = 2.0 ** -20

_DMAP_MAGIC = b"DMAP1"
_MAX_DIM = 1 << 20


@dataclass(frozen=True)
class DotMap:
    """Object-center annotations for one scene."""

    points: tuple[tuple[float, float], ...]
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise BoundsError(f"scene dimensions must be positive, got {self.width}x{self.height}")
        for x, y in self.points:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise BoundsError(
                    f"point ({x}, {y}) outside scene {self.width}x{self.height}"
                )

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    """Non-negative grid whose integral approximates the object count."""

    values: np.ndarray
    kernel_variance: float = field(default=DEFAULT_KERNEL_VARIANCE, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise FormatError(f"density map must be 2-D, got shape {self.values.shape}")
        if self.kernel_variance <= 0:
            raise FormatError(f"kernel_variance must be positive, got {self.kernel_variance}")
        if self.values.size and float(self.values.min()) < 0:
            raise FormatError("density map entries must be non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def parse_dots(text: str) -> DotMap:
    """Parse annotation text: "W,H" header then one "x,y" line per dot."""
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise ParseError(1, "missing 'width,height' header")
    width, height = _parse_pair(lines[0], 1)
    if width != int(width) or height != int(height) or width <= 0 or height <= 0:
        raise ParseError(1, f"dimensions must be positive integers, got '{lines[0].strip()}'")
    points = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue  # tolerate the trailing LF and blank lines
        x, y = _parse_pair(line, i)
        if not (0 <= x < width and 0 <= y < height):
            raise BoundsError(f"line {i}: point ({x}, {y}) outside scene {int(width)}x{int(height)}")
        points.append((x, y))
    return DotMap(points=tuple(points), width=int(width), height=int(height))


def _parse_pair(line: str, line_no: int) -> tuple[float, float]:
    parts = line.strip().split(",")
    if len(parts) != 2:
        raise ParseError(line_no, f"expected 'x,y', got '{line.strip()}'")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise ParseError(line_no, f"non-numeric coordinate in '{line.strip()}'") from None


def write_dots(dots: DotMap) -> str:
    lines = [f"{dots.width},{dots.height}"]
    lines += [_fmt_coord(x) + "," + _fmt_coord(y) for x, y in dots.points]
    return "\n".join(lines) + "\n"


def _fmt_coord(v: float) -> str:
    # repr round-trips floats exactly; trim a trailing ".0" for integers
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def render_density(dots: DotMap, kernel_variance: float = DEFAULT_KERNEL_VARIANCE) -> DensityMap:
    """Superpose one isotropic Gaussian per dot, sampled at pixel centers.

    Pixel (col, row) samples the continuous density at integer coordinates
    (col, row).  Each kernel is truncated to the square window of half-width
    ceil(3*sqrt(kernel_variance)) around its dot and is NOT renormalized
    afterwards, so the per-dot mass is slightly below 1; windows are clipped
    at the image border, which is why the mass invariant only covers
    interior dots.
    """
    if kernel_variance <= 0:
        raise FormatError(f"kernel_variance must be positive, got {kernel_variance}")
    grid = np.zeros((dots.height, dots.width), dtype=np.float64)
    sigma = math.sqrt(kernel_variance)
    radius = math.ceil(3.0 * sigma)
    norm = 1.0 / (2.0 * math.pi * kernel_variance)
    for dx, dy in dots.points:
        x_lo = max(math.ceil(dx - radius), 0)
        x_hi = min(math.floor(dx + radius), dots.width - 1)
        y_lo = max(math.ceil(dy - radius), 0)
        y_hi = min(math.floor(dy + radius), dots.height - 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        xs = np.arange(x_lo, x_hi + 1, dtype=np.float64) - dx
        ys = np.arange(y_lo, y_hi + 1, dtype=np.float64) - dy
        gx = np.exp(-(xs * xs) / (2.0 * kernel_variance))
        gy = np.exp(-(ys * ys) / (2.0 * kernel_variance))
        kernel = norm * np.outer(gy, gx)
        np.round(kernel / _QUANTUM, out=kernel)
        kernel *= _QUANTUM
        grid[y_lo : y_hi + 1, x_lo : x_hi + 1] += kernel
    return DensityMap(values=grid, kernel_variance=kernel_variance)


def total_count(dmap: DensityMap) -> float:
    return float(dmap.values.sum(dtype=np.float64))


def write_density(dmap: DensityMap) -> bytes:
    """Serialize to the DMAP1 format (values stored as float32-LE)."""
    h, w = dmap.values.shape
    if h > _MAX_DIM or w > _MAX_DIM:
        raise FormatError(f"dimensions {w}x{h} exceed the format limit {_MAX_DIM}")
    header = _DMAP_MAGIC + struct.pack("<II", w, h)
    body = dmap.values.astype("<f4").tobytes(order="C")
    return header + body


def read_density(payload: bytes) -> DensityMap:
    """Parse a DMAP1 payload.

    The format carries no kernel bandwidth, so the returned map gets the
    default kernel_variance; the field is metadata and never compared.
    """
    if len(payload) < len(_DMAP_MAGIC) + 8:
        raise FormatError(f"payload too short ({len(payload)} bytes)")
    if payload[: len(_DMAP_MAGIC)] != _DMAP_MAGIC:
        raise FormatError(f"bad magic {payload[:5]!r}")
    w, h = struct.unpack_from("<II", payload, len(_DMAP_MAGIC))
    if w == 0 or h == 0 or w > _MAX_DIM or h > _MAX_DIM:
        raise FormatError(f"dimensions {w}x{h} out of range")
    expected = len(_DMAP_MAGIC) + 8 + 4 * w * h
    if len(payload) != expected:
        raise FormatError(f"expected {expected} bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4", offset=len(_DMAP_MAGIC) + 8).reshape(h, w)
    return DensityMap(values=values.astype(np.float64))


def write_pgm(img: np.ndarray) -> bytes:
    """Encode an image in [-1, 1] as binary PGM (P5, maxval 255)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError(f"image must be 2-D, got shape {img.shape}")
    h, w = img.shape
    bytes_ = np.clip(np.rint((img + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + bytes_.tobytes(order="C")


def read_pgm(payload: bytes) -> np.ndarray:
    """Decode a binary PGM into a float32 image in [-1, 1]."""
    if not payload.startswith(b"P5"):
        raise FormatError(f"bad magic {payload[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(payload) and payload[pos : pos + 1].isspace():
            pos += 1
        if pos < len(payload) and payload[pos : pos + 1] == b"#":  # comment line
            pos = payload.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(payload) and not payload[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        try:
            fields.append(int(payload[start:pos]))
        except ValueError:
            raise FormatError(f"non-numeric PGM header field {payload[start:pos]!r}") from None
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    if len(payload) - pos != w * h:
        raise FormatError(f"expected {w * h} pixel bytes, got {len(payload) - pos}")
    raw = np.frombuffer(payload, dtype=np.uint8, offset=pos).reshape(h, w)
    return (raw.astype(np.float32) / 255.0) * 2.0 - 1.0
