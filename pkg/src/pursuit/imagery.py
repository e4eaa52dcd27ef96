"""Grayscale textures: PGM I/O, synthetic texture generation, subpixel window sampling.

Images are immutable value objects. All sampling is toroidal (coordinates wrap),
so every window is fully defined regardless of position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "GrayImage",
    "FoveaFrame",
    "FramePair",
    "PgmParseError",
    "load_pgm",
    "save_pgm",
    "synth_texture",
    "normalize_texture",
    "sample_window",
]


class PgmParseError(ValueError):
    """Malformed PGM data. `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class GrayImage:
    """A real-valued luminance grid, row-major, immutable after construction."""

    width: int
    height: int
    pixels: np.ndarray  # shape (height, width), float64

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and np.array_equal(self.pixels, other.pixels))

    def __post_init__(self):
        px = _readonly(self.pixels)
        if px.shape != (self.height, self.width):
            raise ValueError(
                f"pixel grid {px.shape} does not match ({self.height}, {self.width})"
            )
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite luminance values")
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "GrayImage":
        pixels = np.asarray(pixels, dtype=np.float64)
        h, w = pixels.shape
        return cls(width=w, height=h, pixels=pixels)


@dataclass(frozen=True, eq=False)
class FoveaFrame:
    """One foveal luminance grid (default 55x55) at an integer time step."""

    values: np.ndarray
    frame_index: int

    def __eq__(self, other):
        if not isinstance(other, FoveaFrame):
            return NotImplemented
        return (self.frame_index == other.frame_index
                and np.array_equal(self.values, other.values))

    def __post_init__(self):
        v = _readonly(self.values)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"fovea frame must be square, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("fovea frame contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class FramePair:
    """Two consecutive foveal frames; `current` follows `previous` by one step."""

    previous: FoveaFrame
    current: FoveaFrame

    def __post_init__(self):
        if self.current.frame_index != self.previous.frame_index + 1:
            raise ValueError(
                f"frames not consecutive: {self.previous.frame_index} -> "
                f"{self.current.frame_index}"
            )
        if self.current.size != self.previous.size:
            raise ValueError("frame sizes differ within a pair")


# ---------------------------------------------------------------------------
# PGM reader / writer
# ---------------------------------------------------------------------------

_WHITESPACE = b" \t\n\r\x0b\x0c"


def _next_token(data: bytes, pos: int) -> tuple[bytes, int, int]:
    """Return (token, token_start, next_pos), skipping whitespace and # comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c in (b"#",):
            eol = data.find(b"\n", pos)
            pos = n if eol < 0 else eol + 1
        elif c in _WHITESPACE:
            pos += 1
        else:
            break
    if pos >= n:
        raise PgmParseError("unexpected end of header", n)
    start = pos
    while pos < n and data[pos : pos + 1] not in _WHITESPACE and data[pos : pos + 1] != b"#":
        pos += 1
    return data[start:pos], start, pos


def _int_token(data: bytes, pos: int, what: str) -> tuple[int, int, int]:
    tok, start, pos = _next_token(data, pos)
    try:
        return int(tok), start, pos
    except ValueError:
        raise PgmParseError(f"invalid {what} {tok!r}", start) from None


def load_pgm(data: bytes) -> GrayImage:
    """Decode a binary (P5) or ASCII (P2) PGM into luminance scaled to [0, 1].

    Both 8-bit and 16-bit (big-endian) binary payloads are accepted.
    """
    if len(data) < 2:
        raise PgmParseError("not a PGM: missing magic", 0)
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise PgmParseError(f"unsupported magic {magic!r}", 0)
    pos = 2
    width, off_w, pos = _int_token(data, pos, "width")
    height, off_h, pos = _int_token(data, pos, "height")
    if width <= 0:
        raise PgmParseError(f"non-positive width {width}", off_w)
    if height <= 0:
        raise PgmParseError(f"non-positive height {height}", off_h)
    maxval, off_m, pos = _int_token(data, pos, "max value")
    if not 0 < maxval < 65536:
        raise PgmParseError(f"unsupported max value {maxval}", off_m)

    count = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates the header from the payload
        if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
            raise PgmParseError("missing whitespace before binary payload", pos)
        pos += 1
        bytes_per = 1 if maxval < 256 else 2
        need = count * bytes_per
        have = len(data) - pos
        if have < need:
            raise PgmParseError(
                f"truncated payload: expected {need} bytes, got {have}", pos + have
            )
        raw = np.frombuffer(data, dtype=">u2" if bytes_per == 2 else np.uint8,
                            count=count, offset=pos)
        values = raw.astype(np.float64)
    else:
        values = np.empty(count, dtype=np.float64)
        for i in range(count):
            try:
                sample, start, pos = _int_token(data, pos, "sample")
            except PgmParseError:
                raise PgmParseError(
                    f"truncated payload: expected {count} samples, got {i}", len(data)
                ) from None
            if not 0 <= sample <= maxval:
                raise PgmParseError(f"sample {sample} exceeds max value {maxval}", start)
            values[i] = sample
    return GrayImage(width=width, height=height,
                     pixels=(values / maxval).reshape(height, width))


def save_pgm(image: GrayImage) -> bytes:
    """Encode as 8-bit binary PGM (P5). Values are clipped to [0, 1] first."""
    quant = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + quant.tobytes()


# ---------------------------------------------------------------------------
# Synthetic textures
# ---------------------------------------------------------------------------


def synth_texture(seed: int, width: int = 256, height: int = 256) -> GrayImage:
    """Deterministic synthetic texture with roughly 1/f spatial amplitude spectrum.

    Built as occluding disks with a power-law size distribution (which yields
    both the 1/f statistics and the sparse edge structure of natural scenes),
    then lightly blurred with a wrap-around kernel so toroidal sampling stays
    seamless.
    """
    if width < 55 or height < 55:
        raise ValueError(f"texture must be at least 55x55, got {width}x{height}")
    rng = np.random.default_rng(seed)
    img = np.full((height, width), 0.5, dtype=np.float64)
    r_min, r_max = 1.5, min(width, height) / 4.0
    # r ~ p(r) proportional to r^-3 on [r_min, r_max], inverse-CDF sampled;
    # this size law plus the final blur lands the amplitude slope near -1
    mean_r2 = 2.0 * r_min**2 * np.log(r_max / r_min)
    n_disks = int(5.0 * width * height / (np.pi * mean_r2))
    u = rng.uniform(size=n_disks)
    radii = r_min / np.sqrt(1.0 - u * (1.0 - (r_min / r_max) ** 2))
    cx = rng.uniform(0.0, width, size=n_disks)
    cy = rng.uniform(0.0, height, size=n_disks)
    shade = rng.uniform(size=n_disks)
    for i in range(n_disks):
        r = radii[i]
        # paint inside a bounding box, wrapping indices toroidally
        xi = np.arange(int(np.floor(cx[i] - r)), int(np.ceil(cx[i] + r)) + 1)
        yi = np.arange(int(np.floor(cy[i] - r)), int(np.ceil(cy[i] + r)) + 1)
        inside = ((xi - cx[i]) ** 2)[None, :] + ((yi - cy[i]) ** 2)[:, None] <= r * r
        box = np.ix_(yi % height, xi % width)
        img[box] = np.where(inside, shade[i], img[box])
    img = gaussian_filter(img, sigma=0.7, mode="wrap")
    return GrayImage.from_array(img)


def normalize_texture(image: GrayImage) -> GrayImage:
    """Rescale to zero mean, unit variance (constant images map to all zeros)."""
    px = image.pixels
    centered = px - px.mean()
    std = centered.std()
    if std < 1e-12:
        return GrayImage.from_array(np.zeros_like(px))
    return GrayImage.from_array(centered / std)


# ---------------------------------------------------------------------------
# Window sampling
# ---------------------------------------------------------------------------


def sample_window(
    image: GrayImage,
    center_x: float,
    center_y: float,
    frame_index: int = 0,
    size: int = 55,
) -> FoveaFrame:
    """Sample a size x size window centered at real-valued coordinates.

    Bilinear interpolation at fractional coordinates, toroidal wrap at the
    borders. Exact pixel copies at integer offsets.
    """
    offs = np.arange(size, dtype=np.float64) - size // 2
    xs = center_x + offs
    ys = center_y + offs
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    w, h = image.width, image.height
    x0i = x0.astype(np.int64) % w
    x1i = (x0i + 1) % w
    y0i = y0.astype(np.int64) % h
    y1i = (y0i + 1) % h
    px = image.pixels
    top = px[np.ix_(y0i, x0i)] * (1.0 - fx) + px[np.ix_(y0i, x1i)] * fx
    bot = px[np.ix_(y1i, x0i)] * (1.0 - fx) + px[np.ix_(y1i, x1i)] * fx
    values = top * (1.0 - fy)[:, None] + bot * fy[:, None]
    return FoveaFrame(values=values, frame_index=frame_index)
