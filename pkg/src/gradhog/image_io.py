"""Bit-exact file I/O: 8-bit PNG / PGM / PPM images and GHOG descriptor files.

Images live in memory as float64 arrays in [0, 1]; files store 8-bit
samples. The PNG codec is self-contained (zlib streams, all five scanline
filters on read, filter 0 on write) and deliberately rejects anything but
8-bit non-interlaced grayscale or RGB. All writes go through a temp file
and an atomic rename so readers never observe partial output.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

from .hog import GRAY_WEIGHTS, HogConfig, HogDescriptor

__all__ = [
    "Image",
    "FormatError",
    "load_image",
    "save_image",
    "write_descriptor",
    "read_descriptor",
]


class FormatError(ValueError):
    """Raised for malformed or unsupported image/descriptor files."""


_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_HOG_MAGIC = b"GHOG"
_HOG_VERSION = 1
_HOG_HEADER = struct.Struct("<6I")  # version, mode, cell, grid_h, grid_w, bins


@dataclass
class Image:
    """An intensity image: (h, w) or (h, w, 3) float64 values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3 and self.data.shape[2] == 1:
            self.data = self.data[:, :, 0]
        if self.data.ndim not in (2, 3) or (self.data.ndim == 3 and self.data.shape[2] != 3):
            raise ValueError(f"image shape must be (h, w) or (h, w, 3), got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"image extents must be >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("image contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    def to_gray(self) -> "Image":
        """Collapse to single channel with the standard luma weights."""
        if self.channels == 1:
            return self
        r, g, b = self.data[:, :, 0], self.data[:, :, 1], self.data[:, :, 2]
        return Image(GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b)

    def quantized(self) -> np.ndarray:
        """8-bit samples: round(v * 255) after clamping to [0, 1]."""
        return np.rint(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# atomic writes

def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".gradhog-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------------
# PNG

def _png_chunk(tag: bytes, data: bytes) -> bytes:
    return (struct.pack(">I", len(data)) + tag + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF))


def _encode_png(img: Image) -> bytes:
    samples = img.quantized()
    if samples.ndim == 2:
        samples = samples[:, :, None]
    h, w, ch = samples.shape
    color_type = 0 if ch == 1 else 2
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    # filter byte 0 in front of every scanline
    raster = np.empty((h, 1 + w * ch), dtype=np.uint8)
    raster[:, 0] = 0
    raster[:, 1:] = samples.reshape(h, w * ch)
    idat = zlib.compress(raster.tobytes(), 6)
    return (_PNG_SIGNATURE + _png_chunk(b"IHDR", ihdr)
            + _png_chunk(b"IDAT", idat) + _png_chunk(b"IEND", b""))


def _iter_png_chunks(blob: bytes):
    pos = len(_PNG_SIGNATURE)
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise FormatError("PNG: truncated chunk header")
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        tag = blob[pos + 4:pos + 8]
        end = pos + 8 + length
        if end + 4 > len(blob):
            raise FormatError(f"PNG: truncated {tag!r} chunk")
        data = blob[pos + 8:end]
        (crc,) = struct.unpack(">I", blob[end:end + 4])
        if crc != zlib.crc32(tag + data) & 0xFFFFFFFF:
            raise FormatError(f"PNG: CRC mismatch in {tag!r} chunk")
        yield tag, data
        pos = end + 4


def _paeth(a, b, c):
    p = int(a) + int(b) - int(c)
    pa, pb, pc = abs(p - int(a)), abs(p - int(b)), abs(p - int(c))
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(raw: np.ndarray, h: int, stride: int, bpp: int) -> np.ndarray:
    rows = raw.reshape(h, 1 + stride)
    out = np.zeros((h, stride), dtype=np.uint8)
    for y in range(h):
        ftype = int(rows[y, 0])
        line = rows[y, 1:].astype(np.int32)
        prev = out[y - 1].astype(np.int32) if y > 0 else np.zeros(stride, dtype=np.int32)
        if ftype == 0:
            recon = line
        elif ftype == 1:
            # sub: per-channel running sum along the scanline
            recon = line.copy()
            for c in range(bpp):
                recon[c::bpp] = np.cumsum(recon[c::bpp]) % 256
        elif ftype == 2:
            recon = (line + prev) % 256
        elif ftype == 3:
            recon = line.copy()
            for i in range(stride):
                left = recon[i - bpp] if i >= bpp else 0
                recon[i] = (recon[i] + (left + prev[i]) // 2) % 256
        elif ftype == 4:
            recon = line.copy()
            for i in range(stride):
                left = recon[i - bpp] if i >= bpp else 0
                upleft = prev[i - bpp] if i >= bpp else 0
                recon[i] = (recon[i] + _paeth(left, prev[i], upleft)) % 256
        else:
            raise FormatError(f"PNG: unknown filter type {ftype}")
        out[y] = recon.astype(np.uint8)
    return out


def _decode_png(blob: bytes) -> Image:
    header = None
    idat = bytearray()
    seen_end = False
    for tag, data in _iter_png_chunks(blob):
        if header is None and tag != b"IHDR":
            raise FormatError("PNG: first chunk is not IHDR")
        if tag == b"IHDR":
            if len(data) != 13:
                raise FormatError("PNG: malformed IHDR")
            header = struct.unpack(">IIBBBBB", data)
        elif tag == b"IDAT":
            idat.extend(data)
        elif tag == b"IEND":
            seen_end = True
            break
    if header is None or not seen_end:
        raise FormatError("PNG: missing IHDR or IEND")
    w, h, depth, color_type, compression, filt, interlace = header
    if w < 1 or h < 1:
        raise FormatError("PNG: bad dimensions")
    if depth != 8:
        raise FormatError(f"PNG: unsupported bit depth {depth} (need 8)")
    if color_type not in (0, 2):
        raise FormatError(f"PNG: unsupported color type {color_type} (need gray or RGB)")
    if compression != 0 or filt != 0:
        raise FormatError("PNG: unsupported compression/filter method")
    if interlace != 0:
        raise FormatError("PNG: interlaced images not supported")
    if not idat:
        raise FormatError("PNG: no IDAT data")
    try:
        raw = np.frombuffer(zlib.decompress(bytes(idat)), dtype=np.uint8)
    except zlib.error as exc:
        raise FormatError(f"PNG: corrupt IDAT stream ({exc})") from exc
    bpp = 1 if color_type == 0 else 3
    stride = w * bpp
    if raw.size != h * (1 + stride):
        raise FormatError("PNG: raster size mismatch")
    samples = _unfilter(raw, h, stride, bpp)
    data = samples.reshape((h, w) if bpp == 1 else (h, w, 3)) / 255.0
    return Image(data)


# ---------------------------------------------------------------------------
# PGM / PPM (binary variants)

def _parse_pnm(blob: bytes) -> Image:
    magic = blob[:2]
    channels = 1 if magic == b"P5" else 3

    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] not in (0x0A, 0x0D):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PNM: truncated header")
        token = blob[start:pos]
        if not token.isdigit():
            raise FormatError(f"PNM: bad header token {token!r}")
        fields.append(int(token))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError("PNM: bad dimensions")
    if maxval != 255:
        raise FormatError(f"PNM: unsupported maxval {maxval} (need 255)")
    pos += 1  # single whitespace byte separates header from raster
    raster = blob[pos:]
    expected = h * w * channels
    if len(raster) < expected:
        raise FormatError("PNM: truncated raster")
    samples = np.frombuffer(raster[:expected], dtype=np.uint8)
    data = samples.reshape((h, w) if channels == 1 else (h, w, 3)) / 255.0
    return Image(data)


def _encode_pnm(img: Image) -> bytes:
    samples = img.quantized()
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + samples.tobytes()


# ---------------------------------------------------------------------------
# public image API

def load_image(path) -> Image:
    """Read a PNG, PGM or PPM file; format is sniffed from the magic bytes."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if blob.startswith(_PNG_SIGNATURE):
        return _decode_png(blob)
    if blob[:2] in (b"P5", b"P6"):
        return _parse_pnm(blob)
    raise FormatError(f"{path}: not a PNG, PGM or PPM file")


def save_image(img: Image, path):
    """Write 8-bit output chosen by extension: .png, .pgm (gray) or .ppm (color).

    Saving a color image as PGM converts with the luma weights; saving a
    grayscale image as PPM replicates the channel.
    """
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        payload = _encode_png(img)
    elif ext == ".pgm":
        payload = _encode_pnm(img.to_gray())
    elif ext == ".ppm":
        if img.channels == 1:
            img = Image(np.repeat(img.data[:, :, None], 3, axis=2))
        payload = _encode_pnm(img)
    else:
        raise FormatError(f"unsupported image extension {ext!r} (use .png/.pgm/.ppm)")
    _atomic_write(path, payload)


# ---------------------------------------------------------------------------
# descriptor files

def write_descriptor(d: HogDescriptor, path):
    """Serialize a descriptor grid: GHOG magic, six u32 header words, f32 payload."""
    grid_h, grid_w, nbins = d.grid.shape
    header = _HOG_MAGIC + _HOG_HEADER.pack(
        _HOG_VERSION, 1 if d.config.signed else 0, d.config.cell, grid_h, grid_w, nbins)
    _atomic_write(path, header + np.ascontiguousarray(d.grid, dtype="<f4").tobytes())


def read_descriptor(path) -> HogDescriptor:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != _HOG_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 4 + _HOG_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    version, mode, cell, grid_h, grid_w, nbins = _HOG_HEADER.unpack_from(blob, 4)
    if version != _HOG_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if mode not in (0, 1):
        raise FormatError(f"{path}: bad mode {mode}")
    expected = 4 + _HOG_HEADER.size + grid_h * grid_w * nbins * 4
    if len(blob) < expected:
        raise FormatError(f"{path}: truncated payload")
    if len(blob) > expected:
        raise FormatError(f"{path}: trailing bytes after payload")
    grid = np.frombuffer(blob, dtype="<f4", offset=4 + _HOG_HEADER.size)
    grid = grid.reshape(grid_h, grid_w, nbins).astype(np.float64)
    try:
        cfg = HogConfig(cell=cell, bins=nbins, signed=mode == 1)
    except ValueError as exc:
        raise FormatError(f"{path}: inconsistent header ({exc})") from exc
    return HogDescriptor(grid, cfg)
