"""File-format tests: PNG/PGM/PPM codecs and the GHOG descriptor container."""

import os
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradhog import image_io
from gradhog.hog import HogConfig, HogDescriptor
from gradhog.image_io import FormatError, Image, load_image, read_descriptor, save_image, write_descriptor


def write_bytes(path, blob):
    with open(path, "wb") as fh:
        fh.write(blob)


# ---------------------------------------------------------------------------
# Image type

def test_image_validation():
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2)) - 0.5)
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2)) + 1.5)
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2, 4)))
    with pytest.raises(ValueError):
        Image(np.full((2, 2), np.nan))
    img = Image(np.zeros((3, 5, 3)))
    assert (img.height, img.width, img.channels) == (3, 5, 3)


def test_to_gray_uses_luma_weights():
    data = np.zeros((1, 3, 3))
    data[0, 0] = [1.0, 0.0, 0.0]
    data[0, 1] = [0.0, 1.0, 0.0]
    data[0, 2] = [0.0, 0.0, 1.0]
    gray = Image(data).to_gray()
    assert np.allclose(gray.data, [[0.299, 0.587, 0.114]])


def test_quantization_endpoints():
    assert Image(np.full((1, 1), 0.5)).quantized()[0, 0] == 128
    assert Image(np.zeros((1, 1))).quantized()[0, 0] == 0
    assert Image(np.ones((1, 1))).quantized()[0, 0] == 255


# ---------------------------------------------------------------------------
# PGM / PPM

def test_pgm_basic_values(tmp_path):
    p = tmp_path / "t.pgm"
    write_bytes(p, b"P5\n2 2\n255\n" + bytes([0, 255, 0, 255]))
    img = load_image(p)
    assert img.channels == 1
    assert np.array_equal(img.data, [[0.0, 1.0], [0.0, 1.0]])


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "t.pgm"
    write_bytes(p, b"P5\n# a comment\n2 # inline\n1\n# another\n255\n" + bytes([10, 20]))
    img = load_image(p)
    assert img.data.shape == (1, 2)
    assert np.allclose(img.data, np.array([[10, 20]]) / 255.0)


def test_pgm_rejects_high_maxval(tmp_path):
    p = tmp_path / "t.pgm"
    write_bytes(p, b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(FormatError):
        load_image(p)


def test_pgm_truncated_raster(tmp_path):
    p = tmp_path / "t.pgm"
    write_bytes(p, b"P5\n2 2\n255\n" + bytes([1, 2, 3]))
    with pytest.raises(FormatError):
        load_image(p)


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = Image(rng.integers(0, 256, size=(5, 4, 3)) / 255.0)
    p = tmp_path / "t.ppm"
    save_image(img, p)
    back = load_image(p)
    assert back.channels == 3
    assert np.array_equal(back.data, img.data)


def test_pgm_save_converts_color(tmp_path):
    data = np.zeros((2, 2, 3))
    data[:, :, 0] = 1.0
    p = tmp_path / "t.pgm"
    save_image(Image(data), p)
    back = load_image(p)
    assert back.channels == 1
    assert np.allclose(back.data, round(0.299 * 255) / 255.0)


# ---------------------------------------------------------------------------
# PNG

def test_png_gray_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    img = Image(rng.integers(0, 256, size=(7, 11)) / 255.0)
    p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
    save_image(img, p1)
    back = load_image(p1)
    assert np.array_equal(back.data, img.data)
    save_image(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_png_rgb_constant_red(tmp_path):
    data = np.zeros((3, 2, 3))
    data[:, :, 0] = 1.0
    p = tmp_path / "red.png"
    save_image(Image(data), p)
    back = load_image(p)
    assert back.channels == 3
    assert np.array_equal(back.data, data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 9), st.integers(1, 9), st.booleans())
def test_png_round_trip_property(seed, h, w, color):
    rng = np.random.default_rng(seed)
    shape = (h, w, 3) if color else (h, w)
    img = Image(rng.integers(0, 256, size=shape) / 255.0)
    blob = image_io._encode_png(img)
    back = image_io._decode_png(blob)
    assert np.array_equal(back.data, img.data)


def test_save_load_half_quantum_bound(tmp_path):
    rng = np.random.default_rng(2)
    img = Image(rng.random((9, 6)))
    p = tmp_path / "q.png"
    save_image(img, p)
    back = load_image(p)
    assert np.max(np.abs(back.data - img.data)) <= 1.0 / 510.0 + 1e-15


def _filtered_png(samples, filter_types):
    """Build a PNG applying the given per-row filter types (gray, 8-bit)."""
    h, w = samples.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    recon = samples.astype(np.int32)
    raw = bytearray()
    for y in range(h):
        ftype = filter_types[y % len(filter_types)]
        prev = recon[y - 1] if y > 0 else np.zeros(w, dtype=np.int32)
        line = recon[y]
        out = np.empty(w, dtype=np.int32)
        for i in range(w):
            left = line[i - 1] if i >= 1 else 0
            upleft = prev[i - 1] if i >= 1 else 0
            if ftype == 0:
                pred = 0
            elif ftype == 1:
                pred = left
            elif ftype == 2:
                pred = prev[i]
            elif ftype == 3:
                pred = (left + prev[i]) // 2
            else:
                pred = image_io._paeth(left, prev[i], upleft)
            out[i] = (line[i] - pred) % 256
        raw.append(ftype)
        raw.extend(out.astype(np.uint8).tobytes())
    idat = zlib.compress(bytes(raw))
    return (image_io._PNG_SIGNATURE + image_io._png_chunk(b"IHDR", ihdr)
            + image_io._png_chunk(b"IDAT", idat) + image_io._png_chunk(b"IEND", b""))


@pytest.mark.parametrize("filters", [[0], [1], [2], [3], [4], [0, 1, 2, 3, 4]])
def test_png_all_scanline_filters_decode(filters):
    rng = np.random.default_rng(3)
    samples = rng.integers(0, 256, size=(6, 5)).astype(np.uint8)
    blob = _filtered_png(samples, filters)
    back = image_io._decode_png(blob)
    assert np.array_equal(back.quantized(), samples)


def test_png_rejects_16_bit():
    ihdr = struct.pack(">IIBBBBB", 2, 2, 16, 0, 0, 0, 0)
    blob = (image_io._PNG_SIGNATURE + image_io._png_chunk(b"IHDR", ihdr)
            + image_io._png_chunk(b"IDAT", zlib.compress(b"\x00" * 10))
            + image_io._png_chunk(b"IEND", b""))
    with pytest.raises(FormatError, match="bit depth"):
        image_io._decode_png(blob)


def test_png_rejects_interlaced():
    ihdr = struct.pack(">IIBBBBB", 2, 2, 8, 0, 0, 0, 1)
    blob = (image_io._PNG_SIGNATURE + image_io._png_chunk(b"IHDR", ihdr)
            + image_io._png_chunk(b"IDAT", zlib.compress(b"\x00" * 10))
            + image_io._png_chunk(b"IEND", b""))
    with pytest.raises(FormatError, match="interlaced"):
        image_io._decode_png(blob)


def test_png_rejects_palette():
    ihdr = struct.pack(">IIBBBBB", 2, 2, 8, 3, 0, 0, 0)
    blob = (image_io._PNG_SIGNATURE + image_io._png_chunk(b"IHDR", ihdr)
            + image_io._png_chunk(b"IDAT", zlib.compress(b"\x00" * 10))
            + image_io._png_chunk(b"IEND", b""))
    with pytest.raises(FormatError, match="color type"):
        image_io._decode_png(blob)


def test_png_rejects_corrupt_crc(tmp_path):
    img = Image(np.zeros((2, 2)))
    p = tmp_path / "c.png"
    save_image(img, p)
    blob = bytearray(p.read_bytes())
    blob[-5] ^= 0xFF  # IEND CRC byte
    write_bytes(p, bytes(blob))
    with pytest.raises(FormatError, match="CRC"):
        load_image(p)


def test_png_rejects_truncation(tmp_path):
    img = Image(np.zeros((4, 4)))
    p = tmp_path / "t.png"
    save_image(img, p)
    write_bytes(p, p.read_bytes()[:-7])
    with pytest.raises(FormatError):
        load_image(p)


def test_unknown_magic_rejected(tmp_path):
    p = tmp_path / "x.bin"
    write_bytes(p, b"NOTANIMAGEFORMAT")
    with pytest.raises(FormatError):
        load_image(p)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(FormatError):
        load_image(tmp_path / "absent.png")


def test_save_unknown_extension(tmp_path):
    with pytest.raises(FormatError):
        save_image(Image(np.zeros((2, 2))), tmp_path / "x.jpg")


def test_no_temp_files_left_behind(tmp_path):
    save_image(Image(np.zeros((2, 2))), tmp_path / "ok.png")
    assert sorted(os.listdir(tmp_path)) == ["ok.png"]


# ---------------------------------------------------------------------------
# descriptor container

def make_descriptor(seed=0, shape=(3, 4, 9), signed=False, cell=8):
    rng = np.random.default_rng(seed)
    cfg = HogConfig(cell=cell, bins=shape[2], signed=signed)
    return HogDescriptor(rng.standard_normal(shape), cfg)


def test_descriptor_round_trip(tmp_path):
    d = make_descriptor()
    p = tmp_path / "d.hog"
    write_descriptor(d, p)
    back = read_descriptor(p)
    assert back.grid.shape == d.grid.shape
    # payload is float32; the read-back value is the f32 rounding of the grid
    assert np.array_equal(back.grid, d.grid.astype(np.float32).astype(np.float64))
    assert back.config.cell == d.config.cell
    assert back.config.signed == d.config.signed
    assert back.config.bins == d.config.bins


def test_descriptor_file_level_round_trip_bit_identical(tmp_path):
    d = make_descriptor(seed=5, shape=(2, 2, 18), signed=True, cell=4)
    p1, p2 = tmp_path / "a.hog", tmp_path / "b.hog"
    write_descriptor(d, p1)
    write_descriptor(read_descriptor(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 5), st.integers(1, 5), st.booleans())
def test_descriptor_round_trip_property(seed, gh, gw, signed):
    rng = np.random.default_rng(seed)
    bins = 18 if signed else 9
    d = HogDescriptor(rng.standard_normal((gh, gw, bins)), HogConfig(signed=signed))
    blob_path = None
    import tempfile
    with tempfile.TemporaryDirectory() as td:
        blob_path = os.path.join(td, "d.hog")
        write_descriptor(d, blob_path)
        back = read_descriptor(blob_path)
    assert np.array_equal(back.grid, d.grid.astype(np.float32).astype(np.float64))


def test_descriptor_header_layout(tmp_path):
    d = make_descriptor(shape=(2, 3, 9), cell=8, signed=False)
    p = tmp_path / "d.hog"
    write_descriptor(d, p)
    blob = p.read_bytes()
    assert blob[:4] == b"GHOG"
    assert struct.unpack_from("<6I", blob, 4) == (1, 0, 8, 2, 3, 9)
    assert len(blob) == 28 + 2 * 3 * 9 * 4
    # payload is row-major, bin-fastest
    payload = np.frombuffer(blob, dtype="<f4", offset=28)
    assert payload[0] == np.float32(d.grid[0, 0, 0])
    assert payload[9] == np.float32(d.grid[0, 1, 0])


def test_descriptor_bad_magic(tmp_path):
    p = tmp_path / "bad.hog"
    write_bytes(p, b"XXXX" + b"\x00" * 40)
    with pytest.raises(FormatError, match="magic"):
        read_descriptor(p)


def test_descriptor_version_mismatch(tmp_path):
    p = tmp_path / "v.hog"
    write_bytes(p, b"GHOG" + struct.pack("<6I", 2, 0, 8, 1, 1, 9) + b"\x00" * 36)
    with pytest.raises(FormatError, match="version"):
        read_descriptor(p)


def test_descriptor_truncated_payload(tmp_path):
    d = make_descriptor()
    p = tmp_path / "t.hog"
    write_descriptor(d, p)
    write_bytes(p, p.read_bytes()[:-4])
    with pytest.raises(FormatError, match="truncated"):
        read_descriptor(p)


def test_descriptor_trailing_bytes(tmp_path):
    d = make_descriptor()
    p = tmp_path / "t.hog"
    write_descriptor(d, p)
    write_bytes(p, p.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_descriptor(p)


def test_descriptor_bad_mode(tmp_path):
    p = tmp_path / "m.hog"
    write_bytes(p, b"GHOG" + struct.pack("<6I", 1, 7, 8, 1, 1, 9) + b"\x00" * 36)
    with pytest.raises(FormatError, match="mode"):
        read_descriptor(p)
