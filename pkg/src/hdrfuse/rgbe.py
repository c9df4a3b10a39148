"""Radiance RGBE (.hdr) reader and writer.

Pixels are stored as four bytes (r, g, b, e); the decoded channel value
is mantissa * 2^(e - 136), i.e. mantissa/256 * 2^(e - 128), and a zero
exponent byte denotes a black pixel.  Both flat scanlines and the
new-style per-component RLE are read; the writer emits new-style RLE
whenever the width allows it (8..32767 pixels) and flat scanlines
otherwise.  Round-tripping a float image is exact to within one
mantissa quantum per channel.
"""

import io

import numpy as np

from .imaging import RadianceMap

__all__ = ["RgbeFormatError", "decode_rgbe", "encode_rgbe", "read_hdr", "write_hdr"]

_MAGICS = (b"#?RADIANCE", b"#?RGBE")


class RgbeFormatError(ValueError):
    """Malformed RGBE container."""


def rgbe_to_float(rgbe):
    """uint8[..., 4] -> float32[..., 3] per the mantissa * 2^(e-136) rule."""
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    exp = rgbe[..., 3].astype(np.int32)
    scale = np.where(exp == 0, 0.0, np.ldexp(1.0, exp - 136)).astype(np.float32)
    return rgbe[..., :3].astype(np.float32) * scale[..., None]


def float_to_rgbe(rgb):
    """float[..., 3] -> uint8[..., 4], rounding mantissas to the nearest step."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.min() < 0:
        raise ValueError("RGBE cannot represent negative radiance")
    v = rgb.max(axis=-1)
    mant, exp = np.frexp(v)  # v = mant * 2^exp, mant in [0.5, 1)
    # scale = 256 * 2^-exp maps the max channel into [128, 256)
    scale = np.where(v < 1e-32, 0.0, np.ldexp(256.0, -exp))
    quant = np.floor(rgb * scale[..., None] + 0.5)
    quant = np.minimum(quant, 255.0)  # rounding may push the max channel to 256
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    out[..., :3] = quant.astype(np.uint8)
    out[..., 3] = np.where(v < 1e-32, 0, exp + 128).astype(np.uint8)
    out[v < 1e-32, :3] = 0
    return out


def _parse_header(stream):
    magic = stream.readline().rstrip(b"\r\n")
    if not any(magic.startswith(m) for m in _MAGICS):
        raise RgbeFormatError(f"bad magic header {magic[:20]!r}")
    while True:
        line = stream.readline()
        if line == b"":
            raise RgbeFormatError("unexpected end of header")
        line = line.rstrip(b"\r\n")
        if line == b"":
            break  # blank line ends the header block
        if line.startswith(b"FORMAT=") and line != b"FORMAT=32-bit_rle_rgbe":
            raise RgbeFormatError(f"unsupported format {line!r}")
    dims = stream.readline().rstrip(b"\r\n").split()
    if len(dims) != 4 or dims[0] != b"-Y" or dims[2] != b"+X":
        raise RgbeFormatError(f"unsupported resolution line {dims!r}")
    return int(dims[3]), int(dims[1])  # width, height


def _read_exact(stream, n):
    data = stream.read(n)
    if len(data) != n:
        raise RgbeFormatError("truncated scanline data")
    return data


def _decode_scanline(stream, width):
    start = _read_exact(stream, 4)
    if width >= 8 and width <= 32767 and start[0] == 2 and start[1] == 2 and (start[2] << 8) + start[3] == width:
        # new-style RLE, each component run-length coded separately
        line = np.empty((width, 4), dtype=np.uint8)
        for c in range(4):
            pos = 0
            while pos < width:
                code = _read_exact(stream, 1)[0]
                if code > 128:  # run of a repeated byte
                    count = code - 128
                    if pos + count > width:
                        raise RgbeFormatError("RLE run overflows scanline")
                    line[pos : pos + count, c] = _read_exact(stream, 1)[0]
                else:  # dump of literal bytes
                    count = code
                    if count == 0 or pos + count > width:
                        raise RgbeFormatError("RLE dump overflows scanline")
                    line[pos : pos + count, c] = np.frombuffer(_read_exact(stream, count), np.uint8)
                pos += count
        return line
    # flat scanline: width consecutive 4-byte pixels
    raw = start + _read_exact(stream, 4 * (width - 1))
    return np.frombuffer(raw, np.uint8).reshape(width, 4)


def decode_rgbe(data):
    """Decode a Radiance RGBE container into a RadianceMap."""
    stream = io.BytesIO(data)
    width, height = _parse_header(stream)
    if width < 1 or height < 1:
        raise RgbeFormatError(f"bad image size {width}x{height}")
    rows = [_decode_scanline(stream, width) for _ in range(height)]
    return RadianceMap(rgbe_to_float(np.stack(rows)), exposure_scale=1.0)


def _encode_component_rle(values, out):
    # runs of >= 4 identical bytes are worth a run code; everything else is dumped
    n = len(values)
    pos = 0
    while pos < n:
        run_len = 1
        while pos + run_len < n and run_len < 127 and values[pos + run_len] == values[pos]:
            run_len += 1
        if run_len >= 4:
            out.append(128 + run_len)
            out.append(int(values[pos]))
            pos += run_len
        else:
            dump_start = pos
            while pos < n and pos - dump_start < 128:
                nxt = 1
                while pos + nxt < n and nxt < 4 and values[pos + nxt] == values[pos]:
                    nxt += 1
                if nxt >= 4:
                    break
                pos += 1
            out.append(pos - dump_start)
            out.extend(int(v) for v in values[dump_start:pos])


def encode_rgbe(image):
    """Encode a RadianceMap (or H x W x 3 array) as Radiance RGBE bytes."""
    pixels = image.pixels if isinstance(image, RadianceMap) else np.asarray(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 radiance, got shape {pixels.shape}")
    height, width = pixels.shape[:2]
    rgbe = float_to_rgbe(pixels)
    out = bytearray()
    out += b"#?RADIANCE\n"
    out += b"FORMAT=32-bit_rle_rgbe\n\n"
    out += f"-Y {height} +X {width}\n".encode()
    if 8 <= width <= 32767:
        for row in rgbe:
            out += bytes((2, 2, width >> 8, width & 0xFF))
            for c in range(4):
                _encode_component_rle(row[:, c], out)
    else:
        out += rgbe.tobytes()
    return bytes(out)


def read_hdr(path):
    with open(path, "rb") as fh:
        return decode_rgbe(fh.read())


def write_hdr(path, image):
    with open(path, "wb") as fh:
        fh.write(encode_rgbe(image))
