"""Radiance RGBE (.hdr) codec.

Container layout:

    #?RADIANCE\n
    FORMAT=32-bit_rle_rgbe\n
    \n
    -Y <height> +X <width>\n
    <scanlines>

Each pixel is 4 bytes (r, g, b mantissas + shared exponent e); the linear
value of a component is mantissa / 256 * 2^(e - 128), and (0, 0, 0, 0) is
exact zero.  Scanlines are either flat pixel runs or adaptive-RLE blocks
introduced by (2, 2, width_hi, width_lo); both are accepted on read.  Writing
emits flat scanlines, except that a scanline whose first pixel would mimic
the RLE introducer is RLE-encoded to keep the stream unambiguous.
"""

import numpy as np

from . import kernels
from .raster import HdrImage

HEADER_MAGIC = b"#?RADIANCE"
FORMAT_LINE = b"FORMAT=32-bit_rle_rgbe"


class RgbeError(ValueError):
    """Malformed RGBE stream; the message carries the byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def float_to_rgbe(pixels):
    """Quantize (..., 3) linear floats to (..., 4) RGBE bytes.

    The shared exponent covers the max channel; mantissas are rounded to
    nearest, bumping the exponent when the max channel would round to 256.
    """
    arr = np.asarray(pixels, dtype=np.float64)
    v = arr.max(axis=-1)
    out = np.zeros(arr.shape[:-1] + (4,), dtype=np.uint8)
    live = v >= 1e-38
    if not np.any(live):
        return out
    _, exp = np.frexp(v[live])
    scale = np.exp2(-exp.astype(np.float64)) * 256.0
    mant_max = np.round(v[live] * scale)
    bump = mant_max >= 256.0
    exp = exp + bump
    scale = np.where(bump, scale * 0.5, scale)
    if np.any(exp + 128 > 255) or np.any(exp + 128 < 1):
        raise RgbeError("value out of RGBE exponent range", 0)
    mant = np.minimum(np.round(arr[live] * scale[..., None]), 255.0)
    out_live = np.empty(mant.shape[:-1] + (4,), dtype=np.uint8)
    out_live[..., :3] = mant.astype(np.uint8)
    out_live[..., 3] = (exp + 128).astype(np.uint8)
    out[live] = out_live
    return out


def rgbe_to_float(rgbe):
    """Decode (..., 4) RGBE bytes to (..., 3) linear floats."""
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    mant = rgbe[..., :3].astype(np.float64)
    exp = rgbe[..., 3].astype(np.int32)
    scale = np.where(exp > 0, np.exp2(exp - 128 - 8.0), 0.0)
    return mant * scale[..., None]


def _rle_encode_component(values):
    """Adaptive-RLE encode one scanline component (uint8 array) to bytes."""
    out = bytearray()
    n = len(values)
    i = 0
    while i < n:
        run = 1
        while i + run < n and run < 127 and values[i + run] == values[i]:
            run += 1
        if run >= 4:
            out.append(128 + run)
            out.append(int(values[i]))
            i += run
            continue
        # literal block: scan ahead until a worthwhile run starts
        j = i
        while j < n and j - i < 128:
            run = 1
            while j + run < n and run < 4 and values[j + run] == values[j]:
                run += 1
            if run >= 4:
                break
            j += run
        j = min(j, i + 128)
        out.append(j - i)
        out.extend(values[i:j].tobytes())
        i = j
    return bytes(out)


def encode_rgbe(hdr, rle=False):
    """Serialize an HdrImage to Radiance .hdr bytes (flat scanlines by default)."""
    h, w = hdr.height, hdr.width
    out = bytearray()
    out += HEADER_MAGIC + b"\n"
    out += FORMAT_LINE + b"\n\n"
    out += f"-Y {h} +X {w}\n".encode("ascii")
    rgbe = float_to_rgbe(hdr.pixels)
    use_rle = rle and 8 <= w < 32768
    for y in range(h):
        row = rgbe[y]
        ambiguous = (
            8 <= w < 32768
            and row[0, 0] == 2
            and row[0, 1] == 2
            and (int(row[0, 2]) << 8 | int(row[0, 3])) == w
        )
        if use_rle or ambiguous:
            out += bytes((2, 2, (w >> 8) & 0xFF, w & 0xFF))
            for comp in range(4):
                out += _rle_encode_component(row[:, comp])
        else:
            out += row.tobytes()
    return bytes(out)


def _read_line(data, pos):
    end = data.find(b"\n", pos)
    if end < 0:
        raise RgbeError("unterminated header line", pos)
    return data[pos:end], end + 1


def decode_rgbe(data):
    """Parse Radiance .hdr bytes into an HdrImage.

    Accepts flat and adaptive-RLE scanlines; raises RgbeError with the byte
    offset on malformed input.
    """
    data = bytes(data)
    line, pos = _read_line(data, 0)
    if not line.startswith(HEADER_MAGIC):
        raise RgbeError("missing #?RADIANCE magic", 0)
    saw_format = False
    while True:
        line, pos = _read_line(data, pos)
        if line == b"":
            break
        if line.startswith(b"FORMAT="):
            if line != FORMAT_LINE:
                raise RgbeError(f"unsupported format {line!r}", pos)
            saw_format = True
    if not saw_format:
        raise RgbeError("header missing FORMAT line", pos)
    line, pos = _read_line(data, pos)
    parts = line.split()
    if len(parts) != 4 or parts[0] != b"-Y" or parts[2] != b"+X":
        raise RgbeError(f"unsupported resolution line {line!r}", pos)
    try:
        h, w = int(parts[1]), int(parts[3])
    except ValueError:
        raise RgbeError(f"bad resolution line {line!r}", pos) from None
    if h < 1 or w < 1:
        raise RgbeError("non-positive image dims", pos)
    rows = np.empty((h, w, 4), dtype=np.uint8)
    for y in range(h):
        if pos + 4 > len(data):
            raise RgbeError(f"truncated scanline {y}", pos)
        b0, b1, b2, b3 = data[pos : pos + 4]
        if b0 == 2 and b1 == 2 and 8 <= w < 32768 and ((b2 << 8) | b3) == w:
            try:
                rows[y], pos = kernels.rgbe_rle_decode(data, pos + 4, w)
            except ValueError as exc:
                raise RgbeError(f"scanline {y}: {exc}", pos) from None
        else:
            end = pos + 4 * w
            if end > len(data):
                raise RgbeError(f"truncated flat scanline {y}", pos)
            rows[y] = np.frombuffer(data[pos:end], dtype=np.uint8).reshape(w, 4)
            pos = end
    return HdrImage(rgbe_to_float(rows))


def save_hdr(hdr, path, rle=False):
    with open(path, "wb") as fh:
        fh.write(encode_rgbe(hdr, rle=rle))


def load_hdr(path):
    with open(path, "rb") as fh:
        return decode_rgbe(fh.read())
