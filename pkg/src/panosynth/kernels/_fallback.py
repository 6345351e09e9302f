"""Pure-numpy implementations of the hot kernels.

Semantics are shared with the compiled backend in ``_core.pyx``; keep the two
in sync.  Layout convention for convolution lowering: columns are ordered
(channel, kernel-row, kernel-col), output positions row-major.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, sh, sw):
    """Lower padded input (N,C,H,W) to patch columns (N, oh*ow, C*kh*kw)."""
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    s0, s1, s2, s3 = x.strides
    windows = as_strided(
        x,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n, oh * ow, c * kh * kw)


def col2im(cols, c, h, w, kh, kw, sh, sw):
    """Scatter-add patch columns back onto a zeroed (N,C,H,W) grid.

    Exact adjoint of :func:`im2col`: each column element is added at the
    input position it was read from.
    """
    n = cols.shape[0]
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    grid = np.zeros((n, c, h, w), dtype=cols.dtype)
    blocks = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    # one strided slice-add per kernel tap; taps never collide with themselves
    for ki in range(kh):
        for kj in range(kw):
            grid[:, :, ki : ki + oh * sh : sh, kj : kj + ow * sw : sw] += blocks[
                :, :, ki, kj
            ]
    return grid


def nearest_codebook(vecs, table):
    """Index of the nearest table row per vector (squared euclidean).

    Ties break to the lowest index.  Distances are accumulated in float64
    regardless of the input dtype so both backends agree bit-for-bit.
    """
    v = np.asarray(vecs, dtype=np.float64)
    t = np.asarray(table, dtype=np.float64)
    n = v.shape[0]
    out = np.empty(n, dtype=np.int64)
    # chunk to bound the (chunk, K, d) temporary
    chunk = max(1, int(4e6) // max(1, t.shape[0] * t.shape[1]))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d2 = v[lo:hi, None, :] - t[None, :, :]
        np.square(d2, out=d2)
        out[lo:hi] = d2.sum(axis=2).argmin(axis=1)
    return out


def rgbe_rle_decode(buf, offset, width):
    """Decode one adaptive-RLE scanline body into a (width, 4) uint8 array.

    `offset` points just past the 4-byte scanline introducer.  Returns
    (pixels, new_offset).  Raises ValueError on truncated or overlong runs,
    reporting the byte offset.
    """
    data = memoryview(buf)
    out = np.zeros((width, 4), dtype=np.uint8)
    pos = offset
    for comp in range(4):
        i = 0
        while i < width:
            if pos >= len(data):
                raise ValueError(f"truncated RLE scanline at byte {pos}")
            b = data[pos]
            pos += 1
            if b > 128:
                count = b - 128
                if pos >= len(data):
                    raise ValueError(f"truncated RLE run at byte {pos}")
                if i + count > width:
                    raise ValueError(f"RLE run overflows scanline at byte {pos}")
                out[i : i + count, comp] = data[pos]
                pos += 1
            else:
                count = b
                if pos + count > len(data):
                    raise ValueError(f"truncated RLE literals at byte {pos}")
                if i + count > width:
                    raise ValueError(f"RLE literals overflow scanline at byte {pos}")
                out[i : i + count, comp] = np.frombuffer(
                    data[pos : pos + count], dtype=np.uint8
                )
                pos += count
            i += count
    return out, pos
