# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; mirrors the semantics of ``_fallback.py``."""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int sh, int sw):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int oh = (h - kh) // sh + 1
    cdef int ow = (w - kw) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((n, oh * ow, c * kh * kw), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef int b, oi, oj, ci, ki, kj, col, row
    for b in range(n):
        for oi in range(oh):
            for oj in range(ow):
                row = oi * ow + oj
                col = 0
                for ci in range(c):
                    for ki in range(kh):
                        for kj in range(kw):
                            out[b, row, col] = x[b, ci, oi * sh + ki, oj * sw + kj]
                            col += 1
    return out_arr


def col2im(floating[:, :, ::1] cols, int c, int h, int w,
           int kh, int kw, int sh, int sw):
    cdef int n = cols.shape[0]
    cdef int oh = (h - kh) // sh + 1
    cdef int ow = (w - kw) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    grid_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] grid = grid_arr
    cdef int b, oi, oj, ci, ki, kj, col, row
    for b in range(n):
        for oi in range(oh):
            for oj in range(ow):
                row = oi * ow + oj
                col = 0
                for ci in range(c):
                    for ki in range(kh):
                        for kj in range(kw):
                            grid[b, ci, oi * sh + ki, oj * sw + kj] += cols[b, row, col]
                            col += 1
    return grid_arr


def nearest_codebook(vecs, table):
    v_arr = np.ascontiguousarray(vecs, dtype=np.float64)
    t_arr = np.ascontiguousarray(table, dtype=np.float64)
    cdef double[:, ::1] v = v_arr
    cdef double[:, ::1] t = t_arr
    cdef int n = v.shape[0], k = t.shape[0], d = v.shape[1]
    out_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef int i, j, m
    cdef double best, dist, diff
    for i in range(n):
        best = -1.0
        out[i] = 0
        for j in range(k):
            dist = 0.0
            for m in range(d):
                diff = v[i, m] - t[j, m]
                dist += diff * diff
            if best < 0.0 or dist < best:
                best = dist
                out[i] = j
    return out_arr


def rgbe_rle_decode(buf, Py_ssize_t offset, int width):
    cdef const unsigned char[::1] data = buf
    out_arr = np.zeros((width, 4), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    cdef Py_ssize_t pos = offset, size = data.shape[0]
    cdef int comp, i, count, j
    cdef unsigned char b
    for comp in range(4):
        i = 0
        while i < width:
            if pos >= size:
                raise ValueError(f"truncated RLE scanline at byte {pos}")
            b = data[pos]
            pos += 1
            if b > 128:
                count = b - 128
                if pos >= size:
                    raise ValueError(f"truncated RLE run at byte {pos}")
                if i + count > width:
                    raise ValueError(f"RLE run overflows scanline at byte {pos}")
                for j in range(count):
                    out[i + j, comp] = data[pos]
                pos += 1
            else:
                count = b
                if pos + count > size:
                    raise ValueError(f"truncated RLE literals at byte {pos}")
                if i + count > width:
                    raise ValueError(f"RLE literals overflow scanline at byte {pos}")
                for j in range(count):
                    out[i + j, comp] = data[pos + j]
                pos += count
            i += count
    return out_arr, pos
