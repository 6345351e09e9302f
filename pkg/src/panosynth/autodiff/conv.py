"""2-D convolution and nearest-neighbor upsampling as differentiable ops.

Convolution is lowered to im2col + BLAS matmul via the selected kernel
backend.  Horizontal padding may be circular (panorama cyclicity); vertical
padding is always zero.
"""

import numpy as np

from .. import kernels
from .tensor import ShapeError, _node


def _pad_input(x, ph, pw, circular_w):
    if ph == 0 and pw == 0:
        return x
    if circular_w:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (0, 0)))
        if pw:
            x = np.concatenate([x[:, :, :, -pw:], x, x[:, :, :, :pw]], axis=3)
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _unpad_grad(g, h, w, ph, pw, circular_w):
    out = g[:, :, ph : ph + h, :].copy() if ph else g.copy()
    if pw:
        body = out[:, :, :, pw : pw + w].copy()
        if circular_w:
            body[:, :, :, :pw] += out[:, :, :, pw + w :]
            body[:, :, :, w - pw :] += out[:, :, :, :pw]
        out = body
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0, circular_w=False):
    """Cross-correlate (N, C, H, W) input with (C_out, C_in, kh, kw) weights.

    `padding` pads both axes; with `circular_w` the width axis wraps while the
    height axis stays zero-padded.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D tensors, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.data.shape
    c_out, c_in_w, kh, kw = weight.data.shape
    if c_in != c_in_w:
        raise ShapeError(f"channel mismatch: input {c_in} vs weight {c_in_w}")
    sh = sw = int(stride)
    ph = pw = int(padding)
    padded = np.ascontiguousarray(_pad_input(x.data, ph, pw, circular_w))
    hp, wp = padded.shape[2], padded.shape[3]
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    pointwise = kh == 1 and kw == 1 and sh == 1 and sw == 1
    if pointwise:  # 1x1 stride-1 conv is a channel matmul; skip the lowering
        cols = padded.reshape(n, c_in, hp * wp).transpose(0, 2, 1)
    else:
        cols = kernels.im2col(padded, kh, kw, sh, sw)  # (n, oh*ow, c*kh*kw)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T  # (n, oh*ow, c_out)
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 2, 1).reshape(n, c_out, oh, ow)

    def bwd(g):
        g2 = g.reshape(n, c_out, oh * ow).transpose(0, 2, 1)
        weight.accumulate(
            np.tensordot(g2, cols, axes=([0, 1], [0, 1])).reshape(weight.data.shape)
        )
        if bias is not None:
            bias.accumulate(g2.sum(axis=(0, 1)))
        dcols = np.ascontiguousarray(g2 @ wmat)
        if pointwise:
            dpad = dcols.transpose(0, 2, 1).reshape(n, c_in, hp, wp)
        else:
            dpad = kernels.col2im(dcols, c_in, hp, wp, kh, kw, sh, sw)
        x.accumulate(_unpad_grad(dpad, h, w, ph, pw, circular_w))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bwd)


def upsample2x(x):
    """Nearest-neighbor 2x upsampling of an (N, C, H, W) tensor."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        x.accumulate(g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _node(out, (x,), bwd)
