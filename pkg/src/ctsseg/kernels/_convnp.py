"""Pure numpy convolution lane (im2col / col2im).

This is the fallback used when the compiled extension is unavailable or
disabled. Both lanes implement the same three contracts:

    conv2d_forward(x, w, stride, padding)      -> y
    conv2d_grad_input(gy, w, in_shape, stride, padding) -> gx
    conv2d_grad_weight(gy, x, w_shape, stride, padding) -> gw

with x: [Cin, H, W], w: [Cout, Cin, KH, KW], y/gy: [Cout, OH, OW], all
float64 and C-contiguous. Geometry is validated by the caller.
"""

import numpy as np


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Return columns of shape [Cin*KH*KW, OH*OW]."""
    cin, h, w = x.shape
    oh = _out_size(h, kh, stride, padding)
    ow = _out_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    # Strided view [Cin, KH, KW, OH, OW]; all windows, no copies.
    sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(cin, kh, kw, oh, ow),
        strides=(sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(cin * kh * kw, oh * ow)


def conv2d_forward(x, w, stride, padding):
    cout, cin, kh, kw = w.shape
    oh = _out_size(x.shape[1], kh, stride, padding)
    ow = _out_size(x.shape[2], kw, stride, padding)
    cols = _im2col(x, kh, kw, stride, padding)
    y = w.reshape(cout, cin * kh * kw) @ cols
    return np.ascontiguousarray(y.reshape(cout, oh, ow))


def conv2d_grad_weight(gy, x, w_shape, stride, padding):
    cout, cin, kh, kw = w_shape
    cols = _im2col(x, kh, kw, stride, padding)
    gw = gy.reshape(cout, -1) @ cols.T
    return np.ascontiguousarray(gw.reshape(cout, cin, kh, kw))


def conv2d_grad_input(gy, w, in_shape, stride, padding):
    cout, cin, kh, kw = w.shape
    cin_, h, w_in = in_shape
    oh, ow = gy.shape[1], gy.shape[2]
    # col2im: scatter-add each window's contribution back onto the input.
    cols = w.reshape(cout, cin * kh * kw).T @ gy.reshape(cout, oh * ow)
    cols = cols.reshape(cin, kh, kw, oh, ow)
    gx_pad = np.zeros((cin, h + 2 * padding, w_in + 2 * padding))
    for ky in range(kh):
        ys = ky + stride * np.arange(oh)
        for kx in range(kw):
            xs = kx + stride * np.arange(ow)
            gx_pad[:, ys[:, None], xs[None, :]] += cols[:, ky, kx]
    if padding:
        gx_pad = gx_pad[:, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gx_pad)
