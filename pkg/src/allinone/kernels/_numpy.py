"""Vectorized numpy kernels. Inputs are already padded; outputs are freshly allocated."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp, kh, kw, stride):
    # (B, C, OH, OW, kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def im2col(xp, kh, kw, stride):
    win = _windows(xp, kh, kw, stride)
    b, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)


def col2im(dcols, xp_shape, kh, kw, stride):
    b, c, hp, wp = xp_shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    d = dcols.reshape(b, oh, ow, c, kh, kw)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp


def conv2d_direct(xp, w, stride):
    o, c, kh, kw = w.shape
    win = _windows(xp, kh, kw, stride)
    return np.einsum("bchwij,ocij->bohw", win, w, optimize=False)


def maxpool_forward(xp, k, stride):
    win = _windows(xp, k, k, stride)
    b, c, oh, ow = win.shape[:4]
    flat = win.reshape(b, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def maxpool_backward(dout, arg, xp_shape, k, stride):
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    b, c, oh, ow = dout.shape
    bi, ci, yi, xi = np.indices((b, c, oh, ow), sparse=False)
    rows = yi * stride + arg // k
    cols = xi * stride + arg % k
    np.add.at(dxp, (bi, ci, rows, cols), dout)
    return dxp


def pattern_conv(xp, values, kidx, kout, kin, kpat, offsets, n_out, stride, oh, ow):
    """Pattern-compact convolution.

    ``kidx`` lists the stored kernels taking part; kernel ``k`` reads
    ``values[4k:4k+4]`` at the 4 window offsets of library pattern ``kpat[k]``.
    """
    b = xp.shape[0]
    out = np.zeros((b, n_out, oh, ow), dtype=xp.dtype)
    if len(kidx) == 0:
        return out
    # shifted input planes for every (input channel, dy, dx) the live kernels touch
    pat = offsets[kpat[kidx]]                     # (K, 4, 2)
    taps = np.stack([np.repeat(kin[kidx], 4), pat[..., 0].ravel(), pat[..., 1].ravel()], axis=1)
    uniq, inverse = np.unique(taps, axis=0, return_inverse=True)
    planes = np.empty((len(uniq), b, oh, ow), dtype=xp.dtype)
    for u, (ci, dy, dx) in enumerate(uniq):
        planes[u] = xp[:, ci, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride]
    wmat = np.zeros((n_out, len(uniq)), dtype=xp.dtype)
    vals = values.reshape(-1, 4)[kidx].ravel().astype(xp.dtype)
    np.add.at(wmat, (np.repeat(kout[kidx], 4), inverse.ravel()), vals)
    res = wmat @ planes.reshape(len(uniq), -1)
    return res.reshape(n_out, b, oh, ow).transpose(1, 0, 2, 3).copy()


def block_matmul(cols, values, gidx, grow, gcol, o, n_out):
    """Block-column-compact product.

    ``cols`` is (B, K, L). Group ``g`` covers rows ``grow[g]*o .. +o`` of the
    weight matrix at column ``gcol[g]`` with values ``values[g*o:(g+1)*o]``.
    """
    b, _, length = cols.shape
    out = np.zeros((b, n_out, length), dtype=cols.dtype)
    if len(gidx) == 0:
        return out
    vals = values.reshape(-1, o)[gidx].astype(cols.dtype)
    rows = grow[gidx]
    cidx = gcol[gidx]
    for r in np.unique(rows):
        sel = rows == r
        wsub = vals[sel].T                          # (o, live columns)
        out[:, r * o:(r + 1) * o, :] = np.einsum("oc,bcl->bol", wsub, cols[:, cidx[sel], :])
    return out


def bn_train_forward(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    return xhat * gamma[None, :, None, None] + beta[None, :, None, None], xhat, mean, var, inv


def bn_train_backward(dy, xhat, gamma, inv):
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    count = dy.size // dy.shape[1]
    g = gamma[None, :, None, None]
    dx = (g * dy - g * dbeta[None, :, None, None] / count
          - xhat * (g * dgamma[None, :, None, None] / count)) * inv[None, :, None, None]
    return dx, dgamma, dbeta
