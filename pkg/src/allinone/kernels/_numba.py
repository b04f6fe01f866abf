"""Loop kernels compiled with numba; same contracts as the numpy module."""
import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, stride):
    b, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = np.empty((b * oh * ow, c * kh * kw), dtype=xp.dtype)
    for n in range(b):
        for y in range(oh):
            for x in range(ow):
                r = (n * oh + y) * ow + x
                q = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[r, q] = xp[n, ch, y * stride + i, x * stride + j]
                            q += 1
    return cols


@njit(cache=True)
def col2im(dcols, xp_shape, kh, kw, stride):
    b, c, hp, wp = xp_shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    dxp = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    for n in range(b):
        for y in range(oh):
            for x in range(ow):
                r = (n * oh + y) * ow + x
                q = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            dxp[n, ch, y * stride + i, x * stride + j] += dcols[r, q]
                            q += 1
    return dxp


@njit(cache=True)
def conv2d_direct(xp, w, stride):
    b, c, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((b, o, oh, ow), dtype=xp.dtype)
    for n in range(b):
        for m in range(o):
            for y in range(oh):
                for x in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[m, ch, i, j] * xp[n, ch, y * stride + i, x * stride + j]
                    out[n, m, y, x] = acc
    return out


@njit(cache=True)
def maxpool_forward(xp, k, stride):
    b, c, hp, wp = xp.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    out = np.empty((b, c, oh, ow), dtype=xp.dtype)
    arg = np.empty((b, c, oh, ow), dtype=np.int64)
    for n in range(b):
        for ch in range(c):
            for y in range(oh):
                for x in range(ow):
                    best = xp[n, ch, y * stride, x * stride]
                    bi = 0
                    for i in range(k):
                        for j in range(k):
                            v = xp[n, ch, y * stride + i, x * stride + j]
                            if v > best:
                                best = v
                                bi = i * k + j
                    out[n, ch, y, x] = best
                    arg[n, ch, y, x] = bi
    return out, arg


@njit(cache=True)
def maxpool_backward(dout, arg, xp_shape, k, stride):
    b, c, hp, wp = xp_shape
    dxp = np.zeros((b, c, hp, wp), dtype=dout.dtype)
    oh, ow = dout.shape[2], dout.shape[3]
    for n in range(b):
        for ch in range(c):
            for y in range(oh):
                for x in range(ow):
                    a = arg[n, ch, y, x]
                    dxp[n, ch, y * stride + a // k, x * stride + a % k] += dout[n, ch, y, x]
    return dxp


@njit(cache=True)
def pattern_conv(xp, values, kidx, kout, kin, kpat, offsets, n_out, stride, oh, ow):
    b = xp.shape[0]
    out = np.zeros((b, n_out, oh, ow), dtype=xp.dtype)
    for n in range(b):
        for t in range(kidx.shape[0]):
            k = kidx[t]
            m = kout[k]
            ch = kin[k]
            p = kpat[k]
            for q in range(4):
                v = values[4 * k + q]
                dy = offsets[p, q, 0]
                dx = offsets[p, q, 1]
                for y in range(oh):
                    for x in range(ow):
                        out[n, m, y, x] += v * xp[n, ch, y * stride + dy, x * stride + dx]
    return out


@njit(cache=True)
def block_matmul(cols, values, gidx, grow, gcol, o, n_out):
    b, _, length = cols.shape
    out = np.zeros((b, n_out, length), dtype=cols.dtype)
    for n in range(b):
        for t in range(gidx.shape[0]):
            g = gidx[t]
            r0 = grow[g] * o
            col = gcol[g]
            for i in range(o):
                v = values[g * o + i]
                for l in range(length):
                    out[n, r0 + i, l] += v * cols[n, col, l]
    return out


@njit(cache=True)
def bn_train_forward(x, gamma, beta, eps):
    b, c, h, w = x.shape
    count = b * h * w
    mean = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for n in range(b):
            for y in range(h):
                for z in range(w):
                    acc += x[n, ch, y, z]
        mean[ch] = acc / count
        acc = 0.0
        for n in range(b):
            for y in range(h):
                for z in range(w):
                    d = x[n, ch, y, z] - mean[ch]
                    acc += d * d
        var[ch] = acc / count
    inv = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for n in range(b):
        for ch in range(c):
            for y in range(h):
                for z in range(w):
                    v = (x[n, ch, y, z] - mean[ch]) * inv[ch]
                    xhat[n, ch, y, z] = v
                    out[n, ch, y, z] = v * gamma[ch] + beta[ch]
    return out, xhat, mean, var, inv


@njit(cache=True)
def bn_train_backward(dy, xhat, gamma, inv):
    b, c, h, w = dy.shape
    count = b * h * w
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for n in range(b):
        for ch in range(c):
            for y in range(h):
                for z in range(w):
                    dgamma[ch] += dy[n, ch, y, z] * xhat[n, ch, y, z]
                    dbeta[ch] += dy[n, ch, y, z]
    dx = np.empty_like(dy)
    for n in range(b):
        for ch in range(c):
            g = gamma[ch]
            mean_d = g * dbeta[ch] / count
            mean_dx = g * dgamma[ch] / count
            for y in range(h):
                for z in range(w):
                    dx[n, ch, y, z] = (g * dy[n, ch, y, z] - mean_d - xhat[n, ch, y, z] * mean_dx) * inv[ch]
    return dx, dgamma, dbeta
