"""Pure-numpy versions of the hot kernels, used when the compiled module is absent."""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, stride):
    """(N, C, H, W) already padded -> (N, Ho, Wo, C*kh*kw) patch matrix."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    view = as_strided(x, (n, ho, wo, c, kh, kw), (sn, sh * stride, sw * stride, sc, sh, sw), writeable=False)
    return view.reshape(n, ho, wo, c * kh * kw)


def col2im(cols, shape, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add patches back onto a padded image."""
    n, c, h, w = shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    patches = np.asarray(cols, dtype=np.float64).reshape(n, ho, wo, c, kh, kw)
    out = np.zeros(shape)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += patches[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    return out


def ranked_average_precision(relevant):
    """Non-interpolated AP of a 0/1 relevance vector already in rank order."""
    rel = np.asarray(relevant, dtype=np.float64)
    total = rel.sum()
    if total == 0:
        return 0.0
    hits = np.cumsum(rel)
    terms = (hits / np.arange(1, rel.size + 1))[rel != 0]
    # cumsum adds left to right, matching the compiled loop bit for bit
    return float(np.cumsum(terms)[-1] / total)
