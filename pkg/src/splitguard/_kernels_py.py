"""Pure-numpy im2col/col2im, used when the compiled extension is unavailable."""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, sh, sw):
    """Unfold ``x`` (N, C, H, W) into columns of shape (N, C*kh*kw, Ho*Wo).

    ``x`` must already be padded.
    """
    n, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    x = np.ascontiguousarray(x)
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )
    return win.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, c, h, w, kh, kw, sh, sw):
    """Adjoint of :func:`im2col`: scatter-add columns back onto an (N, C, H, W) canvas."""
    n = cols.shape[0]
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + sh * ho
        for j in range(kw):
            j_end = j + sw * wo
            out[:, :, i:i_end:sh, j:j_end:sw] += cols[:, :, i, j]
    return out
