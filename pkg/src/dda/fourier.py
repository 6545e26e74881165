"""Circular 2D spectral operations on image planes.

A plane is a real 2D array.  Every function here acts on the last two axes
and broadcasts over any leading axes, so a ``(C, H, W)`` image or an
``(N, C, H, W)`` batch is processed one plane at a time.

Outputs keep zero lag at index ``(0, 0)``.  :func:`center_shift` moves it to
``(H // 2, W // 2)`` for display and for kernels stored in centered form.
"""

import numpy as np

__all__ = [
    "fft2",
    "ifft2",
    "cross_correlate",
    "convolve",
    "autocorrelate",
    "center_shift",
    "uncenter_shift",
]

# Kernels with at most this many nonzero lags are applied directly as a sum
# of rolled copies, which is exact and cheaper than a transform.
SPARSE_KERNEL_MAX = 8

IMAG_RESIDUE_TOL = 1e-9


def _check_plane(p, name="plane"):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 2:
        raise ValueError(f"{name} must have at least 2 dimensions, got shape {p.shape}")
    if p.shape[-1] < 1 or p.shape[-2] < 1:
        raise ValueError(f"{name} has an empty spatial extent: shape {p.shape}")
    bad = ~np.isfinite(p)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{name} contains a non-finite value {p[idx]!r} at index {idx}")
    return p


def _check_pair(a, b):
    a = _check_plane(a, "a")
    b = _check_plane(b, "b")
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"plane shapes differ: a is {a.shape}, b is {b.shape}")
    return a, b


def fft2(p):
    """Unnormalized forward DFT over the last two axes."""
    return np.fft.fft2(_check_plane(p))


def ifft2(s):
    """Inverse DFT (with ``1/(H*W)`` scaling) returning a real plane.

    The imaginary part is dropped only when it is round-off; a larger residue
    means the spectrum was not conjugate-symmetric and a ``ValueError`` is
    raised.
    """
    s = np.asarray(s, dtype=np.complex128)
    if s.ndim < 2:
        raise ValueError(f"spectrum must have at least 2 dimensions, got shape {s.shape}")
    out = np.fft.ifft2(s)
    residue = np.max(np.abs(out.imag), initial=0.0)
    scale = np.max(np.abs(out.real), initial=0.0) + 1.0
    if residue >= IMAG_RESIDUE_TOL * scale:
        raise ValueError(
            f"inverse transform has imaginary residue {residue:.3e} "
            f"(limit {IMAG_RESIDUE_TOL * scale:.3e}); spectrum is not conjugate-symmetric"
        )
    return np.ascontiguousarray(out.real)


def _sparse_lags(k):
    """Nonzero lag positions of kernel ``k`` (union over leading axes), or None."""
    support = np.any(k != 0, axis=tuple(range(k.ndim - 2)))
    rows, cols = np.nonzero(support)
    if rows.size > SPARSE_KERNEL_MAX:
        return None
    return list(zip(rows.tolist(), cols.tolist()))


def _rolled_sum(x, k, lags, sign, shape):
    out = np.zeros(shape)
    for r, c in lags:
        out = out + k[..., r, c][..., None, None] * np.roll(x, (sign * r, sign * c), axis=(-2, -1))
    return out


def cross_correlate(a, b):
    """Circular cross-correlation ``out[l] = sum_n a[n + l] * b[n]``.

    Computed as ``ifft2(fft2(a) * conj(fft2(b)))``; the second argument is
    the conjugated one.
    """
    a, b = _check_pair(a, b)
    shape = np.broadcast_shapes(a.shape, b.shape)
    lags = _sparse_lags(b)
    if lags is not None:
        return _rolled_sum(a, b, lags, -1, shape)
    lags = _sparse_lags(a)
    if lags is not None:
        return _correlate_sparse_first(a, b, lags, shape)
    return ifft2(np.fft.fft2(a) * np.conj(np.fft.fft2(b)))


def _correlate_sparse_first(a, b, lags, shape):
    # out[l] = sum_m a[m] * b[m - l]; b[m - l] as a function of l is the
    # index-reversed b rolled by m + 1
    b_rev = b[..., ::-1, ::-1]
    out = np.zeros(shape)
    for r, c in lags:
        out = out + a[..., r, c][..., None, None] * np.roll(b_rev, (r + 1, c + 1), axis=(-2, -1))
    return out


def convolve(a, b):
    """Circular convolution ``out[l] = sum_n a[n] * b[l - n]``."""
    a, b = _check_pair(a, b)
    shape = np.broadcast_shapes(a.shape, b.shape)
    lags_b = _sparse_lags(b)
    lags_a = _sparse_lags(a)
    if lags_b is not None and (lags_a is None or len(lags_b) <= len(lags_a)):
        return _rolled_sum(a, b, lags_b, 1, shape)
    if lags_a is not None:
        return _rolled_sum(b, a, lags_a, 1, shape)
    return ifft2(np.fft.fft2(a) * np.fft.fft2(b))


def autocorrelate(p):
    """Circular auto-correlation; its spectrum is ``|fft2(p)|**2``."""
    return cross_correlate(p, p)


def center_shift(p):
    """Cyclically move index ``(0, 0)`` to ``(H // 2, W // 2)``."""
    p = np.asarray(p)
    h, w = p.shape[-2:]
    return np.roll(p, (h // 2, w // 2), axis=(-2, -1))


def uncenter_shift(p):
    """Inverse of :func:`center_shift` (they coincide for even sizes)."""
    p = np.asarray(p)
    h, w = p.shape[-2:]
    return np.roll(p, (-(h // 2), -(w // 2)), axis=(-2, -1))
