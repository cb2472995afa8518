"""Hot numeric kernels with a compiled backend and a numpy fallback.

The compiled module ``capgan._ssim_ext`` is built from Cython when the
package is installed; if it is missing (or ``CAPGAN_PURE_PYTHON=1`` is set)
the numpy implementation below is used.  ``BACKEND`` names the active one.
"""
from __future__ import annotations

import os

import numpy as np


def _window_sums(x: np.ndarray, win: int) -> np.ndarray:
    # x: [K, H, W, C] -> [K, H-win+1, W-win+1, C] via summed-area tables
    k, h, w, c = x.shape
    sat = np.zeros((k, h + 1, w + 1, c), dtype=np.float64)
    sat[:, 1:, 1:] = x
    sat = sat.cumsum(axis=1).cumsum(axis=2)
    return (sat[:, win:, win:] - sat[:, :-win, win:]
            - sat[:, win:, :-win] + sat[:, :-win, :-win])


def _ssim_from_sums(sa, sb, saa, sbb, sab, inv_n, c1, c2):
    mu_a = sa * inv_n
    mu_b = sb * inv_n
    var_a = saa * inv_n - mu_a * mu_a
    var_b = sbb * inv_n - mu_b * mu_b
    cov = sab * inv_n - mu_a * mu_b
    return ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / \
        ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))


def _ssim_batch_numpy(a, b, c1, c2, win):
    k, h, w, c = a.shape
    if h < win or w < win:
        axes = (1, 2)
        s = _ssim_from_sums(a.sum(axes), b.sum(axes), (a * a).sum(axes), (b * b).sum(axes),
                            (a * b).sum(axes), 1.0 / (h * w), c1, c2)
        return s.mean(axis=1)
    s = _ssim_from_sums(_window_sums(a, win), _window_sums(b, win), _window_sums(a * a, win),
                        _window_sums(b * b, win), _window_sums(a * b, win),
                        1.0 / (win * win), c1, c2)
    return s.mean(axis=(1, 2)).mean(axis=1)


_compiled = None
if not os.environ.get("CAPGAN_PURE_PYTHON"):
    try:
        from ._ssim_ext import ssim_batch as _compiled
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "numpy"


def ssim_batch(a, b, c1: float, c2: float, win: int = 8, backend: str | None = None) -> np.ndarray:
    """Mean sliding-window SSIM for each pair ``(a[k], b[k])``; inputs ``[K, H, W, C]``.

    Windows are ``win x win`` with stride 1 and uniform weights; images
    smaller than the window use whole-image statistics.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    backend = backend or BACKEND
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled SSIM kernel is not available")
        return np.asarray(_compiled(a, b, float(c1), float(c2), int(win)))
    if backend == "numpy":
        return _ssim_batch_numpy(a, b, c1, c2, win)
    raise ValueError(f"unknown backend {backend!r}")
