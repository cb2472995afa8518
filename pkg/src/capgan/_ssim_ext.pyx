# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SSIM kernel: batched sliding-window SSIM over image pairs.

Mirrors ``capgan.kernels._ssim_batch_numpy`` operation for operation on the
window statistics (summed-area tables), so both backends agree to rounding.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _ssim_from_sums(double sa, double sb, double saa, double sbb,
                                   double sab, double inv_n, double c1, double c2) nogil:
    cdef double mu_a = sa * inv_n
    cdef double mu_b = sb * inv_n
    cdef double var_a = saa * inv_n - mu_a * mu_a
    cdef double var_b = sbb * inv_n - mu_b * mu_b
    cdef double cov = sab * inv_n - mu_a * mu_b
    return ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / \
           ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))


def ssim_batch(const double[:, :, :, ::1] a, const double[:, :, :, ::1] b,
               double c1, double c2, int win):
    cdef Py_ssize_t K = a.shape[0], H = a.shape[1], W = a.shape[2], C = a.shape[3]
    cdef Py_ssize_t k, c, i, j, i1, j1
    cdef double acc, va, vb, inv_n, sa, sb, saa, sbb, sab
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(K, dtype=np.float64)
    cdef double[:, :, ::1] sat = np.zeros((5, H + 1, W + 1), dtype=np.float64)
    cdef bint global_stats = H < win or W < win
    cdef Py_ssize_t nwin = (H - win + 1) * (W - win + 1) if not global_stats else 1

    with nogil:
        for k in range(K):
            acc = 0.0
            for c in range(C):
                if global_stats:
                    sa = 0.0; sb = 0.0; saa = 0.0; sbb = 0.0; sab = 0.0
                    for i in range(H):
                        for j in range(W):
                            va = a[k, i, j, c]
                            vb = b[k, i, j, c]
                            sa += va; sb += vb
                            saa += va * va; sbb += vb * vb; sab += va * vb
                    acc += _ssim_from_sums(sa, sb, saa, sbb, sab, 1.0 / (H * W), c1, c2)
                    continue
                # integral images, row-major cumulative sums
                for i in range(H):
                    for j in range(W):
                        va = a[k, i, j, c]
                        vb = b[k, i, j, c]
                        sat[0, i + 1, j + 1] = va
                        sat[1, i + 1, j + 1] = vb
                        sat[2, i + 1, j + 1] = va * va
                        sat[3, i + 1, j + 1] = vb * vb
                        sat[4, i + 1, j + 1] = va * vb
                for i in range(1, H + 1):
                    for j in range(1, W + 1):
                        sat[0, i, j] += sat[0, i - 1, j]
                        sat[1, i, j] += sat[1, i - 1, j]
                        sat[2, i, j] += sat[2, i - 1, j]
                        sat[3, i, j] += sat[3, i - 1, j]
                        sat[4, i, j] += sat[4, i - 1, j]
                for i in range(1, H + 1):
                    for j in range(1, W + 1):
                        sat[0, i, j] += sat[0, i, j - 1]
                        sat[1, i, j] += sat[1, i, j - 1]
                        sat[2, i, j] += sat[2, i, j - 1]
                        sat[3, i, j] += sat[3, i, j - 1]
                        sat[4, i, j] += sat[4, i, j - 1]
                inv_n = 1.0 / (win * win)
                va = 0.0
                for i in range(H - win + 1):
                    i1 = i + win
                    for j in range(W - win + 1):
                        j1 = j + win
                        sa = sat[0, i1, j1] - sat[0, i, j1] - sat[0, i1, j] + sat[0, i, j]
                        sb = sat[1, i1, j1] - sat[1, i, j1] - sat[1, i1, j] + sat[1, i, j]
                        saa = sat[2, i1, j1] - sat[2, i, j1] - sat[2, i1, j] + sat[2, i, j]
                        sbb = sat[3, i1, j1] - sat[3, i, j1] - sat[3, i1, j] + sat[3, i, j]
                        sab = sat[4, i1, j1] - sat[4, i, j1] - sat[4, i1, j] + sat[4, i, j]
                        va += _ssim_from_sums(sa, sb, saa, sbb, sab, inv_n, c1, c2)
                acc += va / nwin
            out[k] = acc / C
    return out
